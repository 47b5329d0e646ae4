#pragma once

#include "digr/attacks.hpp"
#include "digr/digr.hpp"
#include "digr/policy_net.hpp"
#include "digr/ppo.hpp"
#include "digr/saliency.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace digr {

struct AttackGridConfig {
  std::vector<double> epsilons = {0.0, 0.005, 0.01, 0.02, 0.03, 0.05};
  int iterations = 10;
  double step_size = 0.0;  // <= 0: epsilon / 4
  double momentum = 1.0;
  int runs = 50;
};

struct SaliencyEvalConfig {
  int ig_steps = 50;
  double smooth_sigma = 0.15;
  int smooth_samples = 20;
  std::size_t labeled_states = 10000;
  /// GB perturbation, integrated gradients and SmoothGrad are scored on the
  /// first this-many labeled states.
  std::size_t subset_states = 300;
  std::size_t timing_states = 20;
  int timing_repetitions = 3;
};

/// Everything a pipeline stage needs; JSON with strict keys.
struct ExperimentConfig {
  std::string env_id = kFetchEnvId;
  Architecture architecture = Architecture::fetch_default();
  PPOConfig ppo;
  DIGRConfig digr;
  PerturbationSpec perturbation;
  AttackGridConfig attack;
  SaliencyEvalConfig saliency;
  int eval_episodes = 200;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";

  void validate() const;
  SaliencyOptions saliency_options() const;
  RobustnessOptions robustness_options() const;
};

void to_json(nlohmann::json& j, const AttackGridConfig& c);
void from_json(const nlohmann::json& j, AttackGridConfig& c);
void to_json(nlohmann::json& j, const SaliencyEvalConfig& c);
void from_json(const nlohmann::json& j, SaliencyEvalConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Parses and validates; throws ConfigError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string dump_config(const ExperimentConfig& c);
/// SHA-256 of the canonical dump.
std::string config_hash(const ExperimentConfig& c);

}  // namespace digr

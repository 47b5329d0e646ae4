#pragma once

#include "digr/policy_net.hpp"
#include "digr/random.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace digr {

enum class AttackKind { kFgsm, kPgd, kMiFgsm, kMad };

std::string to_string(AttackKind a);
AttackKind attack_kind_from_string(const std::string& name);
const std::vector<AttackKind>& all_attacks();

/// L-infinity attack settings in normalized pixel units.
struct AttackConfig {
  double epsilon = 0.0;
  /// Per-iteration step; <= 0 means epsilon / 4.
  double step_size = 0.0;
  int iterations = 10;
  double momentum = 1.0;
  /// Uniform start inside the ball (PGD and MAD).
  bool random_start = true;

  double effective_step() const { return step_size > 0.0 ? step_size : epsilon / 4.0; }
  void validate() const;
};

// All attacks take a batch [B, C, H, W] in [0, 1] and return a detached batch
// inside both [0, 1] and the epsilon-ball around it.

/// Cross-entropy against the greedy action of the clean batch, summed over rows.
Tensor attack_loss(const Policy& policy, const Tensor& x, const std::vector<Index>& target);

Tensor fgsm(const Policy& policy, const Tensor& obs, double epsilon);
Tensor pgd(const Policy& policy, const Tensor& obs, const AttackConfig& config, Rng& rng);
Tensor mi_fgsm(const Policy& policy, const Tensor& obs, const AttackConfig& config);
/// Maximizes KL(pi(obs) || pi(obs')). `trace` (optional) receives the summed
/// objective after each iteration.
Tensor mad(const Policy& policy, const Tensor& obs, const AttackConfig& config, Rng& rng,
           std::vector<double>* trace = nullptr);

Tensor run_attack(AttackKind kind, const Policy& policy, const Tensor& obs, const AttackConfig& config, Rng& rng);

/// Clips x into [lo, hi] with lo = max(0, obs - eps), hi = min(1, obs + eps).
Tensor project(const Tensor& x, const Tensor& obs, double epsilon);

struct RobustnessRow {
  std::string policy_id;
  AttackKind attack = AttackKind::kFgsm;
  double epsilon = 0.0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double mean_success = 0.0;
  int runs = 0;
};

struct RobustnessOptions {
  std::vector<AttackKind> attacks = all_attacks();
  std::vector<double> epsilons = {0.0, 0.005, 0.01, 0.02, 0.03, 0.05};
  int runs = 50;
  std::uint64_t seed = 0;
  /// Template for iterations, momentum, step rule; epsilon is overwritten.
  AttackConfig base;
};

/// Every observation is attacked before the policy acts; episode seeds are
/// shared across cells so policies and budgets are compared on paired layouts.
std::vector<RobustnessRow> evaluate_robustness(const Policy& policy, const std::string& policy_id,
                                               const RobustnessOptions& options);

std::string robustness_csv(const std::vector<RobustnessRow>& rows);

}  // namespace digr

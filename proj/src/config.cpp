#include "digr/config.hpp"

#include "digr/json_util.hpp"
#include "digr/serialize.hpp"

#include <fstream>
#include <sstream>

namespace digr {

void to_json(nlohmann::json& j, const AttackGridConfig& c) {
  j = {{"epsilons", c.epsilons},
       {"iterations", c.iterations},
       {"step_size", c.step_size},
       {"momentum", c.momentum},
       {"runs", c.runs}};
}

void from_json(const nlohmann::json& j, AttackGridConfig& c) {
  const std::string where = "attack";
  reject_unknown_keys(j, {"epsilons", "iterations", "step_size", "momentum", "runs"}, where);
  read_optional(j, "epsilons", c.epsilons, where);
  read_optional(j, "iterations", c.iterations, where);
  read_optional(j, "step_size", c.step_size, where);
  read_optional(j, "momentum", c.momentum, where);
  read_optional(j, "runs", c.runs, where);
}

void to_json(nlohmann::json& j, const SaliencyEvalConfig& c) {
  j = {{"ig_steps", c.ig_steps},
       {"smooth_sigma", c.smooth_sigma},
       {"smooth_samples", c.smooth_samples},
       {"labeled_states", c.labeled_states},
       {"subset_states", c.subset_states},
       {"timing_states", c.timing_states},
       {"timing_repetitions", c.timing_repetitions}};
}

void from_json(const nlohmann::json& j, SaliencyEvalConfig& c) {
  const std::string where = "saliency";
  reject_unknown_keys(j,
                      {"ig_steps", "smooth_sigma", "smooth_samples", "labeled_states", "subset_states",
                       "timing_states", "timing_repetitions"},
                      where);
  read_optional(j, "ig_steps", c.ig_steps, where);
  read_optional(j, "smooth_sigma", c.smooth_sigma, where);
  read_optional(j, "smooth_samples", c.smooth_samples, where);
  read_optional(j, "labeled_states", c.labeled_states, where);
  read_optional(j, "subset_states", c.subset_states, where);
  read_optional(j, "timing_states", c.timing_states, where);
  read_optional(j, "timing_repetitions", c.timing_repetitions, where);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"env", {{"id", c.env_id}}},
       {"architecture", c.architecture},
       {"ppo", c.ppo},
       {"digr", c.digr},
       {"perturbation", c.perturbation},
       {"attack", c.attack},
       {"saliency", c.saliency},
       {"eval_episodes", c.eval_episodes},
       {"seed", c.seed},
       {"output_dir", c.output_dir}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  const std::string where = "config";
  reject_unknown_keys(j,
                      {"env", "architecture", "ppo", "digr", "perturbation", "attack", "saliency",
                       "eval_episodes", "seed", "output_dir"},
                      where);
  if (j.contains("env")) {
    reject_unknown_keys(j.at("env"), {"id"}, "env");
    read_optional(j.at("env"), "id", c.env_id, "env");
  }
  if (j.contains("architecture")) {
    const auto& a = j.at("architecture");
    reject_unknown_keys(a, {"input_channels", "input_height", "input_width", "convs", "hidden", "num_actions"},
                        "architecture");
    try {
      nlohmann::json merged = c.architecture;
      merged.update(a);
      c.architecture = merged.get<Architecture>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("architecture: ") + e.what());
    }
  }
  try {
    if (j.contains("ppo")) c.ppo = j.at("ppo").get<PPOConfig>();
    if (j.contains("digr")) c.digr = j.at("digr").get<DIGRConfig>();
    if (j.contains("perturbation")) c.perturbation = j.at("perturbation").get<PerturbationSpec>();
    if (j.contains("attack")) c.attack = j.at("attack").get<AttackGridConfig>();
    if (j.contains("saliency")) c.saliency = j.at("saliency").get<SaliencyEvalConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  read_optional(j, "eval_episodes", c.eval_episodes, where);
  read_optional(j, "seed", c.seed, where);
  read_optional(j, "output_dir", c.output_dir, where);
}

void ExperimentConfig::validate() const {
  auto wrap = [](auto&& f) {
    try {
      f();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  };
  if (env_id != kFetchEnvId) throw ConfigError("env.id: only " + std::string(kFetchEnvId) + " is available");
  if (architecture.num_actions != kNumActions) throw ConfigError("architecture.num_actions must equal the env's 4 actions");
  if (architecture.observation_shape() != Shape{3, FetchEnv::kImageSize, FetchEnv::kImageSize}) {
    throw ConfigError("architecture input must be 3x64x64");
  }
  if (architecture.convs.size() != 3) throw ConfigError("architecture: exactly three conv layers");
  wrap([&] { ppo.validate(); });
  wrap([&] { digr.validate(); });
  wrap([&] { perturbation.validate(); });
  for (double e : attack.epsilons) {
    if (!(e >= 0.0)) throw ConfigError("attack.epsilons must be >= 0");
  }
  if (attack.iterations < 1 || attack.runs < 1) throw ConfigError("attack.iterations and attack.runs must be >= 1");
  if (attack.momentum < 0 || attack.momentum > 1) throw ConfigError("attack.momentum must be in [0, 1]");
  if (saliency.ig_steps < 1 || saliency.smooth_samples < 1 || saliency.smooth_sigma < 0) {
    throw ConfigError("saliency: ig_steps, smooth_samples >= 1 and smooth_sigma >= 0");
  }
  if (saliency.labeled_states < 1 || saliency.timing_states < 1 || saliency.timing_repetitions < 3) {
    throw ConfigError("saliency: labeled_states, timing_states >= 1 and timing_repetitions >= 3");
  }
  if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

SaliencyOptions ExperimentConfig::saliency_options() const {
  SaliencyOptions o;
  o.perturbation = perturbation;
  o.ig_steps = saliency.ig_steps;
  o.smooth_sigma = saliency.smooth_sigma;
  o.smooth_samples = saliency.smooth_samples;
  o.seed = seed;
  return o;
}

RobustnessOptions ExperimentConfig::robustness_options() const {
  RobustnessOptions o;
  o.epsilons = attack.epsilons;
  o.runs = attack.runs;
  o.seed = seed;
  o.base.iterations = attack.iterations;
  o.base.step_size = attack.step_size;
  o.base.momentum = attack.momentum;
  return o;
}

ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& c) { return nlohmann::json(c).dump(2) + "\n"; }

std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = c;
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

}  // namespace digr

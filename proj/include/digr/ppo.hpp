#pragma once

#include "digr/gridworld.hpp"
#include "digr/optim.hpp"
#include "digr/policy_net.hpp"
#include "digr/random.hpp"

#include <functional>
#include <json.hpp>
#include <string>
#include <vector>

namespace digr {

struct PPOConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  double clip_range = 0.2;
  double learning_rate = 1e-3;
  double adam_epsilon = 1e-5;
  long long total_steps = 2'000'000;
  int num_envs = 16;
  int steps_per_rollout = 128;
  int epochs = 4;
  int minibatches = 8;
  /// Rollouts between log rows.
  int log_interval = 1;
  /// Training stops early once this many consecutive log rows report a
  /// success rate of 1 over the last 100 episodes. 0 disables.
  int early_stop_rows = 10;

  /// Throws std::invalid_argument naming the first bad field.
  void validate() const;
  long long batch_size() const { return static_cast<long long>(num_envs) * steps_per_rollout; }
};

void to_json(nlohmann::json& j, const PPOConfig& c);
void from_json(const nlohmann::json& j, PPOConfig& c);

/// Transitions laid out time-major: entry t * num_envs + e.
struct RolloutBuffer {
  int num_envs = 0;
  int steps = 0;
  std::vector<Tensor> observations;  // each [3, H, W]
  std::vector<int> actions;
  std::vector<double> log_probs;
  std::vector<double> values;
  std::vector<double> rewards;
  std::vector<bool> dones;  // episode ended after this transition
  std::vector<double> last_values;  // V(s_T) per env, for bootstrapping
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t size() const { return actions.size(); }
  bool has_advantages() const { return advantages.size() == size() && size() > 0; }
};

/// Fills advantages and returns by generalized advantage estimation.
void compute_gae(RolloutBuffer& buffer, double gamma, double lambda);

/// (x - mean) / (std + 1e-8) with the population standard deviation.
std::vector<double> normalize_advantages(const std::vector<double>& adv);

/// A set of environments advanced in lockstep with a shared policy.
class VecFetchEnv {
 public:
  VecFetchEnv(int num_envs, std::uint64_t seed);

  int size() const { return static_cast<int>(envs_.size()); }
  const std::vector<Tensor>& observations() const { return obs_; }
  FetchEnv& env(int i) { return envs_[static_cast<std::size_t>(i)]; }

  struct Step {
    std::vector<double> rewards;
    std::vector<bool> dones;
    std::vector<bool> successes;
    std::vector<int> lengths;  // episode length where done, else 0
  };
  /// Steps every env; finished envs are reset with their next seed.
  Step step(const std::vector<int>& actions);

 private:
  std::uint64_t seed_;
  std::vector<FetchEnv> envs_;
  std::vector<std::uint64_t> episode_counter_;
  std::vector<Tensor> obs_;
};

/// Runs `steps` lockstep steps, sampling actions from the policy.
RolloutBuffer collect_rollout(const PolicyValueNet& net, VecFetchEnv& envs, int steps, Rng& rng,
                              std::vector<VecFetchEnv::Step>* episode_events = nullptr);

struct PPOStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

/// Per-minibatch clipped-surrogate loss terms. `old_log_probs`, `advantages`
/// and `returns` are constants.
struct PPOLossTerms {
  Tensor policy_loss;
  Tensor value_loss;
  Tensor entropy;
  Tensor total;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

PPOLossTerms ppo_loss(const PolicyOutput& out, const std::vector<int>& actions,
                      const std::vector<double>& old_log_probs, const std::vector<double>& advantages,
                      const std::vector<double>& returns, const PPOConfig& config);

/// Several epochs of minibatch updates over one rollout; returns the means.
PPOStats ppo_update(PolicyValueNet& net, Optimizer& optimizer, const RolloutBuffer& buffer,
                    const PPOConfig& config, Rng& rng);

struct PPOLogRow {
  long long step = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
};

struct PPOResult {
  std::vector<PPOLogRow> log;
  long long steps = 0;
};

/// Trains `net` in place. `on_row` (optional) sees each log row as it is made.
PPOResult train_ppo(PolicyValueNet& net, const PPOConfig& config, std::uint64_t seed,
                    const std::function<void(const PPOLogRow&)>& on_row = {});

/// Header plus one line per row.
std::string ppo_log_csv(const std::vector<PPOLogRow>& rows);

struct EvalResult {
  int episodes = 0;
  double success_rate = 0.0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double mean_length = 0.0;
  std::vector<double> returns;
};

/// Applied to each batch of observations [B, 3, H, W] before the policy acts.
using ObservationHook = std::function<Tensor(const Tensor& obs, Rng& rng)>;

struct EvalOptions {
  int episodes = 100;
  bool deterministic = true;
  std::uint64_t seed = 0;
  /// Episodes advanced together per batched forward.
  int parallel = 50;
  ObservationHook hook;
};

/// Episode i starts from reset seed derive_seed(seed, kEvalStream, i), so two
/// policies evaluated with the same seed face the same layouts.
EvalResult evaluate_policy(const Policy& policy, const EvalOptions& options);

inline constexpr std::uint64_t kEvalStream = 0xe7a1;

}  // namespace digr

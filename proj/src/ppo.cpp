#include "digr/ppo.hpp"

#include "digr/json_util.hpp"
#include "digr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace digr {

namespace {

constexpr std::uint64_t kTrainEnvStream = 0x7a11;
constexpr std::uint64_t kEvalActionStream = 0xe7a2;

void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("ppo config: ") + what);
}

Tensor gather_rows(const std::vector<Tensor>& obs, const std::vector<std::size_t>& idx) {
  std::vector<Tensor> parts;
  parts.reserve(idx.size());
  for (std::size_t i : idx) parts.push_back(obs[i]);
  return stack(parts);
}

}  // namespace

void PPOConfig::validate() const {
  check(gamma > 0 && gamma <= 1, "gamma must be in (0, 1]");
  check(gae_lambda >= 0 && gae_lambda <= 1, "gae_lambda must be in [0, 1]");
  check(entropy_coef >= 0, "entropy_coef must be >= 0");
  check(value_coef > 0, "value_coef must be > 0");
  check(max_grad_norm > 0, "max_grad_norm must be > 0");
  check(clip_range > 0 && clip_range < 1, "clip_range must be in (0, 1)");
  check(learning_rate > 0, "learning_rate must be > 0");
  check(adam_epsilon > 0, "adam_epsilon must be > 0");
  check(total_steps > 0, "total_steps must be > 0");
  check(num_envs > 0 && steps_per_rollout > 0, "num_envs and steps_per_rollout must be > 0");
  check(epochs > 0 && minibatches > 0, "epochs and minibatches must be > 0");
  check(batch_size() % minibatches == 0, "num_envs * steps_per_rollout must divide into minibatches");
  check(log_interval > 0, "log_interval must be > 0");
  check(early_stop_rows >= 0, "early_stop_rows must be >= 0");
}

void to_json(nlohmann::json& j, const PPOConfig& c) {
  j = {{"gamma", c.gamma},
       {"gae_lambda", c.gae_lambda},
       {"entropy_coef", c.entropy_coef},
       {"value_coef", c.value_coef},
       {"max_grad_norm", c.max_grad_norm},
       {"clip_range", c.clip_range},
       {"learning_rate", c.learning_rate},
       {"adam_epsilon", c.adam_epsilon},
       {"total_steps", c.total_steps},
       {"num_envs", c.num_envs},
       {"steps_per_rollout", c.steps_per_rollout},
       {"epochs", c.epochs},
       {"minibatches", c.minibatches},
       {"log_interval", c.log_interval},
       {"early_stop_rows", c.early_stop_rows}};
}

void from_json(const nlohmann::json& j, PPOConfig& c) {
  const std::string where = "ppo";
  reject_unknown_keys(j,
                      {"gamma", "gae_lambda", "entropy_coef", "value_coef", "max_grad_norm",
                       "clip_range", "learning_rate", "adam_epsilon", "total_steps", "num_envs",
                       "steps_per_rollout", "epochs", "minibatches", "log_interval",
                       "early_stop_rows"},
                      where);
  read_optional(j, "gamma", c.gamma, where);
  read_optional(j, "gae_lambda", c.gae_lambda, where);
  read_optional(j, "entropy_coef", c.entropy_coef, where);
  read_optional(j, "value_coef", c.value_coef, where);
  read_optional(j, "max_grad_norm", c.max_grad_norm, where);
  read_optional(j, "clip_range", c.clip_range, where);
  read_optional(j, "learning_rate", c.learning_rate, where);
  read_optional(j, "adam_epsilon", c.adam_epsilon, where);
  read_optional(j, "total_steps", c.total_steps, where);
  read_optional(j, "num_envs", c.num_envs, where);
  read_optional(j, "steps_per_rollout", c.steps_per_rollout, where);
  read_optional(j, "epochs", c.epochs, where);
  read_optional(j, "minibatches", c.minibatches, where);
  read_optional(j, "log_interval", c.log_interval, where);
  read_optional(j, "early_stop_rows", c.early_stop_rows, where);
}

void compute_gae(RolloutBuffer& b, double gamma, double lambda) {
  const std::size_t n = b.size();
  const std::size_t envs = static_cast<std::size_t>(b.num_envs);
  if (envs == 0 || n != envs * static_cast<std::size_t>(b.steps) || b.values.size() != n ||
      b.rewards.size() != n || b.dones.size() != n || b.last_values.size() != envs) {
    throw std::invalid_argument("compute_gae: inconsistent rollout buffer");
  }
  b.advantages.assign(n, 0.0);
  b.returns.assign(n, 0.0);
  for (std::size_t e = 0; e < envs; ++e) {
    double running = 0.0;
    for (std::size_t t = static_cast<std::size_t>(b.steps); t-- > 0;) {
      std::size_t i = t * envs + e;
      double next_value = t + 1 == static_cast<std::size_t>(b.steps) ? b.last_values[e] : b.values[i + envs];
      double nonterminal = b.dones[i] ? 0.0 : 1.0;
      double delta = b.rewards[i] + gamma * next_value * nonterminal - b.values[i];
      running = delta + gamma * lambda * nonterminal * running;
      b.advantages[i] = running;
      b.returns[i] = running + b.values[i];
    }
  }
}

std::vector<double> normalize_advantages(const std::vector<double>& adv) {
  if (adv.empty()) return {};
  double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(adv.size());
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  double sd = std::sqrt(var / static_cast<double>(adv.size()));
  std::vector<double> out(adv.size());
  for (std::size_t i = 0; i < adv.size(); ++i) out[i] = (adv[i] - mean) / (sd + 1e-8);
  return out;
}

VecFetchEnv::VecFetchEnv(int num_envs, std::uint64_t seed)
    : seed_(seed), envs_(static_cast<std::size_t>(num_envs)),
      episode_counter_(static_cast<std::size_t>(num_envs), 0) {
  for (std::size_t e = 0; e < envs_.size(); ++e) {
    obs_.push_back(envs_[e].reset(derive_seed(seed_, kTrainEnvStream + e, episode_counter_[e]++)));
  }
}

VecFetchEnv::Step VecFetchEnv::step(const std::vector<int>& actions) {
  if (actions.size() != envs_.size()) throw std::invalid_argument("VecFetchEnv::step: action count");
  Step out;
  out.rewards.resize(envs_.size());
  out.dones.resize(envs_.size());
  out.successes.resize(envs_.size());
  out.lengths.assign(envs_.size(), 0);
  for (std::size_t e = 0; e < envs_.size(); ++e) {
    StepResult r = envs_[e].step(static_cast<Action>(actions[e]));
    out.rewards[e] = r.reward;
    out.dones[e] = r.done;
    out.successes[e] = r.success;
    if (r.done) {
      out.lengths[e] = envs_[e].state().steps;
      obs_[e] = envs_[e].reset(derive_seed(seed_, kTrainEnvStream + e, episode_counter_[e]++));
    } else {
      obs_[e] = r.observation;
    }
  }
  return out;
}

RolloutBuffer collect_rollout(const PolicyValueNet& net, VecFetchEnv& envs, int steps, Rng& rng,
                              std::vector<VecFetchEnv::Step>* episode_events) {
  NoGradGuard no_grad;
  const int n = envs.size();
  const Index num_actions = net.num_actions();
  RolloutBuffer b;
  b.num_envs = n;
  b.steps = steps;
  const std::size_t total = static_cast<std::size_t>(n) * static_cast<std::size_t>(steps);
  b.observations.reserve(total);
  b.actions.reserve(total);
  b.log_probs.reserve(total);
  b.values.reserve(total);
  b.rewards.reserve(total);
  b.dones.reserve(total);
  for (int t = 0; t < steps; ++t) {
    PolicyOutput out = net.forward(stack(envs.observations()));
    std::vector<int> actions(static_cast<std::size_t>(n));
    for (int e = 0; e < n; ++e) {
      std::span<const double> probs = out.dist.probs.data().subspan(
          static_cast<std::size_t>(e * num_actions), static_cast<std::size_t>(num_actions));
      int a = sample_categorical(probs, rng);
      actions[static_cast<std::size_t>(e)] = a;
      b.observations.push_back(envs.observations()[static_cast<std::size_t>(e)]);
      b.actions.push_back(a);
      b.log_probs.push_back(out.dist.log_probs[e * num_actions + a]);
      b.values.push_back(out.value[e]);
    }
    VecFetchEnv::Step s = envs.step(actions);
    for (int e = 0; e < n; ++e) {
      b.rewards.push_back(s.rewards[static_cast<std::size_t>(e)]);
      b.dones.push_back(s.dones[static_cast<std::size_t>(e)]);
    }
    if (episode_events) episode_events->push_back(std::move(s));
  }
  PolicyOutput last = net.forward(stack(envs.observations()));
  b.last_values.assign(last.value.data().begin(), last.value.data().end());
  return b;
}

PPOLossTerms ppo_loss(const PolicyOutput& out, const std::vector<int>& actions,
                      const std::vector<double>& old_log_probs, const std::vector<double>& advantages,
                      const std::vector<double>& returns, const PPOConfig& config) {
  const Index batch = out.logits.dim(0);
  const auto nb = static_cast<std::size_t>(batch);
  if (actions.size() != nb || old_log_probs.size() != nb || advantages.size() != nb ||
      returns.size() != nb) {
    throw std::invalid_argument("ppo_loss: batch size mismatch");
  }
  std::vector<Index> idx(actions.begin(), actions.end());
  Tensor new_log_probs = gather(out.dist.log_probs, 1, idx);
  Tensor old = Tensor::from_vector({batch}, old_log_probs);
  Tensor adv = Tensor::from_vector({batch}, advantages);
  Tensor ratio = exp(new_log_probs - old);
  Tensor surr1 = ratio * adv;
  Tensor surr2 = clamp(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range) * adv;
  PPOLossTerms t;
  t.policy_loss = neg(mean(minimum(surr1, surr2)));
  t.value_loss = mean(square(out.value - Tensor::from_vector({batch}, returns)));
  t.entropy = neg(sum(out.dist.probs * out.dist.log_probs)) * (1.0 / static_cast<double>(batch));
  t.total = t.policy_loss + config.value_coef * t.value_loss - config.entropy_coef * t.entropy;
  double kl = 0.0, clipped = 0.0;
  for (Index i = 0; i < batch; ++i) {
    double log_ratio = new_log_probs[i] - old[i];
    kl += (std::exp(log_ratio) - 1.0) - log_ratio;
    if (std::abs(ratio[i] - 1.0) > config.clip_range) clipped += 1.0;
  }
  t.approx_kl = kl / static_cast<double>(batch);
  t.clip_fraction = clipped / static_cast<double>(batch);
  return t;
}

PPOStats ppo_update(PolicyValueNet& net, Optimizer& optimizer, const RolloutBuffer& buffer,
                    const PPOConfig& config, Rng& rng) {
  if (!buffer.has_advantages()) throw std::invalid_argument("ppo_update: run compute_gae first");
  const std::size_t n = buffer.size();
  const std::size_t mb = n / static_cast<std::size_t>(config.minibatches);
  std::vector<std::size_t> order(n);
  PPOStats stats;
  int updates = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
      std::swap(order[i], order[j]);
    }
    for (int m = 0; m < config.minibatches; ++m) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(m * mb),
                                   order.begin() + static_cast<std::ptrdiff_t>((m + 1) * mb));
      std::vector<int> actions;
      std::vector<double> old_lp, adv, ret;
      for (std::size_t i : idx) {
        actions.push_back(buffer.actions[i]);
        old_lp.push_back(buffer.log_probs[i]);
        adv.push_back(buffer.advantages[i]);
        ret.push_back(buffer.returns[i]);
      }
      PolicyOutput out = net.forward(gather_rows(buffer.observations, idx));
      PPOLossTerms t = ppo_loss(out, actions, old_lp, normalize_advantages(adv), ret, config);
      if (!std::isfinite(t.total.item())) {
        throw NumericError("ppo_update: non-finite loss (policy " + std::to_string(t.policy_loss.item()) +
                           ", value " + std::to_string(t.value_loss.item()) + ")");
      }
      std::vector<Tensor> grads = grad(t.total, net.parameters());
      optimizer.step(clip_global_norm(grads, config.max_grad_norm));
      stats.policy_loss += t.policy_loss.item();
      stats.value_loss += t.value_loss.item();
      stats.entropy += t.entropy.item();
      stats.approx_kl += t.approx_kl;
      stats.clip_fraction += t.clip_fraction;
      ++updates;
    }
  }
  double k = 1.0 / updates;
  stats.policy_loss *= k;
  stats.value_loss *= k;
  stats.entropy *= k;
  stats.approx_kl *= k;
  stats.clip_fraction *= k;
  return stats;
}

PPOResult train_ppo(PolicyValueNet& net, const PPOConfig& config, std::uint64_t seed,
                    const std::function<void(const PPOLogRow&)>& on_row) {
  config.validate();
  OptimizerConfig opt;
  opt.kind = OptimizerKind::kAdam;
  opt.learning_rate = config.learning_rate;
  opt.epsilon = config.adam_epsilon;
  Optimizer optimizer(net.parameters(), opt);
  VecFetchEnv envs(config.num_envs, seed);
  Rng rng(derive_seed(seed, 0x5a4d));

  PPOResult result;
  std::deque<double> recent_returns, recent_success;
  int perfect_rows = 0;
  long long rollout = 0;
  while (result.steps < config.total_steps) {
    std::vector<VecFetchEnv::Step> events;
    RolloutBuffer buffer = collect_rollout(net, envs, config.steps_per_rollout, rng, &events);
    result.steps += config.batch_size();
    for (const auto& s : events) {
      for (std::size_t e = 0; e < s.dones.size(); ++e) {
        if (!s.dones[e]) continue;
        recent_returns.push_back(s.rewards[e]);
        recent_success.push_back(s.successes[e] ? 1.0 : 0.0);
        if (recent_returns.size() > 100) {
          recent_returns.pop_front();
          recent_success.pop_front();
        }
      }
    }
    compute_gae(buffer, config.gamma, config.gae_lambda);
    PPOStats stats = ppo_update(net, optimizer, buffer, config, rng);
    ++rollout;
    if (rollout % config.log_interval == 0 || result.steps >= config.total_steps) {
      PPOLogRow row;
      row.step = result.steps;
      if (!recent_returns.empty()) {
        double k = 1.0 / static_cast<double>(recent_returns.size());
        row.mean_return = std::accumulate(recent_returns.begin(), recent_returns.end(), 0.0) * k;
        row.success_rate = std::accumulate(recent_success.begin(), recent_success.end(), 0.0) * k;
      }
      row.policy_loss = stats.policy_loss;
      row.value_loss = stats.value_loss;
      row.entropy = stats.entropy;
      result.log.push_back(row);
      if (on_row) on_row(row);
      bool perfect = recent_success.size() >= 100 && row.success_rate >= 1.0;
      perfect_rows = perfect ? perfect_rows + 1 : 0;
      if (config.early_stop_rows > 0 && perfect_rows >= config.early_stop_rows) break;
    }
  }
  return result;
}

std::string ppo_log_csv(const std::vector<PPOLogRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "step,mean_return,success_rate,policy_loss,value_loss,entropy\n";
  for (const PPOLogRow& r : rows) {
    os << r.step << ',' << r.mean_return << ',' << r.success_rate << ',' << r.policy_loss << ','
       << r.value_loss << ',' << r.entropy << '\n';
  }
  return os.str();
}

EvalResult evaluate_policy(const Policy& policy, const EvalOptions& options) {
  if (options.episodes < 1) throw std::invalid_argument("evaluate_policy: episodes must be >= 1");
  NoGradGuard no_grad;
  const Index num_actions = policy.num_actions();
  EvalResult result;
  result.episodes = options.episodes;
  result.returns.assign(static_cast<std::size_t>(options.episodes), 0.0);
  double successes = 0.0, lengths = 0.0;
  Rng hook_rng(derive_seed(options.seed, kEvalActionStream, 0xffff'ffffULL));
  const int group = std::max(1, options.parallel);
  for (int first = 0; first < options.episodes; first += group) {
    const int count = std::min(group, options.episodes - first);
    std::vector<FetchEnv> envs(static_cast<std::size_t>(count));
    std::vector<Rng> action_rngs;
    std::vector<Tensor> obs(static_cast<std::size_t>(count));
    std::vector<int> active;
    for (int k = 0; k < count; ++k) {
      auto episode = static_cast<std::uint64_t>(first + k);
      obs[static_cast<std::size_t>(k)] = envs[static_cast<std::size_t>(k)].reset(
          derive_seed(options.seed, kEvalStream, episode));
      action_rngs.emplace_back(derive_seed(options.seed, kEvalActionStream, episode));
      active.push_back(k);
    }
    while (!active.empty()) {
      std::vector<Tensor> batch;
      for (int k : active) batch.push_back(obs[static_cast<std::size_t>(k)]);
      Tensor x = stack(batch);
      if (options.hook) x = options.hook(x, hook_rng).detach();
      PolicyOutput out = policy.forward(x);
      std::vector<Index> greedy = argmax_dim(out.logits, 1);
      std::vector<int> still;
      for (std::size_t r = 0; r < active.size(); ++r) {
        const int k = active[r];
        const auto ks = static_cast<std::size_t>(k);
        int a;
        if (options.deterministic) {
          a = static_cast<int>(greedy[r]);
        } else {
          a = sample_categorical(out.dist.probs.data().subspan(r * static_cast<std::size_t>(num_actions),
                                                               static_cast<std::size_t>(num_actions)),
                                 action_rngs[ks]);
        }
        StepResult s = envs[ks].step(static_cast<Action>(a));
        result.returns[static_cast<std::size_t>(first + k)] += s.reward;
        if (s.done) {
          successes += s.success ? 1.0 : 0.0;
          lengths += envs[ks].state().steps;
        } else {
          obs[ks] = s.observation;
          still.push_back(k);
        }
      }
      active.swap(still);
    }
  }
  const double n = options.episodes;
  result.success_rate = successes / n;
  result.mean_length = lengths / n;
  result.mean_return = std::accumulate(result.returns.begin(), result.returns.end(), 0.0) / n;
  double var = 0.0;
  for (double r : result.returns) var += (r - result.mean_return) * (r - result.mean_return);
  result.std_return = std::sqrt(var / n);
  return result;
}

}  // namespace digr

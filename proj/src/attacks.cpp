#include "digr/attacks.hpp"

#include "digr/ops.hpp"
#include "digr/ppo.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace digr {

namespace {

constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)

Array sign(const Array& a) { return (a > 0.0).cast<double>() - (a < 0.0).cast<double>(); }

std::vector<Index> greedy(const Policy& policy, const Tensor& obs) {
  NoGradGuard ng;
  return argmax_dim(policy.forward(obs).logits, 1);
}

Tensor input_grad(const Tensor& x0, const std::function<Tensor(const Tensor&)>& objective) {
  Tensor x = x0.detach();
  x.set_requires_grad(true);
  GradModeGuard record(true);
  return grad(objective(x), {x})[0];
}

Tensor random_start(const Tensor& obs, double eps, Rng& rng) {
  Array a = obs.array();
  for (Index i = 0; i < a.size(); ++i) a[i] += eps * (2.0 * uniform01(rng) - 1.0);
  return project(Tensor(obs.shape(), std::move(a)), obs, eps);
}

// KL(p || pi(x)) summed over rows, with p constant.
Tensor mad_objective(const Policy& policy, const Tensor& x, const Tensor& p) {
  Tensor logq = clamp(policy.forward(x).dist.log_probs, kLogFloor, 0.0);
  Tensor logp(p.shape(), p.array().max(1e-12).log());
  return sum(p * (logp - logq));
}

void check_batch(const Tensor& obs, const char* who) {
  if (obs.rank() != 4) throw ShapeError(std::string(who) + ": expected [B, C, H, W], got " + to_string(obs.shape()));
}

}  // namespace

std::string to_string(AttackKind a) {
  switch (a) {
    case AttackKind::kFgsm:
      return "fgsm";
    case AttackKind::kPgd:
      return "pgd";
    case AttackKind::kMiFgsm:
      return "mi_fgsm";
    case AttackKind::kMad:
      return "mad";
  }
  return "unknown";
}

AttackKind attack_kind_from_string(const std::string& name) {
  for (AttackKind a : all_attacks()) {
    if (to_string(a) == name) return a;
  }
  throw std::invalid_argument("unknown attack '" + name + "'");
}

const std::vector<AttackKind>& all_attacks() {
  static const std::vector<AttackKind> kinds = {AttackKind::kFgsm, AttackKind::kPgd, AttackKind::kMiFgsm,
                                                AttackKind::kMad};
  return kinds;
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("attack: epsilon must be >= 0");
  if (step_size < 0.0) throw std::invalid_argument("attack: step_size must be >= 0");
  if (iterations < 1) throw std::invalid_argument("attack: iterations must be >= 1");
  if (momentum < 0.0 || momentum > 1.0) throw std::invalid_argument("attack: momentum must be in [0, 1]");
}

Tensor project(const Tensor& x, const Tensor& obs, double epsilon) {
  if (x.shape() != obs.shape()) throw ShapeError("project: shape mismatch");
  Array lo = (obs.array() - epsilon).max(0.0);
  Array hi = (obs.array() + epsilon).min(1.0);
  return Tensor(x.shape(), x.array().max(lo).min(hi));
}

Tensor attack_loss(const Policy& policy, const Tensor& x, const std::vector<Index>& target) {
  return neg(sum(gather(policy.forward(x).dist.log_probs, 1, target)));
}

Tensor fgsm(const Policy& policy, const Tensor& obs, double epsilon) {
  check_batch(obs, "fgsm");
  if (epsilon < 0.0) throw std::invalid_argument("fgsm: epsilon must be >= 0");
  if (epsilon == 0.0) return obs.detach();
  std::vector<Index> target = greedy(policy, obs);
  Tensor g = input_grad(obs, [&](const Tensor& x) { return attack_loss(policy, x, target); });
  return project(Tensor(obs.shape(), obs.array() + epsilon * sign(g.array())), obs, epsilon);
}

Tensor pgd(const Policy& policy, const Tensor& obs, const AttackConfig& config, Rng& rng) {
  check_batch(obs, "pgd");
  config.validate();
  if (config.epsilon == 0.0) return obs.detach();
  std::vector<Index> target = greedy(policy, obs);
  Tensor x = config.random_start ? random_start(obs, config.epsilon, rng) : obs.detach();
  const double eta = config.effective_step();
  for (int k = 0; k < config.iterations; ++k) {
    Tensor g = input_grad(x, [&](const Tensor& v) { return attack_loss(policy, v, target); });
    x = project(Tensor(obs.shape(), x.array() + eta * sign(g.array())), obs, config.epsilon);
  }
  return x;
}

Tensor mi_fgsm(const Policy& policy, const Tensor& obs, const AttackConfig& config) {
  check_batch(obs, "mi_fgsm");
  config.validate();
  if (config.epsilon == 0.0) return obs.detach();
  std::vector<Index> target = greedy(policy, obs);
  const double eta = config.effective_step();
  const Index b = obs.dim(0), per = obs.numel() / b;
  Array momentum = Array::Zero(obs.numel());
  Tensor x = obs.detach();
  for (int k = 0; k < config.iterations; ++k) {
    Tensor g = input_grad(x, [&](const Tensor& v) { return attack_loss(policy, v, target); });
    for (Index i = 0; i < b; ++i) {
      auto gi = g.array().segment(i * per, per);
      double l1 = gi.abs().sum();
      momentum.segment(i * per, per) *= config.momentum;
      if (l1 > 0.0) momentum.segment(i * per, per) += gi / l1;
    }
    x = project(Tensor(obs.shape(), x.array() + eta * sign(momentum)), obs, config.epsilon);
  }
  return x;
}

Tensor mad(const Policy& policy, const Tensor& obs, const AttackConfig& config, Rng& rng,
           std::vector<double>* trace) {
  check_batch(obs, "mad");
  config.validate();
  Tensor p;
  {
    NoGradGuard ng;
    p = policy.forward(obs).dist.probs.detach();
  }
  if (config.epsilon == 0.0) {
    if (trace) trace->assign(static_cast<std::size_t>(config.iterations), 0.0);
    return obs.detach();
  }
  Tensor x = config.random_start ? random_start(obs, config.epsilon, rng) : obs.detach();
  const double eta = config.effective_step();
  for (int k = 0; k < config.iterations; ++k) {
    Tensor g = input_grad(x, [&](const Tensor& v) { return mad_objective(policy, v, p); });
    x = project(Tensor(obs.shape(), x.array() + eta * sign(g.array())), obs, config.epsilon);
    if (trace) {
      NoGradGuard ng;
      trace->push_back(mad_objective(policy, x, p).item());
    }
  }
  return x;
}

Tensor run_attack(AttackKind kind, const Policy& policy, const Tensor& obs, const AttackConfig& config, Rng& rng) {
  switch (kind) {
    case AttackKind::kFgsm:
      return fgsm(policy, obs, config.epsilon);
    case AttackKind::kPgd:
      return pgd(policy, obs, config, rng);
    case AttackKind::kMiFgsm:
      return mi_fgsm(policy, obs, config);
    case AttackKind::kMad:
      return mad(policy, obs, config, rng);
  }
  throw std::invalid_argument("run_attack: unknown attack");
}

std::vector<RobustnessRow> evaluate_robustness(const Policy& policy, const std::string& policy_id,
                                               const RobustnessOptions& options) {
  if (options.runs < 1) throw std::invalid_argument("evaluate_robustness: runs must be >= 1");
  std::vector<RobustnessRow> rows;
  for (AttackKind kind : options.attacks) {
    for (double eps : options.epsilons) {
      AttackConfig cfg = options.base;
      cfg.epsilon = eps;
      cfg.validate();
      EvalOptions eo;
      eo.episodes = options.runs;
      eo.seed = options.seed;
      eo.deterministic = true;
      eo.hook = [&policy, kind, cfg](const Tensor& obs, Rng& rng) { return run_attack(kind, policy, obs, cfg, rng); };
      EvalResult r = evaluate_policy(policy, eo);
      RobustnessRow row;
      row.policy_id = policy_id;
      row.attack = kind;
      row.epsilon = eps;
      row.mean_return = r.mean_return;
      row.std_return = r.std_return;
      row.mean_success = r.success_rate;
      row.runs = r.episodes;
      rows.push_back(row);
    }
  }
  return rows;
}

std::string robustness_csv(const std::vector<RobustnessRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "policy_id,attack,epsilon,mean_return,std,mean_success,runs\n";
  for (const RobustnessRow& r : rows) {
    os << r.policy_id << ',' << to_string(r.attack) << ',' << r.epsilon << ',' << r.mean_return << ','
       << r.std_return << ',' << r.mean_success << ',' << r.runs << '\n';
  }
  return os.str();
}

}  // namespace digr

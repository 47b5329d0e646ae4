#include "gradcheck.hpp"

#include "digr/ops.hpp"
#include "digr/ppo.hpp"

#include <doctest.h>

#include <cmath>

using namespace digr;
using namespace digr::testing;

namespace {

RolloutBuffer single_env_buffer(std::vector<double> rewards, std::vector<double> values, std::vector<bool> dones,
                                double last_value) {
  RolloutBuffer b;
  b.num_envs = 1;
  b.steps = static_cast<int>(rewards.size());
  b.rewards = std::move(rewards);
  b.values = std::move(values);
  b.dones = std::move(dones);
  b.last_values = {last_value};
  b.actions.assign(b.rewards.size(), 0);
  return b;
}

PolicyOutput output_from_logits(const Tensor& logits, Index batch) {
  PolicyOutput out;
  out.logits = logits;
  out.dist.probs = softmax(logits);
  out.dist.log_probs = log_softmax(logits);
  out.value = Tensor::zeros({batch});
  return out;
}

Architecture small_fetch_arch() {
  Architecture a = Architecture::fetch_default();
  a.convs = {{4, 8, 8, 0}, {4, 3, 1, 1}, {4, 3, 1, 1}};
  a.hidden = 16;
  return a;
}

}  // namespace

TEST_SUITE("trivial") {
  TEST_CASE("terminal single step advantage is r - V(s)") {
    RolloutBuffer b = single_env_buffer({1.0}, {0.3}, {true}, 5.0);
    compute_gae(b, 0.99, 0.95);
    CHECK(b.advantages[0] == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(b.returns[0] == doctest::Approx(1.0).epsilon(1e-15));
  }

  TEST_CASE("lambda 0 gives the one-step TD error") {
    RolloutBuffer b = single_env_buffer({0.0, 0.5, 1.0}, {0.2, 0.4, 0.6}, {false, false, false}, 0.8);
    compute_gae(b, 0.9, 0.0);
    CHECK(b.advantages[0] == doctest::Approx(0.0 + 0.9 * 0.4 - 0.2));
    CHECK(b.advantages[1] == doctest::Approx(0.5 + 0.9 * 0.6 - 0.4));
    CHECK(b.advantages[2] == doctest::Approx(1.0 + 0.9 * 0.8 - 0.6));
  }

  TEST_CASE("ratio above the clip range uses the clipped surrogate") {
    Tensor logits = Tensor::from_vector({1, 4}, {0.3, -0.2, 0.1, 0.0});
    PolicyOutput out = output_from_logits(logits, 1);
    const double new_lp = out.dist.log_probs[2];
    PPOConfig cfg;
    cfg.clip_range = 0.2;
    PPOLossTerms t = ppo_loss(out, {2}, {new_lp - std::log(1.5)}, {2.0}, {0.0}, cfg);
    CHECK(t.policy_loss.item() == doctest::Approx(-1.2 * 2.0).epsilon(1e-12));
    CHECK(t.clip_fraction == 1.0);
  }

  TEST_CASE("identical old and new policy gives ratio one") {
    Tensor logits = Tensor::from_vector({2, 4}, {0.3, -0.2, 0.1, 0.0, 1, 2, 3, 4});
    PolicyOutput out = output_from_logits(logits, 2);
    std::vector<double> old = {out.dist.log_probs[1], out.dist.log_probs[4 + 3]};
    PPOLossTerms t = ppo_loss(out, {1, 3}, old, {0.5, -1.5}, {0.0, 0.0}, PPOConfig{});
    CHECK(t.policy_loss.item() == doctest::Approx(-(0.5 - 1.5) / 2).epsilon(1e-12));
    CHECK(t.clip_fraction == 0.0);
    CHECK(t.approx_kl == doctest::Approx(0.0).epsilon(1e-15));
  }

  TEST_CASE("entropy of the uniform distribution is ln 4") {
    PolicyOutput out = output_from_logits(Tensor::zeros({3, 4}), 3);
    PPOLossTerms t = ppo_loss(out, {0, 1, 2}, {0, 0, 0}, {0, 0, 0}, {0, 0, 0}, PPOConfig{});
    CHECK(t.entropy.item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  }

  TEST_CASE("advantage normalization gives zero mean and unit spread") {
    std::vector<double> n = normalize_advantages({1, 2, 3, 4, 10});
    double mean = 0, sq = 0;
    for (double v : n) mean += v;
    mean /= 5;
    for (double v : n) sq += (v - mean) * (v - mean);
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(std::sqrt(sq / 5) == doctest::Approx(1.0).epsilon(1e-6));
  }

  TEST_CASE("rollouts with the same seed are identical") {
    PolicyValueNet net(small_fetch_arch(), 3);
    auto run = [&] {
      VecFetchEnv envs(4, 17);
      Rng rng(5);
      return collect_rollout(net, envs, 20, rng);
    };
    RolloutBuffer a = run(), b = run();
    CHECK(a.actions == b.actions);
    CHECK(a.log_probs == b.log_probs);
    CHECK(a.rewards == b.rewards);
    CHECK(a.dones == b.dones);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK((a.observations[i].array() - b.observations[i].array()).abs().maxCoeff() == 0.0);
    }
  }

  TEST_CASE("stored log-probabilities match a fresh forward pass") {
    PolicyValueNet net(small_fetch_arch(), 3);
    VecFetchEnv envs(3, 9);
    Rng rng(1);
    RolloutBuffer b = collect_rollout(net, envs, 10, rng);
    NoGradGuard ng;
    PolicyOutput out = net.forward(stack(b.observations));
    for (std::size_t i = 0; i < b.size(); ++i) {
      CHECK(std::abs(out.dist.log_probs[static_cast<Index>(i) * 4 + b.actions[i]] - b.log_probs[i]) < 1e-9);
      CHECK(std::abs(out.value[static_cast<Index>(i)] - b.values[i]) < 1e-9);
    }
  }

  TEST_CASE("deterministic evaluation is repeatable") {
    PolicyValueNet net(small_fetch_arch(), 3);
    EvalOptions o;
    o.episodes = 6;
    o.seed = 4;
    EvalResult a = evaluate_policy(net, o), b = evaluate_policy(net, o);
    CHECK(a.returns == b.returns);
    CHECK(a.mean_length == b.mean_length);
  }

  TEST_CASE("config rejects unknown keys and bad values") {
    nlohmann::json j = PPOConfig{};
    CHECK(j.get<PPOConfig>().learning_rate == 1e-3);
    j["learning_rte"] = 1.0;
    CHECK_THROWS(j.get<PPOConfig>());
    PPOConfig bad;
    bad.minibatches = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }
}

TEST_SUITE("derived") {
  TEST_CASE("advantages equal the direct sum of discounted TD errors") {
    const double gamma = 0.97, lambda = 0.9;
    std::vector<double> r = {0.0, 0.0, 1.0, 0.0, 0.5};
    std::vector<double> v = {0.1, 0.4, 0.8, 0.2, 0.3};
    std::vector<bool> d = {false, false, true, false, false};
    const double last = 0.6;
    RolloutBuffer b = single_env_buffer(r, v, d, last);
    compute_gae(b, gamma, lambda);
    auto next_v = [&](std::size_t t) { return t + 1 < r.size() ? v[t + 1] : last; };
    for (std::size_t t = 0; t < r.size(); ++t) {
      double expected = 0.0, w = 1.0;
      for (std::size_t k = t; k < r.size(); ++k) {
        double delta = r[k] + (d[k] ? 0.0 : gamma * next_v(k)) - v[k];
        expected += w * delta;
        if (d[k]) break;
        w *= gamma * lambda;
      }
      CHECK(b.advantages[t] == doctest::Approx(expected).epsilon(1e-14));
      CHECK(b.returns[t] == doctest::Approx(expected + v[t]).epsilon(1e-14));
    }
  }

  TEST_CASE("random-weight policy rarely succeeds") {
    PolicyValueNet net(Architecture::fetch_default(), 12);
    EvalOptions o;
    o.episodes = 100;
    o.seed = 2;
    CHECK(evaluate_policy(net, o).success_rate < 0.2);
  }

  TEST_CASE("surrogate gradient matches differences of the loss") {
    Rng rng(6);
    Tensor logits = uniform_tensor({5, 4}, rng);
    Tensor values = uniform_tensor({5}, rng);
    logits.set_requires_grad(true);
    values.set_requires_grad(true);
    std::vector<int> actions = {0, 3, 1, 2, 2};
    std::vector<double> old = {-1.2, -1.5, -1.0, -1.9, -1.3};
    std::vector<double> adv = {0.5, -0.3, 1.2, -0.8, 0.1};
    std::vector<double> ret = {1.0, 0.0, 0.5, 0.2, 0.9};
    ScalarFn f = [&](const std::vector<Tensor>& p) {
      PolicyOutput out = output_from_logits(p[0], 5);
      out.value = p[1];
      return ppo_loss(out, actions, old, adv, ret, PPOConfig{}).total;
    };
    CHECK(first_order_error(f, {logits, values}) < 1e-6);
  }
}

TEST_SUITE("pipeline") {
  TEST_CASE("short training runs are reproducible") {
    PPOConfig cfg;
    cfg.num_envs = 4;
    cfg.steps_per_rollout = 16;
    cfg.minibatches = 2;
    cfg.epochs = 2;
    cfg.total_steps = 128;
    auto run = [&] {
      PolicyValueNet net(small_fetch_arch(), 1);
      PPOResult r = train_ppo(net, cfg, 3);
      return std::make_pair(ppo_log_csv(r.log), net.parameters()[0].array().eval());
    };
    auto a = run(), b = run();
    CHECK(a.first == b.first);
    CHECK((a.second - b.second).abs().maxCoeff() == 0.0);
    CHECK(a.first.rfind("step,mean_return,success_rate,policy_loss,value_loss,entropy\n", 0) == 0);
  }
}

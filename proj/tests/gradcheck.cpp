#include "gradcheck.hpp"

#include "digr/digr.hpp"
#include "digr/saliency.hpp"

#include <algorithm>
#include <cmath>

namespace digr::testing {

namespace {

Tensor leaf(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

// Nonlinear reduction so that every primitive has nonzero second derivatives.
Tensor probe_loss(const Tensor& out, const Tensor& weights) {
  return sum(out * weights) + 0.5 * sum(square(out));
}

struct Case {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> op;
};

std::vector<Case> primitive_cases() {
  Rng rng(derive_seed(2024, 1));
  auto u = [&](const Shape& s) { return leaf(uniform_tensor(s, rng)); };
  auto sg = [&](const Shape& s) { return leaf(signed_tensor(s, rng)); };
  auto pos = [&](const Shape& s) { return leaf(uniform_tensor(s, rng, 0.5, 1.5)); };
  std::vector<Case> cases;
  auto add_case = [&](std::string name, std::vector<Tensor> in, std::function<Tensor(const std::vector<Tensor>&)> op) {
    cases.push_back({std::move(name), std::move(in), std::move(op)});
  };
  add_case("add", {u({3, 4}), u({3, 4})}, [](auto& v) { return add(v[0], v[1]); });
  add_case("add_broadcast", {u({3, 4}), u({1})}, [](auto& v) { return add(v[0], v[1]); });
  add_case("sub", {u({3, 4}), u({3, 4})}, [](auto& v) { return sub(v[0], v[1]); });
  add_case("mul", {u({3, 4}), u({3, 4})}, [](auto& v) { return mul(v[0], v[1]); });
  add_case("mul_broadcast", {u({3, 4}), u({1})}, [](auto& v) { return mul(v[0], v[1]); });
  add_case("div", {u({3, 4}), pos({3, 4})}, [](auto& v) { return div(v[0], v[1]); });
  add_case("neg", {u({5})}, [](auto& v) { return neg(v[0]); });
  add_case("scale", {u({5})}, [](auto& v) { return scale(v[0], -2.5); });
  add_case("add_scalar", {u({5})}, [](auto& v) { return add_scalar(v[0], 0.7); });
  add_case("square", {u({5})}, [](auto& v) { return square(v[0]); });
  add_case("relu", {sg({4, 5})}, [](auto& v) { return relu(v[0]); });
  add_case("tanh", {u({4, 5})}, [](auto& v) { return tanh(v[0]); });
  add_case("exp", {u({4, 5})}, [](auto& v) { return exp(v[0]); });
  add_case("log", {pos({4, 5})}, [](auto& v) { return log(v[0]); });
  add_case("abs", {sg({4, 5})}, [](auto& v) { return abs(v[0]); });
  add_case("clamp",
           {leaf(Tensor::from_vector({6}, {-0.9, -0.35, -0.1, 0.2, 0.45, 0.85}))},
           [](auto& v) { return clamp(v[0], -0.6, 0.6); });
  {
    Tensor a = u({3, 4});
    Tensor b = leaf(Tensor(a.shape(), a.array() + signed_tensor({3, 4}, rng).array()));
    add_case("minimum", {a, b}, [](auto& v) { return minimum(v[0], v[1]); });
  }
  add_case("matmul", {u({3, 4}), u({4, 2})}, [](auto& v) { return matmul(v[0], v[1]); });
  add_case("matmul_nt", {u({3, 4}), u({2, 4})}, [](auto& v) { return matmul_nt(v[0], v[1]); });
  add_case("matmul_tn", {u({4, 3}), u({4, 2})}, [](auto& v) { return matmul_tn(v[0], v[1]); });
  add_case("transpose", {u({3, 4})}, [](auto& v) { return transpose(v[0]); });
  add_case("conv2d_s1_p1", {u({2, 3, 6, 6}), u({4, 3, 3, 3})},
           [](auto& v) { return conv2d(v[0], v[1], {1, 1}); });
  add_case("conv2d_s2_p1", {u({2, 3, 7, 7}), u({4, 3, 3, 3})},
           [](auto& v) { return conv2d(v[0], v[1], {2, 1}); });
  add_case("conv2d_tile", {u({2, 3, 8, 8}), u({5, 3, 4, 4})},
           [](auto& v) { return conv2d(v[0], v[1], {4, 0}); });
  add_case("conv2d_input_grad", {u({2, 4, 3, 3}), u({4, 3, 3, 3})},
           [](auto& v) { return conv2d_input_grad(v[0], v[1], {2, 3, 6, 6}, {2, 1}); });
  add_case("conv2d_weight_grad", {u({2, 3, 6, 6}), u({2, 4, 3, 3})},
           [](auto& v) { return conv2d_weight_grad(v[0], v[1], {4, 3, 3, 3}, {2, 1}); });
  add_case("add_channel_bias", {u({2, 3, 2, 2}), u({3})}, [](auto& v) { return add_channel_bias(v[0], v[1]); });
  add_case("sum_to_channels", {u({2, 3, 2, 2})}, [](auto& v) { return sum_to_channels(v[0]); });
  add_case("sum", {u({3, 4})}, [](auto& v) { return sum(v[0]); });
  add_case("mean", {u({3, 4})}, [](auto& v) { return mean(v[0]); });
  add_case("sum_dim", {u({2, 3, 4})}, [](auto& v) { return sum_dim(v[0], 1); });
  add_case("expand_dim", {u({2, 4})}, [](auto& v) { return expand_dim(v[0], 1, 3); });
  add_case("max_dim", {leaf(Tensor::from_vector({2, 3}, {0.1, 0.9, -0.4, 0.7, -0.2, 0.3}))},
           [](auto& v) { return max_dim(v[0], 1); });
  add_case("max", {leaf(Tensor::from_vector({4}, {0.1, 0.9, -0.4, 0.7}))}, [](auto& v) { return max(v[0]); });
  add_case("gather", {u({3, 4})}, [](auto& v) { return gather(v[0], 1, {2, 0, 3}); });
  add_case("scatter", {u({3})}, [](auto& v) { return scatter(v[0], 1, {1, 3, 0}, {3, 4}); });
  add_case("reshape", {u({2, 6})}, [](auto& v) { return reshape(v[0], {3, 4}); });
  add_case("pad2d", {u({1, 2, 3, 3})}, [](auto& v) { return pad2d(v[0], 2); });
  add_case("crop2d", {u({1, 2, 5, 5})}, [](auto& v) { return crop2d(v[0], 1); });
  add_case("stack", {u({2, 3}), u({2, 3})}, [](auto& v) { return stack({v[0], v[1]}); });
  add_case("narrow", {u({4, 3})}, [](auto& v) { return narrow(v[0], 1, 2); });
  add_case("embed", {u({2, 3})}, [](auto& v) { return embed(v[0], 1, 4); });
  add_case("softmax", {u({3, 4})}, [](auto& v) { return softmax(v[0]); });
  add_case("log_softmax", {u({3, 4})}, [](auto& v) { return log_softmax(v[0]); });
  // Composite shaped like one network layer.
  add_case("conv_bias_relu", {u({1, 2, 5, 5}), u({3, 2, 3, 3}), u({3})}, [](auto& v) {
    return relu(add_channel_bias(conv2d(v[0], v[1], {1, 1}), v[2]));
  });
  return cases;
}

ScalarFn with_probe(const Case& c) {
  Rng rng(derive_seed(77, c.name.size()));
  Tensor out;
  {
    NoGradGuard ng;
    out = c.op(c.inputs);
  }
  Tensor weights = uniform_tensor(out.shape(), rng);
  auto op = c.op;
  return [op, weights](const std::vector<Tensor>& v) { return probe_loss(op(v), weights); };
}

std::vector<Index> sample_coords(Index n, Index max_coords, Rng& rng) {
  std::vector<Index> all(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  if (max_coords <= 0 || n <= max_coords) return all;
  for (Index i = 0; i < max_coords; ++i) {
    Index j = i + static_cast<Index>(uniform01(rng) * static_cast<double>(n - i));
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(std::min(j, n - 1))]);
  }
  all.resize(static_cast<std::size_t>(max_coords));
  std::sort(all.begin(), all.end());
  return all;
}

Array pick(const Array& a, const std::vector<Index>& coords) {
  Array out(static_cast<Index>(coords.size()));
  for (std::size_t i = 0; i < coords.size(); ++i) out[static_cast<Index>(i)] = a[coords[i]];
  return out;
}

Tensor softmax_output(PolicyOutput& out, const Tensor& logits) {
  out.logits = logits;
  out.dist.probs = softmax(logits);
  out.dist.log_probs = log_softmax(logits);
  return logits;
}

}  // namespace

double rel_error(const Array& a, const Array& b) {
  const double diff = (a - b).matrix().norm();
  const double scale = std::max({a.matrix().norm(), b.matrix().norm(), 1e-12});
  return diff / scale;
}

Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  Array a(numel(shape));
  for (Index i = 0; i < a.size(); ++i) a[i] = lo + (hi - lo) * uniform01(rng);
  return Tensor(shape, std::move(a));
}

Tensor signed_tensor(const Shape& shape, Rng& rng) {
  Array a(numel(shape));
  for (Index i = 0; i < a.size(); ++i) {
    double mag = 0.2 + 0.8 * uniform01(rng);
    a[i] = uniform01(rng) < 0.5 ? -mag : mag;
  }
  return Tensor(shape, std::move(a));
}

Array numeric_grad(const ScalarFn& f, std::vector<Tensor> inputs, std::size_t k, double h,
                   const std::vector<Index>& coords) {
  NoGradGuard ng;
  Tensor& x = inputs[k];
  std::vector<Index> idx = coords;
  if (idx.empty()) {
    for (Index i = 0; i < x.numel(); ++i) idx.push_back(i);
  }
  Array out(static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    double& v = x.mutable_array()[idx[j]];
    const double saved = v;
    v = saved + h;
    double fp = f(inputs).item();
    v = saved - h;
    double fm = f(inputs).item();
    v = saved;
    out[static_cast<Index>(j)] = (fp - fm) / (2 * h);
  }
  return out;
}

double first_order_error(const ScalarFn& f, const std::vector<Tensor>& inputs, double h) {
  std::vector<Tensor> g;
  {
    GradModeGuard record(true);
    g = grad(f(inputs), inputs);
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    worst = std::max(worst, rel_error(g[k].array(), numeric_grad(f, inputs, k, h)));
  }
  return worst;
}

double second_order_error(const ScalarFn& f, const std::vector<Tensor>& inputs, Rng& rng, double h) {
  std::vector<Tensor> directions;
  for (const Tensor& x : inputs) directions.push_back(uniform_tensor(x.shape(), rng));
  ScalarFn directional = [&f, &directions](const std::vector<Tensor>& v) {
    GradModeGuard record(true);
    std::vector<Tensor> g = grad(f(v), v, true);
    Tensor s = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < g.size(); ++i) s = s + sum(g[i] * directions[i]);
    return s;
  };
  std::vector<Tensor> hv;
  {
    GradModeGuard record(true);
    hv = grad(directional(inputs), inputs);
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    // Differences of the first-order directional derivative, one input at a time.
    Array numeric(inputs[k].numel());
    Tensor x = inputs[k];
    for (Index i = 0; i < x.numel(); ++i) {
      double& v = x.mutable_array()[i];
      const double saved = v;
      v = saved + h;
      double fp = directional(inputs).item();
      v = saved - h;
      double fm = directional(inputs).item();
      v = saved;
      numeric[i] = (fp - fm) / (2 * h);
    }
    worst = std::max(worst, rel_error(hv[k].array(), numeric));
  }
  return worst;
}

std::vector<GradCheckResult> primitive_first_order() {
  std::vector<GradCheckResult> out;
  for (const Case& c : primitive_cases()) out.push_back({c.name, first_order_error(with_probe(c), c.inputs)});
  return out;
}

std::vector<GradCheckResult> primitive_second_order() {
  std::vector<GradCheckResult> out;
  Rng rng(derive_seed(2024, 2));
  for (const Case& c : primitive_cases()) {
    out.push_back({c.name, second_order_error(with_probe(c), c.inputs, rng)});
  }
  return out;
}

Architecture tiny_architecture() {
  Architecture a;
  a.input_channels = 3;
  a.input_height = 16;
  a.input_width = 16;
  a.convs = {{4, 4, 4, 0}, {6, 3, 1, 1}, {6, 3, 1, 1}};
  a.hidden = 16;
  a.num_actions = 4;
  return a;
}

double network_first_order(const Architecture& arch, std::uint64_t seed, Index batch, Index max_coords) {
  PolicyValueNet net(arch, seed);
  Rng rng(derive_seed(seed, 3));
  Shape os = arch.observation_shape();
  Tensor obs = uniform_tensor({batch, os[0], os[1], os[2]}, rng, 0.0, 1.0);
  Tensor w = uniform_tensor({batch, arch.num_actions}, rng);
  ScalarFn f = [&net, obs, w](const std::vector<Tensor>&) {
    PolicyOutput out = net.forward(obs);
    return sum(out.dist.log_probs * w) + 0.5 * sum(square(out.value));
  };
  const std::vector<Tensor>& params = net.parameters();
  std::vector<Tensor> g;
  {
    GradModeGuard record(true);
    g = grad(f(params), params);
  }
  std::vector<double> a_all, n_all;
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::vector<Index> coords = sample_coords(params[k].numel(), max_coords, rng);
    Array a = pick(g[k].array(), coords);
    // The per-state max and |.| have kinks within 1e-5 of some head weights.
    Array n = numeric_grad(f, params, k, 1e-6, coords);
    a_all.insert(a_all.end(), a.begin(), a.end());
    n_all.insert(n_all.end(), n.begin(), n.end());
  }
  return rel_error(Eigen::Map<Array>(a_all.data(), static_cast<Index>(a_all.size())),
                   Eigen::Map<Array>(n_all.data(), static_cast<Index>(n_all.size())));
}

MlpPolicy::MlpPolicy(Index inputs, Index hidden, Index actions, std::uint64_t seed) : actions_(actions) {
  Rng rng(seed);
  params_ = {leaf(uniform_tensor({inputs, hidden}, rng, -0.5, 0.5)), leaf(uniform_tensor({hidden}, rng, -0.1, 0.1)),
             leaf(uniform_tensor({hidden, actions}, rng, -0.5, 0.5)),
             leaf(uniform_tensor({actions}, rng, -0.1, 0.1))};
}

PolicyOutput MlpPolicy::forward(const Tensor& obs, ForwardMode) const {
  Tensor flat = reshape(obs, {obs.dim(0), obs.numel() / obs.dim(0)});
  Tensor z = tanh(add_channel_bias(matmul(flat, params_[0]), params_[1]));
  PolicyOutput out;
  softmax_output(out, add_channel_bias(matmul(z, params_[2]), params_[3]));
  return out;
}

PolicyOutput LinearPolicy::forward(const Tensor& obs, ForwardMode) const {
  Tensor flat = reshape(obs, {obs.dim(0), obs.numel() / obs.dim(0)});
  PolicyOutput out;
  softmax_output(out, add_channel_bias(matmul(flat, w_), b_));
  return out;
}

double toy_double_backprop(std::uint64_t seed) {
  MlpPolicy policy(3 * 4 * 4, 8, 4, seed);
  Rng rng(derive_seed(seed, 5));
  Tensor obs = uniform_tensor({2, 3, 4, 4}, rng, 0.0, 1.0);
  Tensor weights = uniform_tensor({2, 4, 4}, rng, 0.0, 1.0);
  ScalarFn f = [&policy, obs, weights](const std::vector<Tensor>&) {
    return mean(vanilla_gradient_raw(policy, obs, grad_mode_enabled()) * weights);
  };
  std::vector<Tensor>& params = policy.parameters();
  std::vector<Tensor> g;
  {
    GradModeGuard record(true);
    g = grad(f(params), params);
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    worst = std::max(worst, rel_error(g[k].array(), numeric_grad(f, params, k)));
  }
  return worst;
}

double conv_double_backprop(std::uint64_t seed, Index max_coords) {
  Architecture arch = tiny_architecture();
  PolicyValueNet net(arch, seed);
  Rng rng(derive_seed(seed, 6));
  Tensor obs = uniform_tensor({3, 3, 16, 16}, rng, 0.0, 1.0);
  Tensor teacher = uniform_tensor({3, 16, 16}, rng, 0.0, 1.0);
  ScalarFn f = [&net, obs, teacher](const std::vector<Tensor>&) {
    GradModeGuard record(grad_mode_enabled());
    return regularization_loss(net, obs, teacher, 0.5, false);
  };
  const std::vector<Tensor>& params = net.parameters();
  std::vector<Tensor> g;
  {
    GradModeGuard record(true);
    g = grad(f(params), params);
  }
  std::vector<double> a_all, n_all;
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::vector<Index> coords = sample_coords(params[k].numel(), max_coords, rng);
    Array a = pick(g[k].array(), coords);
    // The per-state max and |.| have kinks within 1e-5 of some head weights.
    Array n = numeric_grad(f, params, k, 1e-6, coords);
    a_all.insert(a_all.end(), a.begin(), a.end());
    n_all.insert(n_all.end(), n.begin(), n.end());
  }
  return rel_error(Eigen::Map<Array>(a_all.data(), static_cast<Index>(a_all.size())),
                   Eigen::Map<Array>(n_all.data(), static_cast<Index>(n_all.size())));
}

}  // namespace digr::testing

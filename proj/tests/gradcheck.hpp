#pragma once

#include "digr/ops.hpp"
#include "digr/policy_net.hpp"
#include "digr/random.hpp"

#include <functional>
#include <string>
#include <vector>

namespace digr::testing {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  std::string name;
  double rel_error = 0.0;
};

/// ||a - b|| / max(||a||, ||b||, 1e-12).
double rel_error(const Array& a, const Array& b);

Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0);
/// Uniform magnitudes in [0.2, 1] with random sign: keeps kinks out of reach.
Tensor signed_tensor(const Shape& shape, Rng& rng);

/// Central finite differences of f with respect to every entry of inputs[k]
/// (or `coords` of them when given).
Array numeric_grad(const ScalarFn& f, std::vector<Tensor> inputs, std::size_t k, double h = 1e-5,
                   const std::vector<Index>& coords = {});

/// Largest relative error over the inputs between reverse-mode and central
/// differences.
double first_order_error(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-5);

/// Differentiates s = sum_i <grad_i f, v_i> a second time through the
/// recorded first-order graph and compares with differences of s.
double second_order_error(const ScalarFn& f, const std::vector<Tensor>& inputs, Rng& rng, double h = 1e-5);

/// One check per differentiable primitive.
std::vector<GradCheckResult> primitive_first_order();
std::vector<GradCheckResult> primitive_second_order();

/// Small conv net with the production layer pattern.
Architecture tiny_architecture();

/// First-order check of a PolicyValueNet loss against differences on every
/// parameter (at most `max_coords` per tensor, chosen with a fixed seed).
double network_first_order(const Architecture& arch, std::uint64_t seed, Index batch, Index max_coords);

/// Parameter gradient of the mean input-gradient saliency of a 2-layer tanh
/// policy, against differences of the recomputed saliency.
double toy_double_backprop(std::uint64_t seed);

/// The same double-backprop check through the regularization loss of a
/// small ReLU conv net.
double conv_double_backprop(std::uint64_t seed, Index max_coords);

/// logits = tanh(x W1 + b1) W2 + b2 on flattened observations.
class MlpPolicy : public Policy {
 public:
  MlpPolicy(Index inputs, Index hidden, Index actions, std::uint64_t seed);
  PolicyOutput forward(const Tensor& obs, ForwardMode mode = ForwardMode::kStandard) const override;
  Index num_actions() const override { return actions_; }
  std::vector<Tensor>& parameters() { return params_; }

 private:
  Index actions_;
  std::vector<Tensor> params_;
};

/// logits = flatten(x) W + b.
class LinearPolicy : public Policy {
 public:
  LinearPolicy(Tensor weight, Tensor bias) : w_(std::move(weight)), b_(std::move(bias)) {}
  PolicyOutput forward(const Tensor& obs, ForwardMode mode = ForwardMode::kStandard) const override;
  Index num_actions() const override { return w_.dim(1); }

 private:
  Tensor w_, b_;
};

}  // namespace digr::testing

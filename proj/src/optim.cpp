#include "digr/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace digr {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kSgd:
      return "sgd";
    case OptimizerKind::kAdam:
      return "adam";
    case OptimizerKind::kRmsProp:
      return "rmsprop";
  }
  return "unknown";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "rmsprop") return OptimizerKind::kRmsProp;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

Optimizer::Optimizer(std::vector<Tensor> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
  for (const Tensor& p : params_) {
    if (p.has_history()) throw std::invalid_argument("optimizer: parameters must be leaves");
    state_.first_moment.push_back(Array::Zero(p.numel()));
    state_.second_moment.push_back(Array::Zero(p.numel()));
  }
}

void Optimizer::step(const std::vector<Tensor>& grads) {
  if (grads.size() != params_.size()) {
    throw std::invalid_argument("optimizer: expected " + std::to_string(params_.size()) +
                                " gradients, got " + std::to_string(grads.size()));
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].numel() != params_[i].numel()) {
      throw ShapeError("optimizer: gradient " + std::to_string(i) + " has shape " +
                       to_string(grads[i].shape()) + ", parameter has " +
                       to_string(params_[i].shape()));
    }
    if (!grads[i].array().allFinite()) {
      throw NumericError("optimizer: non-finite gradient for parameter " + std::to_string(i));
    }
  }
  ++state_.step_count;
  const double lr = config_.learning_rate;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Array& p = params_[i].mutable_array();
    const Array& g = grads[i].array();
    switch (config_.kind) {
      case OptimizerKind::kSgd:
        p -= lr * g;
        break;
      case OptimizerKind::kAdam: {
        Array& m = state_.first_moment[i];
        Array& v = state_.second_moment[i];
        m = config_.beta1 * m + (1.0 - config_.beta1) * g;
        v = config_.beta2 * v + (1.0 - config_.beta2) * g.square();
        const double t = static_cast<double>(state_.step_count);
        const double bc1 = 1.0 - std::pow(config_.beta1, t);
        const double bc2 = 1.0 - std::pow(config_.beta2, t);
        p -= lr * (m / bc1) / ((v / bc2).sqrt() + config_.epsilon);
        break;
      }
      case OptimizerKind::kRmsProp: {
        Array& v = state_.second_moment[i];
        v = config_.rms_decay * v + (1.0 - config_.rms_decay) * g.square();
        p -= lr * g / (v.sqrt() + config_.epsilon);
        break;
      }
    }
  }
}

double global_norm(const std::vector<Tensor>& grads) {
  double total = 0.0;
  for (const Tensor& g : grads) total += g.array().square().sum();
  return std::sqrt(total);
}

std::vector<Tensor> clip_global_norm(const std::vector<Tensor>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_global_norm: max_norm must be > 0");
  const double norm = global_norm(grads);
  if (norm <= max_norm) return grads;
  const double factor = max_norm / norm;
  std::vector<Tensor> out;
  out.reserve(grads.size());
  for (const Tensor& g : grads) out.emplace_back(g.shape(), g.array() * factor);
  return out;
}

}  // namespace digr

#pragma once

#include "digr/tensor.hpp"

#include <string>
#include <vector>

namespace digr {

enum class OptimizerKind { kSgd, kAdam, kRmsProp };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double rms_decay = 0.99;
};

/// Moment accumulators for one optimizer, shaped like the parameters.
struct OptimizerState {
  std::vector<Array> first_moment;
  std::vector<Array> second_moment;
  long long step_count = 0;
};

/// Updates leaf parameter tensors in place.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerConfig config);

  /// Applies one update. Throws NumericError, leaving parameters untouched,
  /// if any gradient is non-finite.
  void step(const std::vector<Tensor>& grads);

  const OptimizerConfig& config() const { return config_; }
  OptimizerConfig& config() { return config_; }
  const OptimizerState& state() const { return state_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  OptimizerConfig config_;
  OptimizerState state_;
};

double global_norm(const std::vector<Tensor>& grads);

/// Scales all gradients by max_norm / norm when their joint L2 norm exceeds
/// max_norm; otherwise returns them unchanged.
std::vector<Tensor> clip_global_norm(const std::vector<Tensor>& grads, double max_norm);

}  // namespace digr

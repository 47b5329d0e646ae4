#pragma once

#include "digr/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace digr {

struct ConvLayerSpec {
  Index out_channels = 16;
  Index kernel = 3;
  Index stride = 2;
  Index padding = 1;
  bool operator==(const ConvLayerSpec&) const = default;
};

/// Shape of a conv-stack actor-critic network.
struct Architecture {
  Index input_channels = 3;
  Index input_height = 64;
  Index input_width = 64;
  std::vector<ConvLayerSpec> convs;
  Index hidden = 128;
  Index num_actions = 4;

  /// Default network for the 64x64 fetch task.
  static Architecture fetch_default(Index num_actions = 4);

  /// [C, H, W] of the last conv activation.
  Shape last_conv_shape() const;
  Shape observation_shape() const { return {input_channels, input_height, input_width}; }
  bool operator==(const Architecture&) const = default;
};

void to_json(nlohmann::json& j, const Architecture& a);
void from_json(const nlohmann::json& j, Architecture& a);

enum class ForwardMode {
  kStandard,
  /// ReLU backward passes gradient only where input and gradient are positive.
  kGuidedBackprop,
};

struct ActionDistribution {
  Tensor probs;      // [B, A]
  Tensor log_probs;  // [B, A]
};

struct PolicyOutput {
  Tensor logits;  // [B, A]
  ActionDistribution dist;
  Tensor value;      // [B]; undefined for policies without a critic
  Tensor last_conv;  // [B, C, h, w]; undefined for policies without convs
};

/// A differentiable categorical policy over batched observations [B, C, H, W].
class Policy {
 public:
  virtual ~Policy() = default;
  virtual PolicyOutput forward(const Tensor& obs, ForwardMode mode = ForwardMode::kStandard) const = 0;
  virtual Index num_actions() const = 0;
};

/// Free-form training metadata stored alongside the parameters.
struct CheckpointMetadata {
  std::string algorithm;
  std::uint64_t seed = 0;
  long long step_count = 0;
  std::string env_id;
  nlohmann::json provenance = nlohmann::json::object();
};

/// Three conv layers, a hidden linear layer, and policy/value heads, with
/// ReLU between layers.
class PolicyValueNet : public Policy {
 public:
  PolicyValueNet(Architecture arch, std::uint64_t seed);

  PolicyOutput forward(const Tensor& obs, ForwardMode mode = ForwardMode::kStandard) const override;
  Index num_actions() const override { return arch_.num_actions; }

  const Architecture& architecture() const { return arch_; }
  /// Leaf tensors in a fixed order; mutating them changes the network.
  const std::vector<Tensor>& parameters() const { return params_; }
  std::vector<std::string> parameter_names() const;
  Index parameter_count() const;

  /// Deep copy with independent parameters.
  PolicyValueNet clone() const;
  /// Copies parameter values from another network of the same architecture.
  void copy_parameters_from(const PolicyValueNet& other);

  /// Sets the policy-head weights and bias to zero (uniform action distribution).
  void zero_policy_head();

 private:
  PolicyValueNet() = default;
  friend PolicyValueNet load_checkpoint(const std::string&, CheckpointMetadata*);

  Architecture arch_;
  std::vector<Tensor> params_;
};

// Checkpoint layout: "DGC1" | JSON metadata line | tensor blobs in parameter order.
inline constexpr char kCheckpointMagic[] = "DGC1";
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const PolicyValueNet& net, const CheckpointMetadata& meta,
                     const std::string& path);
PolicyValueNet load_checkpoint(const std::string& path, CheckpointMetadata* meta = nullptr);
/// As load_checkpoint, but fails with kArchitectureMismatch when the stored
/// action count differs from `expected_actions`.
PolicyValueNet load_checkpoint_for(const std::string& path, Index expected_actions,
                                   CheckpointMetadata* meta = nullptr);

/// Adds a leading batch axis to a [C, H, W] observation.
Tensor as_batch(const Tensor& obs);

}  // namespace digr

#pragma once

#include "digr/gridworld.hpp"
#include "digr/optim.hpp"
#include "digr/policy_net.hpp"
#include "digr/random.hpp"
#include "digr/saliency.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace digr {

/// Offline pairs of observations and teacher perturbation maps.
struct PerturbationDataset {
  std::vector<Tensor> observations;  // [3, H, W]
  std::vector<Tensor> maps;          // [H, W], normalized
  PerturbationSpec spec;
  std::string teacher_hash;
  std::uint64_t seed = 0;

  std::size_t size() const { return observations.size(); }
};

inline constexpr char kDatasetMagic[] = "DGD1";
inline constexpr int kDatasetVersion = 1;

struct DatasetBuildOptions {
  std::size_t count = 1000;
  PerturbationSpec spec;
  std::uint64_t seed = 0;
  /// Teacher-visited states collected before subsampling, as a multiple of count.
  int pool_factor = 10;
  int num_envs = 16;
};

/// Rolls out the teacher with sampled actions, subsamples `count` visited
/// states uniformly and scores each with gb_perturbation.
PerturbationDataset build_dataset(const PolicyValueNet& teacher, const std::string& teacher_hash,
                                  const DatasetBuildOptions& options,
                                  const std::function<void(std::size_t done, std::size_t total)>& progress = {});

/// Teacher-visited states (sampled actions), `count` drawn uniformly without
/// replacement from a pool of count * pool_factor.
std::vector<GridState> sample_teacher_states(const PolicyValueNet& teacher, std::size_t count,
                                             int pool_factor, int num_envs, std::uint64_t seed);

void save_dataset(const PerturbationDataset& dataset, const std::string& path);
/// Validates magic, version, counts and shapes; throws FormatError.
PerturbationDataset load_dataset(const std::string& path);

/// FIFO ring of visited states with uniform sampling.
class StateReplayBuffer {
 public:
  explicit StateReplayBuffer(std::size_t capacity);
  void push(const GridState& state);
  std::size_t size() const { return states_.size(); }
  std::size_t capacity() const { return capacity_; }
  /// Uniform draws with replacement, rendered to a batch [n, 3, H, W].
  Tensor sample(std::size_t n, Rng& rng) const;
  const GridState& at(std::size_t i) const { return states_[i]; }

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<GridState> states_;
};

/// Per-state scale of the student map inside the penalty.
enum class MapNormalizer { kMax, kMean };

std::string to_string(MapNormalizer n);
MapNormalizer map_normalizer_from_string(const std::string& name);

struct DIGRConfig {
  double saliency_threshold = 0.1;
  double alpha = 0.01;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  int reg_batch = 32;
  int distill_batch = 32;
  long long total_updates = 20000;
  bool pcgrad = true;
  double max_grad_norm = 0.5;
  std::size_t buffer_capacity = 10000;
  int act_envs = 4;
  int warmup_steps = 256;
  /// Hold the per-state map maximum constant when differentiating. With it
  /// held, shrinking every input gradient zeroes the penalty and the student
  /// collapses to a constant policy within a few hundred updates.
  bool detach_normalizer = false;
  MapNormalizer normalizer = MapNormalizer::kMax;
  /// Updates trained on the distillation term alone before the penalty starts.
  long long reg_warmup_updates = 4000;
  /// false trains with the distillation term alone (ablation).
  bool use_regularization = true;
  int log_interval = 100;
  int eval_interval = 2000;
  int eval_episodes = 100;
  std::size_t dataset_size = 1000;

  void validate() const;
};

void to_json(nlohmann::json& j, const DIGRConfig& c);
void from_json(const nlohmann::json& j, DIGRConfig& c);

/// Student vanilla-gradient maps [B, H, W], divided by their per-state maximum
/// (held constant when `detach_normalizer`). Differentiable w.r.t. parameters.
Tensor student_saliency(const Policy& student, const Tensor& obs, bool detach_normalizer,
                        MapNormalizer normalizer = MapNormalizer::kMax);

/// mean_b (1/N) sum_i 1[teacher_i <= threshold] * M_g_i.
Tensor regularization_loss(const Policy& student, const Tensor& obs, const Tensor& teacher_maps,
                           double threshold, bool detach_normalizer = false,
                           MapNormalizer normalizer = MapNormalizer::kMax);

/// mean_b KL(pi_t(s_b) || pi_theta(s_b)); teacher constant, student floored at 1e-12.
Tensor distillation_loss(const Policy& teacher, const Policy& student, const Tensor& obs);

/// Gradient surgery for two task gradients.
Eigen::VectorXd pcgrad_combine(const Eigen::VectorXd& g_reg, const Eigen::VectorXd& g_dist);

Eigen::VectorXd flatten(const std::vector<Tensor>& tensors);
std::vector<Tensor> unflatten(const Eigen::VectorXd& flat, const std::vector<Tensor>& like);

struct DIGRLogRow {
  long long update = 0;
  double reg_loss = 0.0;
  double distill_kl = 0.0;
  /// Deterministic success rate; NaN on rows without an evaluation.
  double success_rate = 0.0;
};

struct DIGRResult {
  std::vector<DIGRLogRow> log;
};

DIGRResult train_digr(const PolicyValueNet& teacher, PolicyValueNet& student,
                      const PerturbationDataset& dataset, const DIGRConfig& config, std::uint64_t seed,
                      const std::function<void(const DIGRLogRow&)>& on_row = {});

std::string digr_log_csv(const std::vector<DIGRLogRow>& rows);

}  // namespace digr

#pragma once

#include "digr/gridworld.hpp"
#include "digr/saliency.hpp"

#include <functional>
#include <string>
#include <vector>

namespace digr {

/// Pixel labels for one state: important = agent and target cell blocks,
/// unimportant = empty interior cells; walls and distractors are neither.
struct SaliencyMasks {
  std::vector<bool> important;    // H * W
  std::vector<bool> unimportant;  // H * W
};

SaliencyMasks label_masks(const GridState& state);

/// Teacher-visited states for scoring (sampled actions, uniform subsample).
std::vector<GridState> build_labeled_dataset(const PolicyValueNet& teacher, std::size_t n, std::uint64_t seed);

/// Mann-Whitney AUC with half credit for ties.
double pooled_auc(std::vector<double> positives, std::vector<double> negatives);

/// Accumulates per-state sums and pooled scores across maps.
class SaliencyScorer {
 public:
  void add(const Tensor& map, const SaliencyMasks& masks);
  std::size_t states() const { return states_; }
  double mean_important() const;
  double mean_unimportant() const;
  double auc() const;

 private:
  std::size_t states_ = 0;
  double important_total_ = 0.0;
  double unimportant_total_ = 0.0;
  std::vector<double> positives_;
  std::vector<double> negatives_;
};

struct SaliencyMetrics {
  std::string label;
  std::size_t states = 0;
  double important_sum = 0.0;
  double unimportant_sum = 0.0;
  double auc = 0.5;
  double mean_seconds = 0.0;
};

/// Generates `method`'s map for every state and scores it against the masks.
SaliencyMetrics score_method(SaliencyMethod method, const Policy& policy, const std::vector<GridState>& states,
                             const SaliencyOptions& options = {},
                             const std::function<void(std::size_t, std::size_t)>& progress = {});

std::string metrics_csv(const std::vector<SaliencyMetrics>& rows);

struct TimingRow {
  std::string label;
  SaliencyMethod method = SaliencyMethod::kVanillaGradient;
  double mean_seconds = 0.0;
  double std_seconds = 0.0;
  std::size_t samples = 0;
};

/// Wall time per map for each method over `repetitions` passes of `states`,
/// after one untimed warm-up map per method.
std::vector<TimingRow> timing_benchmark(const std::vector<SaliencyMethod>& methods, const Policy& policy,
                                        const std::vector<GridState>& states, int repetitions,
                                        const SaliencyOptions& options = {});

std::string timing_csv(const std::vector<TimingRow>& rows);

}  // namespace digr

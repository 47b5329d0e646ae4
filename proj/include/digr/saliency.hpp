#pragma once

#include "digr/policy_net.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace digr {

enum class SaliencyMethod {
  kVanillaGradient,
  kGuidedBackprop,
  kGradCam,
  kIntegratedGradients,
  kSmoothGrad,
  kGbPerturbation,
};

std::string to_string(SaliencyMethod m);
SaliencyMethod saliency_method_from_string(const std::string& name);
const std::vector<SaliencyMethod>& all_saliency_methods();

struct SaliencyMap {
  Tensor values;  // [H, W] in [0, 1]
  SaliencyMethod method = SaliencyMethod::kVanillaGradient;
  double seconds = 0.0;
  /// Maximum of the raw map before normalization.
  double raw_max = 0.0;
  bool all_zero = false;
  /// Method-specific extras (e.g. integrated-gradients completeness residual).
  nlohmann::json info = nlohmann::json::object();
};

/// Gaussian-blur perturbation settings. sigma <= 0 means radius / 2.
struct PerturbationSpec {
  int radius = 4;
  double sigma = 0.0;
  int stride = 1;
  /// Perturbed observations per batched forward.
  int batch = 256;

  double effective_sigma() const { return sigma > 0.0 ? sigma : radius / 2.0; }
  void validate() const;
};

void to_json(nlohmann::json& j, const PerturbationSpec& s);
void from_json(const nlohmann::json& j, PerturbationSpec& s);

struct SaliencyOptions {
  PerturbationSpec perturbation;
  int ig_steps = 50;
  double smooth_sigma = 0.15;
  int smooth_samples = 20;
  std::uint64_t seed = 0;
};

/// Divides by the maximum; an all-zero map passes through. Throws on
/// negative entries.
Tensor normalize_map(const Tensor& raw);

/// Sum over the channel axis of |g|: [B, C, H, W] -> [B, H, W]. Differentiable.
Tensor channel_abs_sum(const Tensor& g);

/// Unnormalized vanilla-gradient maps [B, H, W] for a batch [B, C, H, W]:
/// |sum_a pi(a|s) d pi(a|s) / ds|. With
/// `create_graph` the maps stay differentiable w.r.t. the parameters.
Tensor vanilla_gradient_raw(const Policy& policy, const Tensor& obs, bool create_graph = false);

/// Full-image separable Gaussian blur of [C, H, W] (or [B, C, H, W]) with a
/// (2r+1)-tap kernel, renormalized at the borders.
Tensor gaussian_blur(const Tensor& obs, int radius, double sigma);

/// Gaussian mask exp(-d^2 / 2 sigma^2) centred on pixel (cy, cx): [H, W].
Tensor gaussian_mask(Index height, Index width, Index cy, Index cx, double sigma);

/// s * (1 - mask) + blurred * mask for one [C, H, W] observation.
Tensor perturb(const Tensor& obs, const Tensor& blurred, const Tensor& mask);

/// KL(p || q) with both arguments floored at 1e-12.
double kl_divergence(std::span<const double> p, std::span<const double> q);

SaliencyMap vanilla_gradient(const Policy& policy, const Tensor& obs);
SaliencyMap guided_backprop(const Policy& policy, const Tensor& obs);
SaliencyMap grad_cam(const Policy& policy, const Tensor& obs);
/// Baseline defaults to the all-zero observation.
SaliencyMap integrated_gradients(const Policy& policy, const Tensor& obs, int steps = 50,
                                 const Tensor& baseline = Tensor());
SaliencyMap smooth_grad(const Policy& policy, const Tensor& obs, double sigma = 0.15, int samples = 20,
                        std::uint64_t seed = 0);
SaliencyMap gb_perturbation(const Policy& policy, const Tensor& obs, const PerturbationSpec& spec);

/// Dispatches on `method`; obs is one [C, H, W] observation.
SaliencyMap compute_saliency(SaliencyMethod method, const Policy& policy, const Tensor& obs,
                             const SaliencyOptions& options = {});

enum class Colormap { kJet, kHot, kGray };
std::string to_string(Colormap c);
Colormap colormap_from_string(const std::string& name);
/// RGB in [0, 1] for a value in [0, 1].
std::array<double, 3> colormap_rgb(Colormap c, double v);

/// Writes `<stem>.png` (overlay on the observation), `<stem>.dgt` (raw map)
/// and `<stem>.json` (sidecar).
void export_saliency(const SaliencyMap& map, const Tensor& obs, const std::string& stem,
                     Colormap colormap = Colormap::kJet, int scale = 4, double alpha = 0.6);

/// 8-bit RGB PNG; rgb holds height * width * 3 bytes.
void write_png(const std::string& path, int width, int height, const std::vector<std::uint8_t>& rgb);

}  // namespace digr

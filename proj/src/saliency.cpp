#include "digr/saliency.hpp"

#include "digr/json_util.hpp"
#include "digr/ops.hpp"
#include "digr/random.hpp"
#include "digr/serialize.hpp"

#include <png.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

namespace digr {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void check_observation(const Tensor& obs, const char* who) {
  if (!obs.defined() || obs.rank() != 3) {
    throw ShapeError(std::string(who) + ": expected one [C, H, W] observation, got " +
                     (obs.defined() ? to_string(obs.shape()) : std::string("undefined")));
  }
}

SaliencyMap finish(Tensor raw, SaliencyMethod method, Clock::time_point t0) {
  SaliencyMap m;
  m.method = method;
  m.raw_max = raw.numel() ? raw.array().maxCoeff() : 0.0;
  m.all_zero = m.raw_max <= 0.0;
  m.values = normalize_map(raw);
  m.seconds = seconds_since(t0);
  return m;
}

// F = sum_b pi(a_b | s_b) for the given action per row.
Tensor chosen_probability(const Tensor& probs, const std::vector<Index>& actions) {
  return sum(gather(probs, 1, actions));
}

Tensor single_map(const Tensor& batch_maps) {
  return reshape(batch_maps, {batch_maps.dim(1), batch_maps.dim(2)});
}

// Guided-backprop raw maps [B, H, W] for a batch, each w.r.t. its own greedy action.
Tensor guided_raw(const Policy& policy, const Tensor& batch) {
  Tensor x = batch.detach();
  x.set_requires_grad(true);
  GradModeGuard record(true);
  PolicyOutput out = policy.forward(x, ForwardMode::kGuidedBackprop);
  Tensor f = chosen_probability(out.dist.probs, argmax_dim(out.logits, 1));
  Tensor g = grad(f, {x})[0];
  return channel_abs_sum(g).detach();
}

}  // namespace

std::string to_string(SaliencyMethod m) {
  switch (m) {
    case SaliencyMethod::kVanillaGradient:
      return "vanilla_gradient";
    case SaliencyMethod::kGuidedBackprop:
      return "guided_backprop";
    case SaliencyMethod::kGradCam:
      return "grad_cam";
    case SaliencyMethod::kIntegratedGradients:
      return "integrated_gradients";
    case SaliencyMethod::kSmoothGrad:
      return "smooth_grad";
    case SaliencyMethod::kGbPerturbation:
      return "gb_perturbation";
  }
  return "unknown";
}

SaliencyMethod saliency_method_from_string(const std::string& name) {
  for (SaliencyMethod m : all_saliency_methods()) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown saliency method '" + name + "'");
}

const std::vector<SaliencyMethod>& all_saliency_methods() {
  static const std::vector<SaliencyMethod> methods = {
      SaliencyMethod::kVanillaGradient,     SaliencyMethod::kGuidedBackprop,
      SaliencyMethod::kGradCam,             SaliencyMethod::kIntegratedGradients,
      SaliencyMethod::kSmoothGrad,          SaliencyMethod::kGbPerturbation};
  return methods;
}

void PerturbationSpec::validate() const {
  if (radius < 1) throw std::invalid_argument("perturbation: radius must be >= 1");
  if (stride < 1) throw std::invalid_argument("perturbation: stride must be >= 1");
  if (batch < 1) throw std::invalid_argument("perturbation: batch must be >= 1");
  if (!std::isfinite(sigma)) throw std::invalid_argument("perturbation: sigma must be finite");
}

void to_json(nlohmann::json& j, const PerturbationSpec& s) {
  j = {{"radius", s.radius}, {"sigma", s.effective_sigma()}, {"stride", s.stride}, {"batch", s.batch}};
}

void from_json(const nlohmann::json& j, PerturbationSpec& s) {
  const std::string where = "perturbation";
  reject_unknown_keys(j, {"radius", "sigma", "stride", "batch"}, where);
  read_optional(j, "radius", s.radius, where);
  read_optional(j, "sigma", s.sigma, where);
  read_optional(j, "stride", s.stride, where);
  read_optional(j, "batch", s.batch, where);
}

Tensor normalize_map(const Tensor& raw) {
  if (raw.numel() == 0) return raw.detach();
  if (raw.array().minCoeff() < 0.0) throw std::invalid_argument("normalize_map: negative saliency value");
  double m = raw.array().maxCoeff();
  if (m <= 0.0) return raw.detach();
  return Tensor(raw.shape(), raw.array() / m);
}

Tensor channel_abs_sum(const Tensor& g) {
  if (g.rank() != 4) throw ShapeError("channel_abs_sum: expected [B, C, H, W], got " + to_string(g.shape()));
  return sum_dim(abs(g), 1);
}

Tensor vanilla_gradient_raw(const Policy& policy, const Tensor& obs, bool create_graph) {
  if (obs.rank() != 4) throw ShapeError("vanilla_gradient_raw: expected [B, C, H, W], got " + to_string(obs.shape()));
  Tensor x = obs.detach();
  x.set_requires_grad(true);
  GradModeGuard record(true);
  PolicyOutput out = policy.forward(x);
  // d/ds of sum_a pi_a^2 / 2 is sum_a pi_a d pi_a / ds, and unlike a detached
  // weight it keeps the weights' dependence on the parameters.
  Tensor score = 0.5 * sum(out.dist.probs * out.dist.probs);
  Tensor g = grad(score, {x}, create_graph)[0];
  Tensor maps = channel_abs_sum(g);
  return create_graph ? maps : maps.detach();
}

Tensor gaussian_blur(const Tensor& obs, int radius, double sigma) {
  if (radius < 1 || !(sigma > 0.0)) throw std::invalid_argument("gaussian_blur: radius >= 1 and sigma > 0");
  if (obs.rank() < 2) throw ShapeError("gaussian_blur: need at least two axes");
  const Index h = obs.dim(obs.rank() - 2), w = obs.dim(obs.rank() - 1);
  const Index planes = obs.numel() / (h * w);
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  for (int d = -radius; d <= radius; ++d) k[static_cast<std::size_t>(d + radius)] = std::exp(-d * d / (2 * sigma * sigma));
  const Array& in = obs.array();
  Array tmp(in.size()), out(in.size());
  for (Index p = 0; p < planes; ++p) {
    const Index base = p * h * w;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        double acc = 0.0, norm = 0.0;
        for (int d = -radius; d <= radius; ++d) {
          Index xx = x + d;
          if (xx < 0 || xx >= w) continue;
          double kw = k[static_cast<std::size_t>(d + radius)];
          acc += kw * in[base + y * w + xx];
          norm += kw;
        }
        tmp[base + y * w + x] = acc / norm;
      }
    }
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        double acc = 0.0, norm = 0.0;
        for (int d = -radius; d <= radius; ++d) {
          Index yy = y + d;
          if (yy < 0 || yy >= h) continue;
          double kw = k[static_cast<std::size_t>(d + radius)];
          acc += kw * tmp[base + yy * w + x];
          norm += kw;
        }
        out[base + y * w + x] = acc / norm;
      }
    }
  }
  return Tensor(obs.shape(), std::move(out));
}

Tensor gaussian_mask(Index height, Index width, Index cy, Index cx, double sigma) {
  Array m(height * width);
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      double d2 = static_cast<double>((y - cy) * (y - cy) + (x - cx) * (x - cx));
      m[y * width + x] = std::exp(-d2 / (2 * sigma * sigma));
    }
  }
  return Tensor({height, width}, std::move(m));
}

Tensor perturb(const Tensor& obs, const Tensor& blurred, const Tensor& mask) {
  check_observation(obs, "perturb");
  if (blurred.shape() != obs.shape()) throw ShapeError("perturb: blurred shape mismatch");
  const Index c = obs.dim(0), hw = obs.dim(1) * obs.dim(2);
  if (mask.numel() != hw) throw ShapeError("perturb: mask shape mismatch");
  Array out(obs.numel());
  for (Index ch = 0; ch < c; ++ch) {
    out.segment(ch * hw, hw) = obs.array().segment(ch * hw, hw) * (1.0 - mask.array()) +
                               blurred.array().segment(ch * hw, hw) * mask.array();
  }
  return Tensor(obs.shape(), std::move(out));
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  constexpr double kFloor = 1e-12;
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double pi = std::max(p[i], kFloor), qi = std::max(q[i], kFloor);
    kl += pi * (std::log(pi) - std::log(qi));
  }
  return std::max(kl, 0.0);
}

SaliencyMap vanilla_gradient(const Policy& policy, const Tensor& obs) {
  check_observation(obs, "vanilla_gradient");
  auto t0 = Clock::now();
  return finish(single_map(vanilla_gradient_raw(policy, as_batch(obs))), SaliencyMethod::kVanillaGradient, t0);
}

SaliencyMap guided_backprop(const Policy& policy, const Tensor& obs) {
  check_observation(obs, "guided_backprop");
  auto t0 = Clock::now();
  return finish(single_map(guided_raw(policy, as_batch(obs))), SaliencyMethod::kGuidedBackprop, t0);
}

SaliencyMap grad_cam(const Policy& policy, const Tensor& obs) {
  check_observation(obs, "grad_cam");
  auto t0 = Clock::now();
  GradModeGuard record(true);
  Tensor x = as_batch(obs).detach();
  x.set_requires_grad(true);
  PolicyOutput out = policy.forward(x);
  if (!out.last_conv.defined()) throw std::invalid_argument("grad_cam: policy exposes no conv activations");
  Tensor f = chosen_probability(out.dist.probs, argmax_dim(out.logits, 1));
  Tensor g = grad(f, {out.last_conv})[0];
  const Index c = g.dim(1), h = g.dim(2), w = g.dim(3);
  const Array& ga = g.array();
  const Array& act = out.last_conv.array();
  Array cam = Array::Zero(h * w);
  for (Index ch = 0; ch < c; ++ch) {
    double weight = ga.segment(ch * h * w, h * w).mean();
    cam += weight * act.segment(ch * h * w, h * w);
  }
  cam = cam.max(0.0);
  Tensor up = resize_bilinear(Tensor({1, h, w}, std::move(cam)), obs.dim(1), obs.dim(2));
  Array clipped = up.array().max(0.0);
  return finish(Tensor({obs.dim(1), obs.dim(2)}, std::move(clipped)), SaliencyMethod::kGradCam, t0);
}

SaliencyMap integrated_gradients(const Policy& policy, const Tensor& obs, int steps, const Tensor& baseline) {
  check_observation(obs, "integrated_gradients");
  if (steps < 1) throw std::invalid_argument("integrated_gradients: steps must be >= 1");
  auto t0 = Clock::now();
  Tensor base = baseline.defined() ? baseline : Tensor::zeros(obs.shape());
  if (base.shape() != obs.shape()) throw ShapeError("integrated_gradients: baseline shape mismatch");
  Index action;
  double f_obs, f_base;
  {
    NoGradGuard ng;
    PolicyOutput o = policy.forward(stack({obs, base}));
    action = argmax_dim(narrow(o.logits, 0, 1), 1)[0];
    f_obs = o.dist.probs[action];
    f_base = o.dist.probs[policy.num_actions() + action];
  }
  std::vector<Tensor> path;
  const Array diff = obs.array() - base.array();
  for (int k = 1; k <= steps; ++k) {
    path.push_back(Tensor(obs.shape(), base.array() + (static_cast<double>(k) / steps) * diff));
  }
  Tensor x = stack(path);
  x.set_requires_grad(true);
  GradModeGuard record(true);
  PolicyOutput out = policy.forward(x);
  Tensor f = chosen_probability(out.dist.probs, std::vector<Index>(static_cast<std::size_t>(steps), action));
  Tensor g = grad(f, {x})[0];
  const Index n = obs.numel();
  Array avg = Array::Zero(n);
  for (int k = 0; k < steps; ++k) avg += g.array().segment(k * n, n);
  Array ig = diff * avg / static_cast<double>(steps);
  Tensor attributions(Shape{1, obs.dim(0), obs.dim(1), obs.dim(2)}, ig);
  SaliencyMap m = finish(single_map(channel_abs_sum(attributions)), SaliencyMethod::kIntegratedGradients, t0);
  m.info["action"] = action;
  m.info["attribution_sum"] = ig.sum();
  m.info["output_difference"] = f_obs - f_base;
  m.info["completeness_residual"] = ig.sum() - (f_obs - f_base);
  return m;
}

SaliencyMap smooth_grad(const Policy& policy, const Tensor& obs, double sigma, int samples, std::uint64_t seed) {
  check_observation(obs, "smooth_grad");
  if (samples < 1) throw std::invalid_argument("smooth_grad: samples must be >= 1");
  if (sigma < 0.0) throw std::invalid_argument("smooth_grad: sigma must be >= 0");
  auto t0 = Clock::now();
  const double noise = sigma * (obs.array().maxCoeff() - obs.array().minCoeff());
  Rng rng(seed);
  std::vector<Tensor> copies;
  for (int k = 0; k < samples; ++k) {
    Array a = obs.array();
    if (noise > 0.0) {
      for (Index i = 0; i < a.size(); ++i) a[i] += noise * standard_normal(rng);
    }
    copies.push_back(Tensor(obs.shape(), std::move(a)));
  }
  Tensor maps = guided_raw(policy, stack(copies));
  const Index hw = obs.dim(1) * obs.dim(2);
  Array avg = Array::Zero(hw);
  for (int k = 0; k < samples; ++k) avg += maps.array().segment(k * hw, hw);
  avg /= static_cast<double>(samples);
  SaliencyMap m = finish(Tensor({obs.dim(1), obs.dim(2)}, std::move(avg)), SaliencyMethod::kSmoothGrad, t0);
  m.info["noise_std"] = noise;
  m.info["samples"] = samples;
  return m;
}

SaliencyMap gb_perturbation(const Policy& policy, const Tensor& obs, const PerturbationSpec& spec) {
  check_observation(obs, "gb_perturbation");
  spec.validate();
  auto t0 = Clock::now();
  NoGradGuard ng;
  const Index h = obs.dim(1), w = obs.dim(2);
  const double sigma = spec.effective_sigma();
  const Index num_actions = policy.num_actions();
  const auto na = static_cast<std::size_t>(num_actions);
  Tensor blurred = gaussian_blur(obs, spec.radius, sigma);
  PolicyOutput clean = policy.forward(as_batch(obs));
  std::vector<double> p(clean.dist.probs.data().begin(), clean.dist.probs.data().end());

  std::vector<std::pair<Index, Index>> centers;
  for (Index y = 0; y < h; y += spec.stride) {
    for (Index x = 0; x < w; x += spec.stride) centers.emplace_back(y, x);
  }
  const Index gh = (h + spec.stride - 1) / spec.stride, gw = (w + spec.stride - 1) / spec.stride;
  std::vector<double> grid(centers.size(), 0.0);
  std::size_t floored = 0;
  for (std::size_t start = 0; start < centers.size(); start += static_cast<std::size_t>(spec.batch)) {
    std::size_t end = std::min(centers.size(), start + static_cast<std::size_t>(spec.batch));
    std::vector<Tensor> batch;
    batch.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(perturb(obs, blurred, gaussian_mask(h, w, centers[i].first, centers[i].second, sigma)));
    }
    PolicyOutput out = policy.forward(stack(batch));
    for (std::size_t i = start; i < end; ++i) {
      std::span<const double> q = out.dist.probs.data().subspan((i - start) * na, na);
      for (double v : q) floored += v < 1e-12 ? 1 : 0;
      grid[i] = kl_divergence(p, q);
    }
  }
  Array raw(h * w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      Index gy = std::min(gh - 1, (y + spec.stride / 2) / spec.stride);
      Index gx = std::min(gw - 1, (x + spec.stride / 2) / spec.stride);
      raw[y * w + x] = grid[static_cast<std::size_t>(gy * gw + gx)];
    }
  }
  SaliencyMap m = finish(Tensor({h, w}, std::move(raw)), SaliencyMethod::kGbPerturbation, t0);
  m.info["radius"] = spec.radius;
  m.info["sigma"] = sigma;
  m.info["stride"] = spec.stride;
  m.info["floored_probabilities"] = floored;
  return m;
}

SaliencyMap compute_saliency(SaliencyMethod method, const Policy& policy, const Tensor& obs,
                             const SaliencyOptions& options) {
  switch (method) {
    case SaliencyMethod::kVanillaGradient:
      return vanilla_gradient(policy, obs);
    case SaliencyMethod::kGuidedBackprop:
      return guided_backprop(policy, obs);
    case SaliencyMethod::kGradCam:
      return grad_cam(policy, obs);
    case SaliencyMethod::kIntegratedGradients:
      return integrated_gradients(policy, obs, options.ig_steps);
    case SaliencyMethod::kSmoothGrad:
      return smooth_grad(policy, obs, options.smooth_sigma, options.smooth_samples, options.seed);
    case SaliencyMethod::kGbPerturbation:
      return gb_perturbation(policy, obs, options.perturbation);
  }
  throw std::invalid_argument("compute_saliency: unknown method");
}

std::string to_string(Colormap c) {
  switch (c) {
    case Colormap::kJet:
      return "jet";
    case Colormap::kHot:
      return "hot";
    case Colormap::kGray:
      return "gray";
  }
  return "unknown";
}

Colormap colormap_from_string(const std::string& name) {
  if (name == "jet") return Colormap::kJet;
  if (name == "hot") return Colormap::kHot;
  if (name == "gray") return Colormap::kGray;
  throw std::invalid_argument("unknown colormap '" + name + "'");
}

std::array<double, 3> colormap_rgb(Colormap c, double v) {
  v = std::clamp(v, 0.0, 1.0);
  switch (c) {
    case Colormap::kJet: {
      auto ramp = [](double t) { return std::clamp(1.5 - std::abs(4.0 * t), 0.0, 1.0); };
      return {ramp(v - 0.75), ramp(v - 0.5), ramp(v - 0.25)};
    }
    case Colormap::kHot:
      return {std::clamp(3.0 * v, 0.0, 1.0), std::clamp(3.0 * v - 1.0, 0.0, 1.0),
              std::clamp(3.0 * v - 2.0, 0.0, 1.0)};
    case Colormap::kGray:
      return {v, v, v};
  }
  return {v, v, v};
}

void write_png(const std::string& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3) {
    throw std::invalid_argument("write_png: buffer size mismatch");
  }
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("write_png: libpng failure writing " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

void export_saliency(const SaliencyMap& map, const Tensor& obs, const std::string& stem, Colormap colormap,
                     int scale, double alpha) {
  check_observation(obs, "export_saliency");
  const Index h = obs.dim(1), w = obs.dim(2);
  if (map.values.shape() != Shape{h, w}) throw ShapeError("export_saliency: map/observation size mismatch");
  if (scale < 1) throw std::invalid_argument("export_saliency: scale must be >= 1");
  const int W = static_cast<int>(w) * scale, H = static_cast<int>(h) * scale;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(W) * H * 3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      Index sy = y / scale, sx = x / scale;
      double v = map.values[sy * w + sx];
      auto c = colormap_rgb(colormap, v);
      for (int ch = 0; ch < 3; ++ch) {
        double o = obs[ch * h * w + sy * w + sx];
        double mixed = (1.0 - alpha) * o + alpha * c[static_cast<std::size_t>(ch)];
        rgb[(static_cast<std::size_t>(y) * W + x) * 3 + ch] =
            static_cast<std::uint8_t>(std::lround(std::clamp(mixed, 0.0, 1.0) * 255.0));
      }
    }
  }
  write_png(stem + ".png", W, H, rgb);
  save_tensor(stem + ".dgt", map.values);
  nlohmann::json side = {{"method", to_string(map.method)},
                         {"seconds", map.seconds},
                         {"normalization_max", map.raw_max},
                         {"all_zero", map.all_zero},
                         {"colormap", to_string(colormap)},
                         {"height", h},
                         {"width", w},
                         {"info", map.info}};
  write_file(stem + ".json", side.dump(2) + "\n");
}

}  // namespace digr

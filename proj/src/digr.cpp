#include "digr/digr.hpp"

#include "digr/json_util.hpp"
#include "digr/ops.hpp"
#include "digr/ppo.hpp"
#include "digr/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace digr {

namespace {

constexpr std::uint64_t kPoolStream = 0xd001;
constexpr std::uint64_t kPoolActionStream = 0xd002;
constexpr std::uint64_t kActStream = 0xd003;
constexpr std::uint64_t kBatchStream = 0xd004;

}  // namespace

std::vector<GridState> sample_teacher_states(const PolicyValueNet& teacher, std::size_t count,
                                             int pool_factor, int num_envs, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("sample_teacher_states: count must be >= 1");
  if (pool_factor < 1 || num_envs < 1) throw std::invalid_argument("sample_teacher_states: bad pool settings");
  NoGradGuard ng;
  const std::size_t pool_size = count * static_cast<std::size_t>(pool_factor);
  VecFetchEnv envs(num_envs, derive_seed(seed, kPoolStream));
  Rng rng(derive_seed(seed, kPoolActionStream));
  std::vector<GridState> pool;
  pool.reserve(pool_size);
  const Index na = teacher.num_actions();
  while (pool.size() < pool_size) {
    PolicyOutput out = teacher.forward(stack(envs.observations()));
    std::vector<int> actions(static_cast<std::size_t>(num_envs));
    for (int e = 0; e < num_envs; ++e) {
      if (pool.size() < pool_size) pool.push_back(envs.env(e).state());
      actions[static_cast<std::size_t>(e)] = sample_categorical(
          out.dist.probs.data().subspan(static_cast<std::size_t>(e * na), static_cast<std::size_t>(na)), rng);
    }
    envs.step(actions);
  }
  // Partial Fisher-Yates for a uniform subset, then restore visit order.
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng() % (idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  std::vector<GridState> out;
  out.reserve(count);
  for (std::size_t i : idx) out.push_back(pool[i]);
  return out;
}

PerturbationDataset build_dataset(const PolicyValueNet& teacher, const std::string& teacher_hash,
                                  const DatasetBuildOptions& options,
                                  const std::function<void(std::size_t, std::size_t)>& progress) {
  options.spec.validate();
  std::vector<GridState> states =
      sample_teacher_states(teacher, options.count, options.pool_factor, options.num_envs, options.seed);
  PerturbationDataset d;
  d.spec = options.spec;
  d.teacher_hash = teacher_hash;
  d.seed = options.seed;
  for (std::size_t i = 0; i < states.size(); ++i) {
    Tensor obs = render(states[i]);
    d.maps.push_back(gb_perturbation(teacher, obs, options.spec).values);
    d.observations.push_back(obs);
    if (progress) progress(i + 1, states.size());
  }
  return d;
}

void save_dataset(const PerturbationDataset& d, const std::string& path) {
  if (d.maps.size() != d.observations.size()) throw std::invalid_argument("save_dataset: count mismatch");
  nlohmann::json header = {{"version", kDatasetVersion},
                           {"count", d.size()},
                           {"spec", d.spec},
                           {"teacher_sha256", d.teacher_hash},
                           {"seed", d.seed}};
  std::ostringstream os;
  write_magic(os, kDatasetMagic);
  os << header.dump() << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    write_tensor(os, d.observations[i]);
    write_tensor(os, d.maps[i]);
  }
  write_file(path, os.str());
}

PerturbationDataset load_dataset(const std::string& path) {
  std::istringstream in(read_file(path));
  expect_magic(in, kDatasetMagic, "dataset");
  std::string line = read_header_line(in, "dataset");
  PerturbationDataset d;
  std::size_t count = 0;
  try {
    nlohmann::json header = nlohmann::json::parse(line);
    int version = header.at("version").get<int>();
    if (version != kDatasetVersion) {
      throw FormatError(FormatErrorKind::kVersionMismatch,
                        "dataset: version " + std::to_string(version) + " unsupported");
    }
    count = header.at("count").get<std::size_t>();
    d.spec = header.at("spec").get<PerturbationSpec>();
    d.teacher_hash = header.at("teacher_sha256").get<std::string>();
    d.seed = header.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kCorruptHeader, std::string("dataset: corrupt header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(FormatErrorKind::kCorruptHeader, std::string("dataset: corrupt header: ") + e.what());
  }
  for (std::size_t i = 0; i < count; ++i) {
    Tensor obs = read_tensor(in);
    Tensor map = read_tensor(in);
    if (obs.rank() != 3 || map.rank() != 2 || map.dim(0) != obs.dim(1) || map.dim(1) != obs.dim(2)) {
      throw FormatError(FormatErrorKind::kCorruptHeader, "dataset: entry " + std::to_string(i) + " has bad shapes");
    }
    if (map.numel() && (map.array().minCoeff() < 0.0 || map.array().maxCoeff() > 1.0)) {
      throw FormatError(FormatErrorKind::kCorruptHeader, "dataset: map " + std::to_string(i) + " outside [0, 1]");
    }
    d.observations.push_back(obs);
    d.maps.push_back(map);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(FormatErrorKind::kCorruptHeader, "dataset: trailing bytes after last entry");
  }
  return d;
}

StateReplayBuffer::StateReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("StateReplayBuffer: capacity must be >= 1");
  states_.reserve(capacity);
}

void StateReplayBuffer::push(const GridState& state) {
  if (states_.size() < capacity_) {
    states_.push_back(state);
  } else {
    states_[next_] = state;
  }
  next_ = (next_ + 1) % capacity_;
}

Tensor StateReplayBuffer::sample(std::size_t n, Rng& rng) const {
  if (states_.empty()) throw std::logic_error("StateReplayBuffer::sample on an empty buffer");
  std::vector<Tensor> parts;
  parts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) parts.push_back(render(states_[static_cast<std::size_t>(rng() % states_.size())]));
  return stack(parts);
}

void DIGRConfig::validate() const {
  auto check = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("digr config: ") + what);
  };
  check(saliency_threshold >= 0 && saliency_threshold <= 1, "saliency_threshold must be in [0, 1]");
  check(alpha > 0, "alpha must be > 0");
  check(learning_rate > 0, "learning_rate must be > 0");
  check(reg_batch > 0 && distill_batch > 0, "batch sizes must be > 0");
  check(total_updates > 0, "total_updates must be > 0");
  check(reg_warmup_updates >= 0, "reg_warmup_updates must be >= 0");
  check(max_grad_norm > 0, "max_grad_norm must be > 0");
  check(buffer_capacity > 0, "buffer_capacity must be > 0");
  check(act_envs > 0 && warmup_steps >= 1, "act_envs and warmup_steps must be >= 1");
  check(log_interval > 0 && eval_interval > 0 && eval_episodes > 0, "intervals must be > 0");
  check(dataset_size > 0, "dataset_size must be > 0");
}

void to_json(nlohmann::json& j, const DIGRConfig& c) {
  j = {{"saliency_threshold", c.saliency_threshold},
       {"alpha", c.alpha},
       {"learning_rate", c.learning_rate},
       {"optimizer", to_string(c.optimizer)},
       {"reg_batch", c.reg_batch},
       {"distill_batch", c.distill_batch},
       {"total_updates", c.total_updates},
       {"pcgrad", c.pcgrad},
       {"max_grad_norm", c.max_grad_norm},
       {"buffer_capacity", c.buffer_capacity},
       {"act_envs", c.act_envs},
       {"warmup_steps", c.warmup_steps},
       {"reg_warmup_updates", c.reg_warmup_updates},
       {"detach_normalizer", c.detach_normalizer},
       {"normalizer", to_string(c.normalizer)},
       {"use_regularization", c.use_regularization},
       {"log_interval", c.log_interval},
       {"eval_interval", c.eval_interval},
       {"eval_episodes", c.eval_episodes},
       {"dataset_size", c.dataset_size}};
}

void from_json(const nlohmann::json& j, DIGRConfig& c) {
  const std::string where = "digr";
  reject_unknown_keys(j,
                      {"saliency_threshold", "alpha", "learning_rate", "optimizer", "reg_batch",
                       "distill_batch", "total_updates", "pcgrad", "max_grad_norm", "buffer_capacity",
                       "act_envs", "warmup_steps", "reg_warmup_updates", "detach_normalizer", "normalizer", "use_regularization",
                       "log_interval", "eval_interval", "eval_episodes", "dataset_size"},
                      where);
  read_optional(j, "saliency_threshold", c.saliency_threshold, where);
  read_optional(j, "alpha", c.alpha, where);
  read_optional(j, "learning_rate", c.learning_rate, where);
  if (j.contains("optimizer")) {
    std::string name;
    read_optional(j, "optimizer", name, where);
    try {
      c.optimizer = optimizer_kind_from_string(name);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ".optimizer: " + e.what());
    }
  }
  read_optional(j, "reg_batch", c.reg_batch, where);
  read_optional(j, "distill_batch", c.distill_batch, where);
  read_optional(j, "total_updates", c.total_updates, where);
  read_optional(j, "pcgrad", c.pcgrad, where);
  read_optional(j, "max_grad_norm", c.max_grad_norm, where);
  read_optional(j, "buffer_capacity", c.buffer_capacity, where);
  read_optional(j, "act_envs", c.act_envs, where);
  read_optional(j, "warmup_steps", c.warmup_steps, where);
  read_optional(j, "reg_warmup_updates", c.reg_warmup_updates, where);
  read_optional(j, "detach_normalizer", c.detach_normalizer, where);
  if (j.contains("normalizer")) {
    try {
      c.normalizer = map_normalizer_from_string(j.at("normalizer").get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("digr.normalizer: ") + e.what());
    }
  }
  read_optional(j, "use_regularization", c.use_regularization, where);
  read_optional(j, "log_interval", c.log_interval, where);
  read_optional(j, "eval_interval", c.eval_interval, where);
  read_optional(j, "eval_episodes", c.eval_episodes, where);
  read_optional(j, "dataset_size", c.dataset_size, where);
}

std::string to_string(MapNormalizer n) { return n == MapNormalizer::kMax ? "max" : "mean"; }

MapNormalizer map_normalizer_from_string(const std::string& name) {
  if (name == "max") return MapNormalizer::kMax;
  if (name == "mean") return MapNormalizer::kMean;
  throw std::invalid_argument("unknown map normalizer '" + name + "' (max or mean)");
}

Tensor student_saliency(const Policy& student, const Tensor& obs, bool detach_normalizer, MapNormalizer normalizer) {
  Tensor raw = vanilla_gradient_raw(student, obs, true);
  const Index b = raw.dim(0), h = raw.dim(1), w = raw.dim(2);
  Tensor flat = reshape(raw, {b, h * w});
  Tensor scale = normalizer == MapNormalizer::kMax ? max_dim(flat, 1) : sum_dim(flat, 1) * (1.0 / static_cast<double>(h * w));
  Tensor scaled;
  if (detach_normalizer) {
    Array inv(b * h * w);
    for (Index i = 0; i < b; ++i) {
      double m = scale[i];
      inv.segment(i * h * w, h * w).setConstant(m > 0.0 ? 1.0 / m : 0.0);
    }
    scaled = flat * Tensor({b, h * w}, std::move(inv));
  } else {
    scaled = div(flat, expand_dim(add_scalar(scale, 1e-12), 1, h * w));
  }
  return reshape(scaled, {b, h, w});
}

Tensor regularization_loss(const Policy& student, const Tensor& obs, const Tensor& teacher_maps, double threshold,
                           bool detach_normalizer, MapNormalizer normalizer) {
  if (obs.rank() != 4 || teacher_maps.rank() != 3 || obs.dim(0) != teacher_maps.dim(0) ||
      obs.dim(2) != teacher_maps.dim(1) || obs.dim(3) != teacher_maps.dim(2)) {
    throw ShapeError("regularization_loss: observations " + to_string(obs.shape()) + " vs maps " +
                     to_string(teacher_maps.shape()));
  }
  if (obs.dim(0) == 0) throw std::invalid_argument("regularization_loss: empty batch");
  Tensor maps = student_saliency(student, obs, detach_normalizer, normalizer);
  Array indicator = (teacher_maps.array() <= threshold).cast<double>();
  const double per = 1.0 / static_cast<double>(teacher_maps.numel());
  Tensor loss = sum(maps * Tensor(teacher_maps.shape(), std::move(indicator))) * per;
  if (!std::isfinite(loss.item())) {
    for (Index i = 0; i < maps.dim(0); ++i) {
      if (!maps.array().segment(i * maps.dim(1) * maps.dim(2), maps.dim(1) * maps.dim(2)).allFinite()) {
        throw NumericError("regularization_loss: non-finite saliency for state " + std::to_string(i));
      }
    }
    throw NumericError("regularization_loss: non-finite loss");
  }
  return loss;
}

Tensor distillation_loss(const Policy& teacher, const Policy& student, const Tensor& obs) {
  if (obs.rank() != 4 || obs.dim(0) == 0) throw std::invalid_argument("distillation_loss: empty or malformed batch");
  Tensor p_t;
  {
    NoGradGuard ng;
    p_t = teacher.forward(obs).dist.probs.detach();
  }
  constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)
  Array log_t = p_t.array().max(1e-12).log();
  PolicyOutput s = student.forward(obs);
  Tensor log_s = clamp(s.dist.log_probs, kLogFloor, 0.0);
  Tensor kl = sum(p_t * (Tensor(p_t.shape(), std::move(log_t)) - log_s));
  return kl * (1.0 / static_cast<double>(obs.dim(0)));
}

Eigen::VectorXd pcgrad_combine(const Eigen::VectorXd& g_reg, const Eigen::VectorXd& g_dist) {
  if (g_reg.size() != g_dist.size()) throw std::invalid_argument("pcgrad_combine: dimension mismatch");
  const double dot = g_reg.dot(g_dist);
  if (dot >= 0.0) return g_reg + g_dist;
  Eigen::VectorXd a = g_reg, b = g_dist;
  const double nd = g_dist.squaredNorm(), nr = g_reg.squaredNorm();
  if (nd > 0.0) a -= (dot / nd) * g_dist;
  if (nr > 0.0) b -= (dot / nr) * g_reg;
  return a + b;
}

Eigen::VectorXd flatten(const std::vector<Tensor>& tensors) {
  Index n = 0;
  for (const Tensor& t : tensors) n += t.numel();
  Eigen::VectorXd out(n);
  Index at = 0;
  for (const Tensor& t : tensors) {
    out.segment(at, t.numel()) = t.array().matrix();
    at += t.numel();
  }
  return out;
}

std::vector<Tensor> unflatten(const Eigen::VectorXd& flat, const std::vector<Tensor>& like) {
  std::vector<Tensor> out;
  Index at = 0;
  for (const Tensor& t : like) {
    if (at + t.numel() > flat.size()) throw ShapeError("unflatten: vector too short");
    out.emplace_back(t.shape(), flat.segment(at, t.numel()).array());
    at += t.numel();
  }
  if (at != flat.size()) throw ShapeError("unflatten: vector too long");
  return out;
}

DIGRResult train_digr(const PolicyValueNet& teacher, PolicyValueNet& student, const PerturbationDataset& dataset,
                      const DIGRConfig& config, std::uint64_t seed,
                      const std::function<void(const DIGRLogRow&)>& on_row) {
  config.validate();
  if (config.use_regularization && dataset.size() == 0) throw std::invalid_argument("train_digr: empty dataset");
  if (teacher.num_actions() != student.num_actions()) {
    throw FormatError(FormatErrorKind::kArchitectureMismatch, "train_digr: teacher/student action counts differ");
  }
  OptimizerConfig oc;
  oc.kind = config.optimizer;
  oc.learning_rate = config.learning_rate;
  Optimizer optimizer(student.parameters(), oc);
  StateReplayBuffer buffer(config.buffer_capacity);
  VecFetchEnv envs(config.act_envs, derive_seed(seed, kActStream));
  Rng act_rng(derive_seed(seed, kActStream, 1));
  Rng batch_rng(derive_seed(seed, kBatchStream));
  const Index na = student.num_actions();

  auto act = [&]() {
    NoGradGuard ng;
    PolicyOutput out = student.forward(stack(envs.observations()));
    std::vector<int> actions(static_cast<std::size_t>(envs.size()));
    for (int e = 0; e < envs.size(); ++e) {
      buffer.push(envs.env(e).state());
      actions[static_cast<std::size_t>(e)] = sample_categorical(
          out.dist.probs.data().subspan(static_cast<std::size_t>(e * na), static_cast<std::size_t>(na)), act_rng);
    }
    envs.step(actions);
  };
  for (int i = 0; i < config.warmup_steps; ++i) act();

  DIGRResult result;
  double reg_acc = 0.0, kl_acc = 0.0;
  int acc_n = 0;
  for (long long u = 1; u <= config.total_updates; ++u) {
    act();
    const std::vector<Tensor>& params = student.parameters();
    Eigen::VectorXd g_reg = Eigen::VectorXd::Zero(student.parameter_count());
    double reg_value = 0.0;
    if (config.use_regularization && u > config.reg_warmup_updates) {
      std::vector<Tensor> obs, maps;
      for (int k = 0; k < config.reg_batch; ++k) {
        auto i = static_cast<std::size_t>(batch_rng() % dataset.size());
        obs.push_back(dataset.observations[i]);
        maps.push_back(dataset.maps[i]);
      }
      Tensor reg = regularization_loss(student, stack(obs), stack(maps), config.saliency_threshold,
                                       config.detach_normalizer, config.normalizer);
      reg_value = reg.item();
      g_reg = flatten(grad(reg, params));
    }
    Tensor kl = distillation_loss(teacher, student, buffer.sample(static_cast<std::size_t>(config.distill_batch), batch_rng));
    if (!std::isfinite(kl.item())) throw NumericError("train_digr: non-finite distillation loss at update " + std::to_string(u));
    Eigen::VectorXd g_dist = config.alpha * flatten(grad(kl, params));
    Eigen::VectorXd g = config.pcgrad ? pcgrad_combine(g_reg, g_dist) : Eigen::VectorXd(g_reg + g_dist);
    optimizer.step(clip_global_norm(unflatten(g, params), config.max_grad_norm));

    reg_acc += reg_value;
    kl_acc += kl.item();
    ++acc_n;
    const bool eval_now = u % config.eval_interval == 0 || u == config.total_updates;
    if (u % config.log_interval == 0 || eval_now) {
      DIGRLogRow row;
      row.update = u;
      row.reg_loss = reg_acc / acc_n;
      row.distill_kl = kl_acc / acc_n;
      row.success_rate = std::numeric_limits<double>::quiet_NaN();
      if (eval_now) {
        EvalOptions eo;
        eo.episodes = config.eval_episodes;
        eo.seed = derive_seed(seed, kEvalStream, static_cast<std::uint64_t>(u));
        row.success_rate = evaluate_policy(student, eo).success_rate;
      }
      reg_acc = kl_acc = 0.0;
      acc_n = 0;
      result.log.push_back(row);
      if (on_row) on_row(row);
    }
  }
  return result;
}

std::string digr_log_csv(const std::vector<DIGRLogRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "update,reg_loss,distill_kl,success_rate\n";
  for (const DIGRLogRow& r : rows) {
    os << r.update << ',' << r.reg_loss << ',' << r.distill_kl << ',';
    if (!std::isnan(r.success_rate)) os << r.success_rate;
    os << '\n';
  }
  return os.str();
}

}  // namespace digr

#include "digr/policy_net.hpp"

#include "digr/ops.hpp"
#include "digr/random.hpp"
#include "digr/serialize.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <sstream>

namespace digr {

namespace {

// Orthogonal matrix of shape rows x cols (row-major), scaled by gain.
Array orthogonal(Index rows, Index cols, double gain, Rng& rng) {
  const Index big = std::max(rows, cols);
  const Index small = std::min(rows, cols);
  Eigen::MatrixXd a(big, small);
  for (Index j = 0; j < small; ++j) {
    for (Index i = 0; i < big; ++i) a(i, j) = standard_normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  Eigen::VectorXd diag = qr.matrixQR().diagonal();
  for (Index j = 0; j < small; ++j) {
    if (diag[j] < 0) q.col(j) *= -1.0;
  }
  // q is big x small; orient it to rows x cols.
  Eigen::MatrixXd w = rows >= cols ? q : Eigen::MatrixXd(q.transpose());
  Array out(rows * cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) out[r * cols + c] = gain * w(r, c);
  }
  return out;
}

Tensor parameter(Shape shape, Array values) {
  Tensor t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

Architecture Architecture::fetch_default(Index num_actions) {
  Architecture a;
  // First layer reads one grid cell per output position.
  a.convs = {{16, 8, 8, 0}, {32, 3, 1, 1}, {32, 3, 1, 1}};
  a.hidden = 128;
  a.num_actions = num_actions;
  return a;
}

Shape Architecture::last_conv_shape() const {
  Index c = input_channels, h = input_height, w = input_width;
  for (const ConvLayerSpec& layer : convs) {
    c = layer.out_channels;
    h = conv_output_size(h, layer.kernel, layer.stride, layer.padding);
    w = conv_output_size(w, layer.kernel, layer.stride, layer.padding);
  }
  return {c, h, w};
}

void to_json(nlohmann::json& j, const Architecture& a) {
  j = nlohmann::json::object();
  j["input_channels"] = a.input_channels;
  j["input_height"] = a.input_height;
  j["input_width"] = a.input_width;
  j["convs"] = nlohmann::json::array();
  for (const ConvLayerSpec& c : a.convs) {
    j["convs"].push_back({{"out_channels", c.out_channels},
                          {"kernel", c.kernel},
                          {"stride", c.stride},
                          {"padding", c.padding}});
  }
  j["hidden"] = a.hidden;
  j["num_actions"] = a.num_actions;
}

void from_json(const nlohmann::json& j, Architecture& a) {
  a.input_channels = j.at("input_channels").get<Index>();
  a.input_height = j.at("input_height").get<Index>();
  a.input_width = j.at("input_width").get<Index>();
  a.convs.clear();
  for (const auto& c : j.at("convs")) {
    a.convs.push_back({c.at("out_channels").get<Index>(), c.at("kernel").get<Index>(),
                       c.at("stride").get<Index>(), c.at("padding").get<Index>()});
  }
  a.hidden = j.at("hidden").get<Index>();
  a.num_actions = j.at("num_actions").get<Index>();
}

PolicyValueNet::PolicyValueNet(Architecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
  if (arch_.convs.empty()) throw std::invalid_argument("policy net: needs at least one conv layer");
  Rng rng(seed);
  const double relu_gain = std::sqrt(2.0);
  Index in_channels = arch_.input_channels;
  for (const ConvLayerSpec& layer : arch_.convs) {
    Index fan = in_channels * layer.kernel * layer.kernel;
    params_.push_back(parameter({layer.out_channels, in_channels, layer.kernel, layer.kernel},
                                orthogonal(layer.out_channels, fan, relu_gain, rng)));
    params_.push_back(parameter({layer.out_channels}, Array::Zero(layer.out_channels)));
    in_channels = layer.out_channels;
  }
  Index flat = numel(arch_.last_conv_shape());
  params_.push_back(parameter({flat, arch_.hidden}, orthogonal(flat, arch_.hidden, relu_gain, rng)));
  params_.push_back(parameter({arch_.hidden}, Array::Zero(arch_.hidden)));
  params_.push_back(parameter({arch_.hidden, arch_.num_actions},
                              orthogonal(arch_.hidden, arch_.num_actions, 0.01, rng)));
  params_.push_back(parameter({arch_.num_actions}, Array::Zero(arch_.num_actions)));
  params_.push_back(parameter({arch_.hidden, 1}, orthogonal(arch_.hidden, 1, 1.0, rng)));
  params_.push_back(parameter({1}, Array::Zero(1)));
}

PolicyOutput PolicyValueNet::forward(const Tensor& obs, ForwardMode mode) const {
  const Shape expected = arch_.observation_shape();
  if (obs.rank() != 4 || obs.dim(1) != expected[0] || obs.dim(2) != expected[1] ||
      obs.dim(3) != expected[2]) {
    throw ShapeError("policy forward: observation shape " + to_string(obs.shape()) +
                     " does not match [B, " + std::to_string(expected[0]) + ", " +
                     std::to_string(expected[1]) + ", " + std::to_string(expected[2]) + "]");
  }
  auto act = [mode](const Tensor& x) {
    return mode == ForwardMode::kGuidedBackprop ? guided_relu(x) : relu(x);
  };
  const Index batch = obs.dim(0);
  Tensor h = obs;
  std::size_t p = 0;
  for (const ConvLayerSpec& layer : arch_.convs) {
    h = act(add_channel_bias(conv2d(h, params_[p], {layer.stride, layer.padding}), params_[p + 1]));
    p += 2;
  }
  PolicyOutput out;
  out.last_conv = h;
  Tensor flat = reshape(h, {batch, h.numel() / batch});
  Tensor z = act(add_channel_bias(matmul(flat, params_[p]), params_[p + 1]));
  out.logits = add_channel_bias(matmul(z, params_[p + 2]), params_[p + 3]);
  out.value = reshape(add_channel_bias(matmul(z, params_[p + 4]), params_[p + 5]), {batch});
  out.dist.probs = softmax(out.logits);
  out.dist.log_probs = log_softmax(out.logits);
  return out;
}

std::vector<std::string> PolicyValueNet::parameter_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < arch_.convs.size(); ++i) {
    names.push_back("conv" + std::to_string(i + 1) + ".weight");
    names.push_back("conv" + std::to_string(i + 1) + ".bias");
  }
  for (const char* n : {"fc.weight", "fc.bias", "policy.weight", "policy.bias", "value.weight",
                        "value.bias"}) {
    names.emplace_back(n);
  }
  return names;
}

Index PolicyValueNet::parameter_count() const {
  Index n = 0;
  for (const Tensor& t : params_) n += t.numel();
  return n;
}

PolicyValueNet PolicyValueNet::clone() const {
  PolicyValueNet copy;
  copy.arch_ = arch_;
  for (const Tensor& t : params_) copy.params_.push_back(parameter(t.shape(), t.array()));
  return copy;
}

void PolicyValueNet::copy_parameters_from(const PolicyValueNet& other) {
  if (!(other.arch_ == arch_)) {
    throw FormatError(FormatErrorKind::kArchitectureMismatch, "copy_parameters_from: architecture mismatch");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].mutable_array() = other.params_[i].array();
}

void PolicyValueNet::zero_policy_head() {
  std::size_t head = arch_.convs.size() * 2 + 2;
  params_[head].mutable_array().setZero();
  params_[head + 1].mutable_array().setZero();
}

void save_checkpoint(const PolicyValueNet& net, const CheckpointMetadata& meta,
                     const std::string& path) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["architecture"] = net.architecture();
  header["algorithm"] = meta.algorithm;
  header["seed"] = meta.seed;
  header["step_count"] = meta.step_count;
  header["env_id"] = meta.env_id;
  header["provenance"] = meta.provenance;
  header["parameters"] = net.parameter_names();
  std::ostringstream os;
  write_magic(os, kCheckpointMagic);
  os << header.dump() << '\n';
  for (const Tensor& t : net.parameters()) write_tensor(os, t);
  write_file(path, os.str());
}

PolicyValueNet load_checkpoint(const std::string& path, CheckpointMetadata* meta) {
  std::istringstream in(read_file(path));
  expect_magic(in, kCheckpointMagic, "checkpoint");
  std::string line = read_header_line(in, "checkpoint");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kCorruptHeader, std::string("checkpoint: corrupt header: ") + e.what());
  }
  PolicyValueNet net;
  try {
    int version = header.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw FormatError(FormatErrorKind::kVersionMismatch,
                        "checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    net.arch_ = header.at("architecture").get<Architecture>();
    if (meta) {
      meta->algorithm = header.at("algorithm").get<std::string>();
      meta->seed = header.at("seed").get<std::uint64_t>();
      meta->step_count = header.at("step_count").get<long long>();
      meta->env_id = header.at("env_id").get<std::string>();
      meta->provenance = header.at("provenance");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kCorruptHeader, std::string("checkpoint: corrupt header: ") + e.what());
  }
  // Shapes come from a freshly built network of the stored architecture.
  PolicyValueNet reference(net.arch_, 0);
  for (const Tensor& expected : reference.parameters()) {
    Tensor t = read_tensor(in);
    if (t.shape() != expected.shape()) {
      throw FormatError(FormatErrorKind::kArchitectureMismatch,
                        "checkpoint: parameter shape " + to_string(t.shape()) + " expected " +
                            to_string(expected.shape()));
    }
    net.params_.push_back(parameter(t.shape(), t.array()));
  }
  return net;
}

PolicyValueNet load_checkpoint_for(const std::string& path, Index expected_actions,
                                   CheckpointMetadata* meta) {
  PolicyValueNet net = load_checkpoint(path, meta);
  if (net.num_actions() != expected_actions) {
    throw FormatError(FormatErrorKind::kArchitectureMismatch,
                      "checkpoint: network has " + std::to_string(net.num_actions()) +
                          " actions, environment has " + std::to_string(expected_actions));
  }
  return net;
}

Tensor as_batch(const Tensor& obs) {
  Shape s = obs.shape();
  s.insert(s.begin(), 1);
  return reshape(obs, s);
}

}  // namespace digr

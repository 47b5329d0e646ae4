#include "gradcheck.hpp"

#include "digr/ops.hpp"
#include "digr/policy_net.hpp"
#include "digr/saliency.hpp"
#include "digr/serialize.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace digr;
using namespace digr::testing;

namespace {

std::string temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "digr_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

Tensor random_obs(Index batch, std::uint64_t seed) {
  Rng rng(seed);
  return uniform_tensor({batch, 3, 64, 64}, rng, 0.0, 1.0);
}

// Two inputs, two ReLU units, two actions.
class TwoNeuronPolicy : public Policy {
 public:
  PolicyOutput forward(const Tensor& obs, ForwardMode mode) const override {
    Tensor flat = reshape(obs, {obs.dim(0), 2});
    Tensor pre = matmul(flat, w1_);
    Tensor h = mode == ForwardMode::kGuidedBackprop ? guided_relu(pre) : relu(pre);
    PolicyOutput out;
    out.logits = matmul(h, w2_);
    out.dist.probs = softmax(out.logits);
    out.dist.log_probs = log_softmax(out.logits);
    return out;
  }
  Index num_actions() const override { return 2; }

 private:
  Tensor w1_ = Tensor::from_vector({2, 2}, {1.0, -1.0, 0.5, 3.0});
  Tensor w2_ = Tensor::from_vector({2, 2}, {1.0, -1.0, -2.0, 0.5});
};

}  // namespace

TEST_SUITE("trivial") {
  TEST_CASE("action probabilities sum to one") {
    PolicyValueNet net(Architecture::fetch_default(), 4);
    PolicyOutput out = net.forward(random_obs(3, 1));
    for (Index b = 0; b < 3; ++b) {
      double s = 0.0;
      for (Index a = 0; a < 4; ++a) s += out.dist.probs[b * 4 + a];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(out.value.shape() == Shape{3});
    CHECK(out.last_conv.rank() == 4);
  }

  TEST_CASE("zero policy head gives the uniform distribution") {
    PolicyValueNet net(Architecture::fetch_default(), 4);
    net.zero_policy_head();
    PolicyOutput out = net.forward(random_obs(2, 2));
    for (Index i = 0; i < 8; ++i) CHECK(out.dist.probs[i] == doctest::Approx(0.25).epsilon(1e-15));
  }

  TEST_CASE("checkpoint round trip reproduces logits exactly") {
    PolicyValueNet net(Architecture::fetch_default(), 9);
    CheckpointMetadata meta{"ppo", 9, 1234, "RedFetchGreen-8x8-v0", {{"note", "x"}}};
    const std::string path = temp_path("roundtrip.dgc");
    save_checkpoint(net, meta, path);
    CheckpointMetadata back;
    PolicyValueNet loaded = load_checkpoint(path, &back);
    CHECK(back.algorithm == "ppo");
    CHECK(back.step_count == 1234);
    CHECK(back.provenance["note"] == "x");
    Tensor obs = random_obs(10, 3);
    NoGradGuard ng;
    CHECK((net.forward(obs).logits.array() - loaded.forward(obs).logits.array()).abs().maxCoeff() == 0.0);
  }

  TEST_CASE("corrupt magic bytes are reported as bad magic") {
    PolicyValueNet net(Architecture::fetch_default(), 1);
    const std::string path = temp_path("corrupt.dgc");
    save_checkpoint(net, {}, path);
    {
      std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
      f.write("XXXX", 4);
    }
    try {
      load_checkpoint(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.kind() == FormatErrorKind::kBadMagic);
      CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
    }
  }

  TEST_CASE("truncated checkpoint is rejected") {
    PolicyValueNet net(Architecture::fetch_default(), 1);
    const std::string path = temp_path("truncated.dgc");
    save_checkpoint(net, {}, path);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }

  TEST_CASE("action-count mismatch is an architecture error") {
    PolicyValueNet net(Architecture::fetch_default(6), 1);
    const std::string path = temp_path("six_actions.dgc");
    save_checkpoint(net, {}, path);
    try {
      load_checkpoint_for(path, 4);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.kind() == FormatErrorKind::kArchitectureMismatch);
    }
  }

  TEST_CASE("same seed gives identical parameters, different seeds differ") {
    PolicyValueNet a(Architecture::fetch_default(), 5), b(Architecture::fetch_default(), 5),
        c(Architecture::fetch_default(), 6);
    CHECK((a.parameters()[0].array() - b.parameters()[0].array()).abs().maxCoeff() == 0.0);
    CHECK((a.parameters()[0].array() - c.parameters()[0].array()).abs().maxCoeff() > 0.0);
  }

  TEST_CASE("wrong observation shape is rejected") {
    PolicyValueNet net(Architecture::fetch_default(), 1);
    CHECK_THROWS_AS(net.forward(Tensor::zeros({1, 3, 32, 32})), ShapeError);
  }

  TEST_CASE("architecture survives a JSON round trip") {
    Architecture a = Architecture::fetch_default();
    nlohmann::json j = a;
    CHECK(j.get<Architecture>() == a);
  }
}

TEST_SUITE("derived") {
  TEST_CASE("guided backprop on a two-neuron net matches the hand trace") {
    // pre = (1.25, 0.5), logits = (0.25, -1); greedy action 0.
    // dF/dh = c (2, -2.5): the negative entry is blocked, so dF/dx = c (2, 1).
    TwoNeuronPolicy policy;
    SaliencyMap m = guided_backprop(policy, Tensor::from_vector({1, 1, 2}, {1.0, 0.5}));
    double p0 = 1.0 / (1.0 + std::exp(-1.25));
    double c = p0 * (1.0 - p0);
    CHECK(m.values[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.values[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(m.raw_max == doctest::Approx(2.0 * c).epsilon(1e-12));
  }

  TEST_CASE("full policy network gradients match central differences on sampled coordinates") {
    CHECK(network_first_order(Architecture::fetch_default(), 7, 2, 40) < 1e-4);
  }
}

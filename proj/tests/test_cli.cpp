#include "cli.hpp"

#include "digr/digr.hpp"
#include "digr/serialize.hpp"

#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <sstream>

namespace fs = std::filesystem;
using namespace digr;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Writes a tiny-budget config into a fresh directory and returns its path.
std::string tiny_config(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "digr_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  nlohmann::json j = nlohmann::json::parse(R"({
    "architecture": {"convs": [{"out_channels": 4, "kernel": 8, "stride": 8, "padding": 0},
                               {"out_channels": 4, "kernel": 3, "stride": 1, "padding": 1},
                               {"out_channels": 4, "kernel": 3, "stride": 1, "padding": 1}],
                     "hidden": 16},
    "ppo": {"total_steps": 2048, "num_envs": 4, "steps_per_rollout": 64},
    "digr": {"total_updates": 6, "eval_interval": 3, "eval_episodes": 2, "log_interval": 2,
             "dataset_size": 3, "warmup_steps": 8, "reg_batch": 2, "distill_batch": 4},
    "perturbation": {"stride": 8},
    "attack": {"runs": 2, "epsilons": [0, 0.02], "iterations": 2},
    "saliency": {"labeled_states": 3, "subset_states": 2, "ig_steps": 3, "smooth_samples": 2,
                 "timing_states": 1, "timing_repetitions": 3},
    "eval_episodes": 2, "seed": 3})");
  j["output_dir"] = (dir / "run").string();
  std::string path = (dir / "cfg.json").string();
  write_file(path, j.dump(2));
  return path;
}

std::string out_dir(const std::string& cfg) { return (fs::path(cfg).parent_path() / "run").string(); }

Run stage(const std::string& cfg, std::vector<std::string> args) {
  args.insert(args.end(), {"--config", cfg, "--quiet"});
  return invoke(args);
}

}  // namespace

TEST_SUITE("trivial") {
  TEST_CASE("missing config file is a usage error") {
    Run r = invoke({"print-config", "--config", "/nonexistent/cfg.json"});
    CHECK(r.code == cli::kExitUsage);
    CHECK(r.err.find("not found") != std::string::npos);
  }

  TEST_CASE("unknown flags and subcommands are usage errors") {
    CHECK(invoke({"train-ppo", "--bogus"}).code == cli::kExitUsage);
    CHECK(invoke({"frobnicate"}).code == cli::kExitUsage);
    CHECK(invoke({}).code == cli::kExitUsage);
    CHECK(invoke({"build-perturb-dataset"}).code == cli::kExitUsage);
  }

  TEST_CASE("invalid config values are usage errors") {
    std::string cfg = tiny_config("invalid");
    nlohmann::json j = nlohmann::json::parse(read_file(cfg));
    j["ppo"]["clip_range"] = -1;
    write_file(cfg, j.dump());
    CHECK(invoke({"print-config", "--config", cfg}).code == cli::kExitUsage);
  }

  TEST_CASE("help and version exit cleanly") {
    CHECK(invoke({"--help"}).code == cli::kExitOk);
    CHECK(invoke({"--version"}).code == cli::kExitOk);
  }

  TEST_CASE("print-config applies overrides") {
    std::string cfg = tiny_config("print");
    Run r = invoke({"print-config", "--config", cfg, "--seed", "17", "--out", "/tmp/x"});
    REQUIRE(r.code == cli::kExitOk);
    nlohmann::json j = nlohmann::json::parse(r.out);
    CHECK(j["seed"] == 17);
    CHECK(j["output_dir"] == "/tmp/x");
    CHECK(j["architecture"]["hidden"] == 16);
  }

  TEST_CASE("a missing checkpoint is a usage error, a corrupt one a runtime failure") {
    std::string cfg = tiny_config("noteacher");
    CHECK(stage(cfg, {"build-perturb-dataset", "--teacher", "/nonexistent.dgc"}).code == cli::kExitUsage);
    std::string bad = (fs::path(cfg).parent_path() / "bad.dgc").string();
    write_file(bad, "DGC1 not json");
    Run r = stage(cfg, {"build-perturb-dataset", "--teacher", bad});
    CHECK(r.code == cli::kExitFailure);
    CHECK_FALSE(r.err.empty());
  }
}

TEST_SUITE("pipeline") {
  TEST_CASE("the command line runs every stage and writes the declared artifacts") {
    std::string cfg = tiny_config("full");
    const fs::path out = out_dir(cfg);
    const std::string teacher = (out / "teacher.dgc").string();

    REQUIRE(stage(cfg, {"train-ppo"}).code == 0);
    CHECK(fs::exists(teacher));
    std::string log = read_file((out / "ppo_log.csv").string());
    CHECK(log.rfind("# config_sha256=", 0) == 0);

    REQUIRE(stage(cfg, {"build-perturb-dataset", "--teacher", teacher, "--stride", "16"}).code == 0);
    PerturbationDataset ds = load_dataset((out / "perturb_dataset.dgd").string());
    CHECK(ds.spec.stride == 16);
    CHECK(ds.size() == 3);

    REQUIRE(stage(cfg, {"train-digr", "--teacher", teacher}).code == 0);
    CHECK(fs::exists(out / "student.dgc"));
    REQUIRE(stage(cfg, {"train-digr", "--teacher", teacher, "--distill-only", "--name", "distill"}).code == 0);
    CHECK(fs::exists(out / "distill_log.csv"));

    Run sal = stage(cfg, {"saliency", "--policy", teacher, "--methods", "vanilla_gradient,grad_cam", "--states", "2"});
    REQUIRE(sal.code == 0);
    int pngs = 0;
    for (const auto& e : fs::directory_iterator(out)) pngs += e.path().extension() == ".png" ? 1 : 0;
    CHECK(pngs == 4);
    CHECK(fs::exists(out / "state0001_grad_cam.dgt"));
    CHECK(fs::exists(out / "state0001_grad_cam.json"));

    REQUIRE(stage(cfg, {"eval-saliency", "--teacher", teacher, "--student", (out / "student.dgc").string(),
                        "--methods", "vanilla_gradient,gb_perturbation"})
                .code == 0);
    std::string metrics = read_file((out / "saliency_metrics.csv").string());
    CHECK(metrics.find("method,states,important,unimportant,auc\n") != std::string::npos);
    CHECK(metrics.find("teacher:gb_perturbation,2,") != std::string::npos);
    CHECK(metrics.find("digr:vanilla_gradient,3,") != std::string::npos);

    REQUIRE(stage(cfg, {"benchmark-time", "--policy", teacher, "--methods", "vanilla_gradient"}).code == 0);
    CHECK(fs::exists(out / "timing.csv"));

    REQUIRE(stage(cfg, {"attack-eval", "--policy", "teacher=" + teacher, "--attacks", "fgsm"}).code == 0);
    std::string rob = read_file((out / "robustness.csv").string());
    CHECK(std::count(rob.begin(), rob.end(), '\n') == 4);

    REQUIRE(stage(cfg, {"eval-policy", "--policy", "teacher=" + teacher, "--policy",
                        "digr=" + (out / "student.dgc").string()})
                .code == 0);
    std::string ev = read_file((out / "policy_eval.csv").string());
    CHECK(ev.find("teacher,2,") != std::string::npos);
    CHECK(ev.find("digr,2,") != std::string::npos);

    // The dataset was built by this teacher; another teacher is refused.
    REQUIRE(stage(cfg, {"train-ppo", "--seed", "4", "--out", (out / "other").string()}).code == 0);
    Run mismatch = stage(cfg, {"train-digr", "--teacher", (out / "other" / "teacher.dgc").string(), "--dataset",
                               (out / "perturb_dataset.dgd").string(), "--out", (out / "other").string()});
    CHECK(mismatch.code != 0);
  }

  TEST_CASE("same seed gives byte-identical training logs and checkpoints") {
    std::string a = tiny_config("det_a"), b = tiny_config("det_b");
    REQUIRE(stage(a, {"train-ppo"}).code == 0);
    REQUIRE(stage(b, {"train-ppo"}).code == 0);
    CHECK(read_file(out_dir(a) + "/ppo_log.csv") == read_file(out_dir(b) + "/ppo_log.csv"));
    CHECK(read_file(out_dir(a) + "/teacher.dgc") == read_file(out_dir(b) + "/teacher.dgc"));
  }
}

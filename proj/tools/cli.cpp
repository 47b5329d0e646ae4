#include "cli.hpp"

#include "digr/attacks.hpp"
#include "digr/config.hpp"
#include "digr/digr.hpp"
#include "digr/eval_bench.hpp"
#include "digr/json_util.hpp"
#include "digr/ppo.hpp"
#include "digr/saliency.hpp"
#include "digr/serialize.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

namespace digr::cli {

namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
  int threads = 1;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "Experiment config (JSON)");
  app->add_option("--seed", c.seed, "Override the config seed")->each([&c](const std::string&) { c.seed_set = true; });
  app->add_option("--out", c.out_dir, "Override the output directory");
  app->add_option("--threads", c.threads, "Worker thread cap")->check(CLI::PositiveNumber);
  app->add_flag("--quiet", c.quiet, "No progress output");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config_path.empty()) {
    if (!fs::exists(c.config_path)) throw UsageError("config file not found: " + c.config_path);
    cfg = load_config(c.config_path);
  }
  if (c.seed_set) cfg.seed = c.seed;
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  cfg.validate();
  Eigen::setNbThreads(c.threads);
  return cfg;
}

std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
  return (fs::path(cfg.output_dir) / name).string();
}

void write_csv(const std::string& path, const ExperimentConfig& cfg, const std::string& body) {
  write_file(path, "# config_sha256=" + config_hash(cfg) + "\n" + body);
}

struct NamedPolicy {
  std::string id;
  std::string path;
};

NamedPolicy parse_named(const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos) return {fs::path(spec).stem().string(), spec};
  if (eq == 0 || eq + 1 == spec.size()) throw UsageError("policy spec must be id=path: " + spec);
  return {spec.substr(0, eq), spec.substr(eq + 1)};
}

PolicyValueNet load_policy(const std::string& path, CheckpointMetadata* meta = nullptr) {
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
  return load_checkpoint_for(path, kNumActions, meta);
}

class Progress {
 public:
  Progress(std::ostream& err, bool quiet, std::string tag) : err_(err), quiet_(quiet), tag_(std::move(tag)) {}
  void operator()(std::size_t done, std::size_t total) const {
    if (quiet_) return;
    std::size_t step = std::max<std::size_t>(1, total / 20);
    if (done % step == 0 || done == total) err_ << "[" << tag_ << "] " << done << "/" << total << std::endl;
  }
  std::ostream& err() const { return err_; }
  bool quiet() const { return quiet_; }

 private:
  std::ostream& err_;
  bool quiet_;
  std::string tag_;
};

std::vector<SaliencyMethod> parse_methods(const std::vector<std::string>& names) {
  if (names.empty()) return all_saliency_methods();
  std::vector<SaliencyMethod> out;
  for (const std::string& n : names) {
    try {
      out.push_back(saliency_method_from_string(n));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  return out;
}

bool is_expensive(SaliencyMethod m) {
  return m == SaliencyMethod::kGbPerturbation || m == SaliencyMethod::kIntegratedGradients ||
         m == SaliencyMethod::kSmoothGrad;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DIGR pipeline: teacher training, saliency datasets, regularized students, evaluation", "digr"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "digr 1.0");

  Common common;
  std::vector<std::function<int()>> actions;

  // print-config
  auto* print_cmd = app.add_subcommand("print-config", "Print the resolved configuration as JSON");
  add_common(print_cmd, common);
  print_cmd->callback([&] {
    actions.push_back([&] {
      out << dump_config(resolve(common));
      return kExitOk;
    });
  });

  // train-ppo
  long long total_steps = 0;
  auto* ppo_cmd = app.add_subcommand("train-ppo", "Train the PPO teacher");
  add_common(ppo_cmd, common);
  ppo_cmd->add_option("--total-steps", total_steps, "Override ppo.total_steps");
  ppo_cmd->callback([&] {
    actions.push_back([&] {
      ExperimentConfig cfg = resolve(common);
      if (total_steps > 0) cfg.ppo.total_steps = total_steps;
      cfg.validate();
      PolicyValueNet net(cfg.architecture, derive_seed(cfg.seed, 0x7eac));
      PPOResult r = train_ppo(net, cfg.ppo, cfg.seed, [&](const PPOLogRow& row) {
        if (!common.quiet && (row.step / cfg.ppo.batch_size()) % 10 == 0) {
          err << "[train-ppo] step " << row.step << " success " << row.success_rate << " entropy " << row.entropy
              << std::endl;
        }
      });
      CheckpointMetadata meta{"ppo", cfg.seed, r.steps, cfg.env_id, {{"config_sha256", config_hash(cfg)}}};
      save_checkpoint(net, meta, out_path(cfg, "teacher.dgc"));
      write_csv(out_path(cfg, "ppo_log.csv"), cfg, ppo_log_csv(r.log));
      write_file(out_path(cfg, "config.json"), dump_config(cfg));
      out << out_path(cfg, "teacher.dgc") << "\n";
      return kExitOk;
    });
  });

  // build-perturb-dataset
  std::string teacher_path;
  long long count = 0;
  int stride = 0;
  auto* ds_cmd = app.add_subcommand("build-perturb-dataset", "Score teacher states with GB perturbation");
  add_common(ds_cmd, common);
  ds_cmd->add_option("--teacher", teacher_path, "Teacher checkpoint")->required();
  ds_cmd->add_option("--count", count, "Override digr.dataset_size");
  ds_cmd->add_option("--stride", stride, "Override perturbation.stride");
  ds_cmd->callback([&] {
    actions.push_back([&] {
      ExperimentConfig cfg = resolve(common);
      if (count > 0) cfg.digr.dataset_size = static_cast<std::size_t>(count);
      if (stride > 0) cfg.perturbation.stride = stride;
      cfg.validate();
      PolicyValueNet teacher = load_policy(teacher_path);
      DatasetBuildOptions o;
      o.count = cfg.digr.dataset_size;
      o.spec = cfg.perturbation;
      o.seed = cfg.seed;
      PerturbationDataset d = build_dataset(teacher, sha256_file(teacher_path), o,
                                            Progress(err, common.quiet, "build-perturb-dataset"));
      save_dataset(d, out_path(cfg, "perturb_dataset.dgd"));
      out << out_path(cfg, "perturb_dataset.dgd") << "\n";
      return kExitOk;
    });
  });

  // train-digr
  std::string dataset_path, student_name = "student";
  bool distill_only = false;
  long long updates = 0;
  auto* digr_cmd = app.add_subcommand("train-digr", "Train a student with saliency regularization and distillation");
  add_common(digr_cmd, common);
  digr_cmd->add_option("--teacher", teacher_path, "Teacher checkpoint")->required();
  digr_cmd->add_option("--dataset", dataset_path, "Perturbation dataset (default <out>/perturb_dataset.dgd)");
  digr_cmd->add_flag("--distill-only", distill_only, "Drop the regularization term (ablation)");
  digr_cmd->add_option("--updates", updates, "Override digr.total_updates");
  digr_cmd->add_option("--name", student_name, "Output stem (default student)");
  digr_cmd->callback([&] {
    actions.push_back([&] {
      ExperimentConfig cfg = resolve(common);
      if (updates > 0) cfg.digr.total_updates = updates;
      if (distill_only) cfg.digr.use_regularization = false;
      cfg.validate();
      PolicyValueNet teacher = load_policy(teacher_path);
      const std::string teacher_hash = sha256_file(teacher_path);
      PerturbationDataset d;
      std::string dataset_hash;
      if (cfg.digr.use_regularization) {
        if (dataset_path.empty()) dataset_path = out_path(cfg, "perturb_dataset.dgd");
        if (!fs::exists(dataset_path)) throw UsageError("dataset not found: " + dataset_path);
        d = load_dataset(dataset_path);
        dataset_hash = sha256_file(dataset_path);
        if (d.teacher_hash != teacher_hash) {
          throw std::runtime_error("dataset was built from a different teacher (" + d.teacher_hash + ")");
        }
      }
      PolicyValueNet student(cfg.architecture, derive_seed(cfg.seed, 0x57d7));
      DIGRResult r = train_digr(teacher, student, d, cfg.digr, cfg.seed, [&](const DIGRLogRow& row) {
        if (common.quiet) return;
        if (!std::isnan(row.success_rate) || row.update % (cfg.digr.log_interval * 10) == 0) {
          err << "[train-digr] update " << row.update << " reg " << row.reg_loss << " kl " << row.distill_kl;
          if (!std::isnan(row.success_rate)) err << " success " << row.success_rate;
          err << std::endl;
        }
      });
      CheckpointMetadata meta{cfg.digr.use_regularization ? "digr" : "distill", cfg.seed, cfg.digr.total_updates,
                              cfg.env_id,
                              {{"config_sha256", config_hash(cfg)},
                               {"teacher_sha256", teacher_hash},
                               {"dataset_sha256", dataset_hash}}};
      save_checkpoint(student, meta, out_path(cfg, student_name + ".dgc"));
      write_csv(out_path(cfg, student_name + "_log.csv"), cfg, digr_log_csv(r.log));
      out << out_path(cfg, student_name + ".dgc") << "\n";
      return kExitOk;
    });
  });

  // saliency
  std::string policy_path, episodes_path, colormap_name = "jet";
  std::vector<std::string> method_names;
  long long num_states = 4;
  auto* sal_cmd = app.add_subcommand("saliency", "Render saliency maps as PNG overlays with raw maps and sidecars");
  add_common(sal_cmd, common);
  sal_cmd->add_option("--policy", policy_path, "Policy checkpoint")->required();
  sal_cmd->add_option("--methods", method_names, "Methods (default all)")->delimiter(',');
  sal_cmd->add_option("--states", num_states, "States sampled from the policy's own rollouts");
  sal_cmd->add_option("--episodes", episodes_path, "Trajectory dump (JSON lines) to replay instead");
  sal_cmd->add_option("--colormap", colormap_name, "jet, hot or gray");
  sal_cmd->callback([&] {
    actions.push_back([&] {
      ExperimentConfig cfg = resolve(common);
      Colormap cmap;
      try {
        cmap = colormap_from_string(colormap_name);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      std::vector<SaliencyMethod> methods = parse_methods(method_names);
      PolicyValueNet policy = load_policy(policy_path);
      std::vector<GridState> states;
      if (!episodes_path.empty()) {
        if (!fs::exists(episodes_path)) throw UsageError("episodes file not found: " + episodes_path);
        for (const EpisodeRecord& e : from_jsonl(read_file(episodes_path))) {
          for (const GridState& s : replay(e)) {
            if (!s.done) states.push_back(s);
          }
        }
      } else {
        if (num_states < 1) throw UsageError("--states must be >= 1");
        states = sample_teacher_states(policy, static_cast<std::size_t>(num_states), 4, 4, cfg.seed);
      }
      SaliencyOptions opts = cfg.saliency_options();
      for (std::size_t i = 0; i < states.size(); ++i) {
        Tensor obs = render(states[i]);
        for (SaliencyMethod m : methods) {
          std::ostringstream stem;
          stem << "state" << std::setw(4) << std::setfill('0') << i << "_" << to_string(m);
          export_saliency(compute_saliency(m, policy, obs, opts), obs, out_path(cfg, stem.str()), cmap);
        }
        Progress(err, common.quiet, "saliency")(i + 1, states.size());
      }
      out << states.size() * methods.size() << " maps in " << cfg.output_dir << "\n";
      return kExitOk;
    });
  });

  // eval-saliency
  std::string student_path;
  std::vector<std::string> extra_policies;
  auto* es_cmd = app.add_subcommand("eval-saliency", "Important/unimportant saliency and pooled AUC per method");
  add_common(es_cmd, common);
  es_cmd->add_option("--teacher", teacher_path, "Teacher checkpoint (all methods)")->required();
  es_cmd->add_option("--student", student_path, "DIGR student (vanilla gradient)");
  es_cmd->add_option("--policy", extra_policies, "Extra id=path policies scored with vanilla gradient");
  es_cmd->add_option("--methods", method_names, "Teacher methods (default all)")->delimiter(',');
  es_cmd->callback([&] {
    actions.push_back([&] {
      ExperimentConfig cfg = resolve(common);
      std::vector<SaliencyMethod> methods = parse_methods(method_names);
      PolicyValueNet teacher = load_policy(teacher_path);
      std::vector<GridState> states = build_labeled_dataset(teacher, cfg.saliency.labeled_states, cfg.seed);
      std::vector<GridState> subset(states.begin(),
                                    states.begin() + static_cast<std::ptrdiff_t>(
                                                         std::min(states.size(), cfg.saliency.subset_states)));
      SaliencyOptions opts = cfg.saliency_options();
      std::vector<SaliencyMetrics> rows;
      for (SaliencyMethod m : methods) {
        SaliencyMetrics r = score_method(m, teacher, is_expensive(m) ? subset : states, opts,
                                         Progress(err, common.quiet, "eval-saliency teacher " + to_string(m)));
        r.label = "teacher:" + r.label;
        rows.push_back(r);
      }
      std::vector<NamedPolicy> others;
      if (!student_path.empty()) others.push_back({"digr", student_path});
      for (const std::string& s : extra_policies) others.push_back(parse_named(s));
      for (const NamedPolicy& p : others) {
        PolicyValueNet net = load_policy(p.path);
        SaliencyMetrics r = score_method(SaliencyMethod::kVanillaGradient, net, states, opts,
                                         Progress(err, common.quiet, "eval-saliency " + p.id));
        r.label = p.id + ":" + r.label;
        rows.push_back(r);
      }
      write_csv(out_path(cfg, "saliency_metrics.csv"), cfg, metrics_csv(rows));
      out << metrics_csv(rows);
      return kExitOk;
    });
  });

  // benchmark-time
  long long repetitions = 0;
  auto* bt_cmd = app.add_subcommand("benchmark-time", "Mean and std wall time per saliency map");
  add_common(bt_cmd, common);
  bt_cmd->add_option("--policy", policy_path, "Policy checkpoint")->required();
  bt_cmd->add_option("--methods", method_names, "Methods (default all)")->delimiter(',');
  bt_cmd->add_option("--states", num_states, "Override saliency.timing_states");
  bt_cmd->add_option("--repetitions", repetitions, "Override saliency.timing_repetitions");
  bt_cmd->callback([&] {
    actions.push_back([&] {
      ExperimentConfig cfg = resolve(common);
      if (bt_cmd->count("--states")) cfg.saliency.timing_states = static_cast<std::size_t>(std::max(1LL, num_states));
      if (repetitions > 0) cfg.saliency.timing_repetitions = static_cast<int>(repetitions);
      cfg.validate();
      Eigen::setNbThreads(1);
      PolicyValueNet policy = load_policy(policy_path);
      std::vector<GridState> states = build_labeled_dataset(policy, cfg.saliency.timing_states, cfg.seed);
      auto rows = timing_benchmark(parse_methods(method_names), policy, states, cfg.saliency.timing_repetitions,
                                   cfg.saliency_options());
      write_csv(out_path(cfg, "timing.csv"), cfg, timing_csv(rows));
      out << timing_csv(rows);
      return kExitOk;
    });
  });

  // attack-eval
  std::vector<std::string> policies;
  std::vector<std::string> attack_names;
  auto* at_cmd = app.add_subcommand("attack-eval", "Success under FGSM, PGD, MI-FGSM and MAD over the epsilon grid");
  add_common(at_cmd, common);
  at_cmd->add_option("--policy", policies, "id=path (repeatable)")->required();
  at_cmd->add_option("--attacks", attack_names, "Subset of fgsm,pgd,mi_fgsm,mad")->delimiter(',');
  at_cmd->callback([&] {
    actions.push_back([&] {
      ExperimentConfig cfg = resolve(common);
      RobustnessOptions opts = cfg.robustness_options();
      if (!attack_names.empty()) {
        opts.attacks.clear();
        for (const std::string& n : attack_names) {
          try {
            opts.attacks.push_back(attack_kind_from_string(n));
          } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
          }
        }
      }
      std::vector<RobustnessRow> rows;
      for (const std::string& spec : policies) {
        NamedPolicy p = parse_named(spec);
        PolicyValueNet net = load_policy(p.path);
        for (AttackKind kind : opts.attacks) {
          RobustnessOptions one = opts;
          one.attacks = {kind};
          for (const RobustnessRow& r : evaluate_robustness(net, p.id, one)) {
            rows.push_back(r);
            if (!common.quiet) {
              err << "[attack-eval] " << p.id << " " << to_string(kind) << " eps " << r.epsilon << " success "
                  << r.mean_success << std::endl;
            }
          }
        }
      }
      write_csv(out_path(cfg, "robustness.csv"), cfg, robustness_csv(rows));
      out << robustness_csv(rows);
      return kExitOk;
    });
  });

  // eval-policy
  long long episodes = 0;
  bool stochastic = false;
  auto* ev_cmd = app.add_subcommand("eval-policy", "Success rate, return and episode length");
  add_common(ev_cmd, common);
  ev_cmd->add_option("--policy", policies, "id=path (repeatable)")->required();
  ev_cmd->add_option("--episodes", episodes, "Override eval_episodes");
  ev_cmd->add_flag("--stochastic", stochastic, "Sample actions instead of argmax");
  ev_cmd->callback([&] {
    actions.push_back([&] {
      ExperimentConfig cfg = resolve(common);
      if (episodes > 0) cfg.eval_episodes = static_cast<int>(episodes);
      std::ostringstream csv;
      csv << std::setprecision(10) << "policy_id,episodes,deterministic,success_rate,mean_return,std_return,mean_length\n";
      for (const std::string& spec : policies) {
        NamedPolicy p = parse_named(spec);
        PolicyValueNet net = load_policy(p.path);
        EvalOptions eo;
        eo.episodes = cfg.eval_episodes;
        eo.deterministic = !stochastic;
        eo.seed = cfg.seed;
        EvalResult r = evaluate_policy(net, eo);
        csv << p.id << ',' << r.episodes << ',' << (eo.deterministic ? 1 : 0) << ',' << r.success_rate << ','
            << r.mean_return << ',' << r.std_return << ',' << r.mean_length << '\n';
      }
      write_csv(out_path(cfg, "policy_eval.csv"), cfg, csv.str());
      out << csv.str();
      return kExitOk;
    });
  });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << app.version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    int code = kExitOk;
    for (auto& a : actions) code = a();
    return code;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace digr::cli

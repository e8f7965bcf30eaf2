// Command-line front end: train, unlearn, evaluate, compare, backdoor, stability, config.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "muda/error.hpp"
#include "muda/harness.hpp"
#include "muda/io.hpp"

namespace fs = std::filesystem;
using namespace muda;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "experiment config (JSON); defaults apply when omitted");
  app->add_option("--seed", c.seed, "run only this seed");
  app->add_option("--out", c.out, "output directory (overrides output_dir)");
}

harness::ExperimentConfig resolve(const Common& c) {
  harness::ExperimentConfig cfg =
      c.config.empty() ? harness::default_config() : harness::load_config(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.validate();
  return cfg;
}

void print_summary(const harness::ComparisonTable& table) {
  for (const auto& s : table.summaries) {
    std::cout << s.method << ": seeds=" << s.seeds;
    if (s.seeds) {
      std::cout << " da=" << harness::format_double(s.mean.da)
                << " lp_f=" << harness::format_double(s.mean.lp_forget)
                << " lp_r=" << harness::format_double(s.mean.lp_retain)
                << " acc_f=" << harness::format_double(s.mean.acc_forget)
                << " acc_r=" << harness::format_double(s.mean.acc_retain)
                << " gap=" << harness::format_double(harness::feature_level_gap(s));
      if (s.mean.asr) std::cout << " asr=" << harness::format_double(*s.mean.asr);
    }
    std::cout << "\n";
  }
}

std::string tag(std::uint64_t seed) { return std::to_string(seed); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-level machine unlearning lab"};
  app.require_subcommand(1);

  Common train_opts, unlearn_opts, eval_opts, compare_opts, backdoor_opts, stability_opts;
  std::string unlearn_model, unlearn_method = "muda", eval_model;

  auto* train = app.add_subcommand("train", "train the original and retrained models for one seed");
  add_common(train, train_opts);

  auto* unlearn_cmd = app.add_subcommand("unlearn", "run one unlearning method from a checkpoint");
  add_common(unlearn_cmd, unlearn_opts);
  unlearn_cmd->add_option("--model", unlearn_model, "original checkpoint (trained when omitted)");
  unlearn_cmd->add_option("--method", unlearn_method, "method name from the config");

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on the seed's data");
  add_common(evaluate, eval_opts);
  evaluate->add_option("--model", eval_model, "checkpoint to evaluate")->required();

  auto* compare = app.add_subcommand("compare", "full comparison table over all seeds");
  add_common(compare, compare_opts);
  auto* backdoor = app.add_subcommand("backdoor", "backdoor-removal comparison table");
  add_common(backdoor, backdoor_opts);
  auto* stability = app.add_subcommand("stability", "probe curves over an extended budget");
  add_common(stability, stability_opts);
  Common config_opts;
  auto* show_config = app.add_subcommand("config", "print the effective config as JSON");
  add_common(show_config, config_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  // Config errors map to exit 1, everything else to exit 2.
  auto guarded = [](auto&& body) -> int {
    try {
      body();
      return 0;
    } catch (const Error& e) {
      std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
      return e.code() == ErrorCode::kConfigInvalid ? kExitConfig : kExitRuntime;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitRuntime;
    }
  };

  if (*train) {
    return guarded([&] {
      const auto cfg = resolve(train_opts);
      fs::create_directories(cfg.output_dir);
      const auto setup = harness::prepare_seed(cfg, 0);
      const auto dims = cfg.layer_dims();
      const auto s = harness::init_seed(setup.seed);
      const auto original = unlearn::train_original(setup.bundle, dims, cfg.train, s);
      const auto retrained = unlearn::retrain_oracle(setup.bundle, dims, cfg.train, s);
      nnet::save_checkpoint(original, cfg.output_dir / ("original_" + tag(setup.seed) + ".json"));
      nnet::save_checkpoint(retrained.model, cfg.output_dir / ("retrained_" + tag(setup.seed) + ".json"));
      io::write_file_atomic(cfg.output_dir / ("data_" + tag(setup.seed) + ".csv"),
                            data::dump_csv(setup.bundle));
      std::cout << "wrote checkpoints for seed " << setup.seed << " to " << cfg.output_dir << "\n";
    });
  }
  if (*unlearn_cmd) {
    return guarded([&] {
      const auto cfg = resolve(unlearn_opts);
      fs::create_directories(cfg.output_dir);
      const auto setup = harness::prepare_seed(cfg, 0);
      const auto& entry = cfg.method(unlearn_method);
      const nnet::MlpModel original =
          unlearn_model.empty()
              ? unlearn::train_original(setup.bundle, cfg.layer_dims(), cfg.train,
                                        harness::init_seed(setup.seed))
              : nnet::load_checkpoint(unlearn_model);
      nnet::MlpModel model = original;
      if (entry.cfg.method == unlearn::Method::kRetrain) {
        model = unlearn::retrain_oracle(setup.bundle, cfg.layer_dims(), cfg.train,
                                        harness::init_seed(setup.seed))
                    .model;
      } else {
        const auto res =
            unlearn::run_method(original, setup.bundle, harness::seeded_method(setup.seed, entry));
        io::write_file_atomic(cfg.output_dir / ("trace_" + entry.name + "_" + tag(setup.seed) + ".csv"),
                              res.trace.to_csv());
        model = res.model;
      }
      nnet::save_checkpoint(model, cfg.output_dir / ("unlearned_" + entry.name + "_" + tag(setup.seed) + ".json"));
      if (cfg.emit_features) {
        io::write_file_atomic(cfg.output_dir / ("features_" + entry.name + "_" + tag(setup.seed) + ".csv"),
                              harness::features_csv(model, setup.bundle));
      }
      std::cout << "wrote " << entry.name << " model for seed " << setup.seed << "\n";
    });
  }
  if (*evaluate) {
    return guarded([&] {
      const auto cfg = resolve(eval_opts);
      fs::create_directories(cfg.output_dir);
      const auto setup = harness::prepare_seed(cfg, 0);
      const auto model = nnet::load_checkpoint(eval_model);
      metrics::EvalConfig ecfg = cfg.eval;
      auto report = metrics::evaluate_model(model, setup.bundle, std::nullopt, ecfg);
      report.method = fs::path(eval_model).stem().string();
      report.seed = setup.seed;
      harness::ComparisonTable t;
      t.rows.push_back(report);
      t = harness::compare_to_retrained(std::move(t));
      const std::string text = t.to_csv();
      io::write_file_atomic(cfg.output_dir / "report.csv", text);
      std::cout << text;
    });
  }
  if (*compare) {
    return guarded([&] {
      const auto cfg = resolve(compare_opts);
      print_summary(harness::run_experiment(cfg));
      if (cfg.run_backdoor) {
        auto bcfg = cfg;
        bcfg.output_dir = cfg.output_dir / "backdoor";
        print_summary(harness::run_backdoor(bcfg));
      }
      if (cfg.run_stability) {
        auto scfg = cfg;
        scfg.output_dir = cfg.output_dir / "stability";
        harness::run_stability(scfg);
      }
    });
  }
  if (*backdoor) {
    return guarded([&] { print_summary(harness::run_backdoor(resolve(backdoor_opts))); });
  }
  if (*stability) {
    return guarded([&] {
      const auto cfg = resolve(stability_opts);
      for (const auto& c : harness::run_stability(cfg)) {
        const auto& last = c.points.back();
        std::cout << c.method << " seed " << c.seed << ": final lp_r="
                  << harness::format_double(last.lp_retain)
                  << " lp_f=" << harness::format_double(last.lp_forget) << "\n";
      }
    });
  }
  if (*show_config) {
    return guarded([&] { std::cout << harness::config_to_json(resolve(config_opts)).dump(2) << "\n"; });
  }
  return 0;
}

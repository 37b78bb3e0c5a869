// Experiment runner: run / ablate / dump-dataset / eval.
#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "svil/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeFailure = 1;
constexpr int kConfigError = 2;

svil::exp::ExperimentConfig load(const std::string& path) {
  auto config = svil::exp::load_config(path);
  svil::exp::apply_environment(config);
  config.validate();
  return config;
}

void print_eval(const svil::eval::EvalResult& r) {
  std::printf("mAP %.4f  rank1 %.4f  rank5 %.4f  rank10 %.4f  (excluded queries: %zu)\n", r.mAP, r.rank(1), r.rank(5),
              r.rank(10), r.excluded_queries);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Style-jitter meta-learning on synthetic re-identification data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(svil::exp::kVersion));

  std::string config_path;
  auto* run = app.add_subcommand("run", "Train and evaluate one experiment");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();

  std::vector<std::string> toggles;
  auto* ablate = app.add_subcommand("ablate", "Run every combination of the given toggles");
  ablate->add_option("config", config_path, "Experiment config (JSON)")->required();
  ablate->add_option("--toggles", toggles,
                     "sjm, maml, loss, weight_mode, cross_domain, sjm_stage; name=v1,v2 picks values");

  std::string dump_stem;
  auto* dump = app.add_subcommand("dump-dataset", "Write the configured dataset snapshot");
  dump->add_option("config", config_path, "Experiment config (JSON)")->required();
  dump->add_option("-o,--output", dump_stem, "Snapshot stem (default: <output_dir>/dataset)");

  std::string checkpoint, dataset;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset snapshot's target domain");
  eval->add_option("checkpoint", checkpoint, "Checkpoint stem")->required();
  eval->add_option("dataset", dataset, "Dataset snapshot stem")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) {
      const auto config = load(config_path);
      const auto summary = svil::exp::run_experiment(config);
      std::cout << summary.dump(2) << "\n";
    } else if (*ablate) {
      const auto config = load(config_path);
      std::vector<svil::exp::Toggle> parsed;
      for (const auto& t : toggles) parsed.push_back(svil::exp::parse_toggle(t, config));
      for (const auto& r : svil::exp::ablate(config, parsed)) {
        std::printf("%-40s ", r.label.c_str());
        print_eval(r.outcome.final_eval);
      }
    } else if (*dump) {
      const auto config = load(config_path);
      const auto prepared = svil::exp::prepare(config);
      const std::filesystem::path stem = dump_stem.empty() ? config.output_dir / "dataset" : std::filesystem::path(dump_stem);
      if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
      svil::synth::save_dataset(prepared.data, stem);
      std::printf("wrote %s.json / %s.bin (%zu samples)\n", stem.c_str(), stem.c_str(), prepared.data.samples.size());
    } else if (*eval) {
      print_eval(svil::exp::evaluate_checkpoint(checkpoint, dataset));
    }
  } catch (const svil::exp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kOk;
}

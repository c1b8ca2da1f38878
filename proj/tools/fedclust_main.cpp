#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "fedclust/harness.hpp"

namespace {

void print_summary(const std::string& label, const fedclust::PresetSummary& summary) {
  std::printf("%s: %zu run(s)\n", label.c_str(), summary.runs.size());
  for (std::size_t i = 0; i < summary.runs.size(); ++i) {
    const fedclust::RunArtifacts& run = summary.runs[i];
    std::printf("  run%zu  best val %.4f  best test %.4f  final k %d\n", i, run.best_val,
                run.best_test, run.final_clusters);
  }
  std::printf("  mean  best val %.4f +/- %.4f  best test %.4f +/- %.4f  final k %.2f +/- %.2f\n",
              summary.mean_best_val, summary.std_best_val, summary.mean_best_test,
              summary.std_best_test, summary.mean_final_clusters, summary.std_final_clusters);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic clustered federated learning simulator"};
  app.require_subcommand(1);

  std::string run_config, run_preset_name, run_out;
  CLI::App* run_cmd = app.add_subcommand("run", "execute an experiment config or builtin preset");
  run_cmd->add_option("--config", run_config, "experiment config file (json)");
  run_cmd->add_option("--preset", run_preset_name, "builtin preset name (see list-presets)");
  run_cmd->add_option("--out", run_out, "output directory")->required();

  std::string theory_config, theory_out;
  CLI::App* theory_cmd =
      app.add_subcommand("theory", "run the linear-representation convergence check");
  theory_cmd->add_option("--config", theory_config, "spec file (json); defaults when omitted");
  theory_cmd->add_option("--out", theory_out, "output directory")->required();

  std::string ablate_config, ablate_metric = "ascp", ablate_out;
  CLI::App* ablate_cmd =
      app.add_subcommand("ablate", "sweep distance-metric variants over one config");
  ablate_cmd->add_option("--config", ablate_config, "experiment config file (json)")->required();
  ablate_cmd->add_option("--metric", ablate_metric, "base metric: ascp or cscp");
  ablate_cmd->add_option("--out", ablate_out, "output directory")->required();

  CLI::App* list_cmd = app.add_subcommand("list-presets", "print builtin preset names");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      fedclust::ExperimentPreset preset;
      if (!run_config.empty()) {
        preset = fedclust::parse_config(run_config);
      } else if (!run_preset_name.empty()) {
        const fedclust::ExperimentPreset* found = fedclust::find_preset(run_preset_name);
        if (found == nullptr) {
          std::cerr << "unknown preset: " << run_preset_name << "\n";
          return 1;
        }
        preset = *found;
      } else {
        std::cerr << "run needs --config or --preset\n";
        return 1;
      }
      fedclust::PresetSummary summary = fedclust::run_preset(preset, run_out);
      print_summary(preset.name, summary);
    } else if (theory_cmd->parsed()) {
      fedclust::TheorySpec spec;
      if (!theory_config.empty()) spec = fedclust::parse_theory_config(theory_config);
      fedclust::ConvergenceReport report = fedclust::run_theory(spec);
      fedclust::write_theory_outputs(report, theory_out);
      std::printf("%s: fitted ratio %.6f vs bound %.6f (%s)\n", report.pass ? "pass" : "fail",
                  report.fitted_ratio, std::max(report.bound_factor, report.bound_factor_sq),
                  report.detail.c_str());
    } else if (ablate_cmd->parsed()) {
      const fedclust::ExperimentPreset base = fedclust::parse_config(ablate_config);
      const std::vector<std::pair<std::string, std::vector<std::string>>> variants = {
          {"base", {}}, {"gradcos", {"gradcos"}}, {"noconf", {"noconf"}}, {"mean", {"mean"}}};
      for (const auto& [tag, ablations] : variants) {
        fedclust::ExperimentPreset variant = base;
        variant.name = base.name + "-" + tag;
        variant.run.metric = fedclust::MetricSpec::parse(ablate_metric, ablations);
        fedclust::PresetSummary summary =
            fedclust::run_preset(variant, std::filesystem::path(ablate_out) / tag);
        print_summary(variant.name, summary);
      }
    } else if (list_cmd->parsed()) {
      for (const fedclust::ExperimentPreset& p : fedclust::builtin_presets()) {
        std::printf("%-18s repeat=%d  %s\n", p.name.c_str(), p.repeat,
                    p.expected_properties.empty() ? "" : p.expected_properties.front().c_str());
      }
    }
  } catch (const fedclust::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fedclust/datagen.hpp"
#include "fedclust/fedsim.hpp"
#include "fedclust/theory.hpp"

namespace fedclust {

struct ExperimentPreset {
  std::string name = "experiment";
  ScenarioSpec scenario;
  RunConfig run;
  int repeat = 1;
  std::vector<std::string> expected_properties;

  void validate() const;
};

// Strict parsing: unknown keys are rejected by name, type errors name the
// offending key, defaults fill anything omitted.
ExperimentPreset parse_config(const std::filesystem::path& path);
ExperimentPreset parse_config_text(const std::string& text, const std::string& origin);
std::string serialize_preset(const ExperimentPreset& preset);

TheorySpec parse_theory_config(const std::filesystem::path& path);
TheorySpec parse_theory_config_text(const std::string& text, const std::string& origin);
std::string serialize_theory_spec(const TheorySpec& spec);

const std::vector<ExperimentPreset>& builtin_presets();
const ExperimentPreset* find_preset(const std::string& name);

struct RunArtifacts {
  std::uint64_t seed = 0;
  std::vector<RoundMetrics> metrics;
  double best_val = 0.0;
  double best_test = 0.0;
  double final_val = 0.0;
  double final_test = 0.0;
  int final_clusters = 1;
};

struct PresetSummary {
  std::vector<RunArtifacts> runs;
  double mean_best_val = 0.0, std_best_val = 0.0;
  double mean_best_test = 0.0, std_best_test = 0.0;
  double mean_final_clusters = 0.0, std_final_clusters = 0.0;
};

// Run `repeat` seeded replicates (replicate r offsets both the scenario and
// run seeds by r). Writes run<r>/metrics.jsonl + run<r>/summary.csv per
// replicate and an aggregate summary.csv, all atomically. Pass an empty
// out_dir to skip writing. Partial results are flushed before errors
// propagate.
PresetSummary run_preset(const ExperimentPreset& preset, const std::filesystem::path& out_dir);

RunArtifacts summarize_run(std::uint64_t seed, std::vector<RoundMetrics> metrics);

std::string metrics_to_jsonl(const std::vector<RoundMetrics>& rounds);
std::string run_summary_csv(const RunArtifacts& run);
std::string aggregate_summary_csv(const PresetSummary& summary);

void write_file_atomic(const std::filesystem::path& path, const std::string& content);

void write_theory_outputs(const ConvergenceReport& report, const std::filesystem::path& out_dir);

}  // namespace fedclust

#include "fedclust/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace fedclust {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& origin, const std::string& msg) {
  throw std::invalid_argument(origin + ": " + msg);
}

void reject_unknown(const json& obj, const std::string& origin,
                    std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* key : allowed) {
      if (it.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) fail(origin, "unknown key `" + it.key() + "`");
  }
}

double read_number(const json& obj, const std::string& origin, const char* key, double fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) fail(origin, std::string("key `") + key + "` must be a number");
  return v.get<double>();
}

int read_int(const json& obj, const std::string& origin, const char* key, int fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) fail(origin, std::string("key `") + key + "` must be an integer");
  return v.get<int>();
}

std::uint64_t read_seed(const json& obj, const std::string& origin, const char* key,
                        std::uint64_t fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) fail(origin, std::string("key `") + key + "` must be an integer");
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  long long raw = v.get<long long>();
  if (raw < 0) fail(origin, std::string("key `") + key + "` must be non-negative");
  return static_cast<std::uint64_t>(raw);
}

std::string read_string(const json& obj, const std::string& origin, const char* key,
                        std::string fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) fail(origin, std::string("key `") + key + "` must be a string");
  return v.get<std::string>();
}

ScenarioSpec parse_scenario(const json& obj, const std::string& origin) {
  reject_unknown(obj, origin,
                 {"m_clients", "n_classes", "samples_per_client", "feature_dim", "lda_alpha",
                  "concepts", "beta", "feature_shift_kinds", "noise_kind", "noise_rate", "seed"});
  ScenarioSpec spec;
  spec.num_clients = read_int(obj, origin, "m_clients", spec.num_clients);
  spec.num_classes = read_int(obj, origin, "n_classes", spec.num_classes);
  spec.samples_per_client = read_int(obj, origin, "samples_per_client", spec.samples_per_client);
  spec.feature_dim = read_int(obj, origin, "feature_dim", spec.feature_dim);
  spec.lda_alpha = read_number(obj, origin, "lda_alpha", spec.lda_alpha);
  spec.concept_count = read_int(obj, origin, "concepts", spec.concept_count);
  spec.beta = read_number(obj, origin, "beta", spec.beta);
  spec.feature_shift_kinds = read_int(obj, origin, "feature_shift_kinds", spec.feature_shift_kinds);
  spec.noise_kind =
      noise_kind_from_string(read_string(obj, origin, "noise_kind", to_string(spec.noise_kind)));
  spec.noise_rate = read_number(obj, origin, "noise_rate", spec.noise_rate);
  spec.master_seed = read_seed(obj, origin, "seed", spec.master_seed);
  return spec;
}

RunConfig parse_run(const json& obj, const std::string& origin) {
  reject_unknown(obj, origin,
                 {"rounds", "clients_per_round", "local_iters", "local_lr", "server_mode",
                  "server_lr", "initial_clusters", "formulation", "tier2", "metric", "ablation",
                  "rho", "mu_tilde", "model", "hidden_dim", "feature_out_dim", "batch_size",
                  "seed", "threads"});
  RunConfig run;
  run.rounds = read_int(obj, origin, "rounds", run.rounds);
  run.clients_per_round = read_int(obj, origin, "clients_per_round", run.clients_per_round);
  run.local_iters = read_int(obj, origin, "local_iters", run.local_iters);
  run.local_lr = read_number(obj, origin, "local_lr", run.local_lr);
  run.server_mode =
      server_mode_from_string(read_string(obj, origin, "server_mode", to_string(run.server_mode)));
  run.server_lr = read_number(obj, origin, "server_lr", run.server_lr);
  run.initial_clusters = read_int(obj, origin, "initial_clusters", run.initial_clusters);
  run.tier1 =
      formulation_from_string(read_string(obj, origin, "formulation", to_string(run.tier1)));
  run.tier2 = tier2_from_string(read_string(obj, origin, "tier2", to_string(run.tier2)));

  std::string metric_base = read_string(obj, origin, "metric", to_string(run.metric.base));
  std::vector<std::string> ablations = run.metric.ablation_names();
  if (obj.contains("ablation")) {
    const json& arr = obj.at("ablation");
    if (!arr.is_array()) fail(origin, "key `ablation` must be an array of strings");
    ablations.clear();
    for (const json& item : arr) {
      if (!item.is_string()) fail(origin, "key `ablation` must be an array of strings");
      ablations.push_back(item.get<std::string>());
    }
  }
  try {
    run.metric = MetricSpec::parse(metric_base, ablations);
  } catch (const std::invalid_argument& e) {
    fail(origin, e.what());
  }

  if (obj.contains("rho")) {
    const json& v = obj.at("rho");
    if (v.is_string()) {
      const std::string s = v.get<std::string>();
      if (s == "inf" || s == "infinity") {
        run.rho = std::numeric_limits<double>::infinity();
      } else {
        fail(origin, "key `rho` must be a number or \"inf\"");
      }
    } else if (v.is_number()) {
      run.rho = v.get<double>();
    } else {
      fail(origin, "key `rho` must be a number or \"inf\"");
    }
  }

  run.mu_tilde = read_number(obj, origin, "mu_tilde", run.mu_tilde);
  run.model = extractor_kind_from_string(read_string(obj, origin, "model", to_string(run.model)));
  run.hidden_dim = read_int(obj, origin, "hidden_dim", run.hidden_dim);
  run.feature_out_dim = read_int(obj, origin, "feature_out_dim", run.feature_out_dim);
  run.batch_size = read_int(obj, origin, "batch_size", run.batch_size);
  run.seed = read_seed(obj, origin, "seed", run.seed);
  run.threads = read_int(obj, origin, "threads", run.threads);
  return run;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct MeanStd {
  double mean = 0.0;
  double sd = 0.0;
};

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd out;
  if (values.empty()) return out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  if (values.size() < 2) return out;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return out;
}

constexpr const char* kSummaryHeader = "stat,best_val,best_test,final_val,final_test,final_k\n";

void append_stat_row(std::string& csv, const std::string& stat, double best_val, double best_test,
                     double final_val, double final_test, const std::string& final_k) {
  csv += stat;
  csv += ',';
  csv += fmt_double(best_val);
  csv += ',';
  csv += fmt_double(best_test);
  csv += ',';
  csv += fmt_double(final_val);
  csv += ',';
  csv += fmt_double(final_test);
  csv += ',';
  csv += final_k;
  csv += '\n';
}

}  // namespace

void ExperimentPreset::validate() const {
  if (name.empty()) throw std::invalid_argument("preset name must be non-empty");
  if (repeat < 1) throw std::invalid_argument("repeat must be >= 1");
  scenario.validate();
  run.validate(scenario.num_clients);
}

ExperimentPreset parse_config_text(const std::string& text, const std::string& origin) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(origin + ": " + e.what());
  }
  if (!root.is_object()) fail(origin, "top level must be an object");
  reject_unknown(root, origin, {"name", "scenario", "run", "repeat", "expected_properties"});

  ExperimentPreset preset;
  preset.name = read_string(root, origin, "name", preset.name);
  if (root.contains("scenario")) {
    const json& s = root.at("scenario");
    if (!s.is_object()) fail(origin, "key `scenario` must be an object");
    preset.scenario = parse_scenario(s, origin);
  }
  if (root.contains("run")) {
    const json& r = root.at("run");
    if (!r.is_object()) fail(origin, "key `run` must be an object");
    preset.run = parse_run(r, origin);
  }
  preset.repeat = read_int(root, origin, "repeat", preset.repeat);
  if (root.contains("expected_properties")) {
    const json& arr = root.at("expected_properties");
    if (!arr.is_array()) fail(origin, "key `expected_properties` must be an array of strings");
    for (const json& item : arr) {
      if (!item.is_string()) fail(origin, "key `expected_properties` must be an array of strings");
      preset.expected_properties.push_back(item.get<std::string>());
    }
  }
  try {
    preset.validate();
  } catch (const std::invalid_argument& e) {
    fail(origin, e.what());
  }
  return preset;
}

ExperimentPreset parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open config file: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.filename().string());
}

std::string serialize_preset(const ExperimentPreset& preset) {
  ordered_json root;
  root["name"] = preset.name;

  ordered_json s;
  s["m_clients"] = preset.scenario.num_clients;
  s["n_classes"] = preset.scenario.num_classes;
  s["samples_per_client"] = preset.scenario.samples_per_client;
  s["feature_dim"] = preset.scenario.feature_dim;
  s["lda_alpha"] = preset.scenario.lda_alpha;
  s["concepts"] = preset.scenario.concept_count;
  s["beta"] = preset.scenario.beta;
  s["feature_shift_kinds"] = preset.scenario.feature_shift_kinds;
  s["noise_kind"] = to_string(preset.scenario.noise_kind);
  s["noise_rate"] = preset.scenario.noise_rate;
  s["seed"] = preset.scenario.master_seed;
  root["scenario"] = s;

  ordered_json r;
  r["rounds"] = preset.run.rounds;
  r["clients_per_round"] = preset.run.clients_per_round;
  r["local_iters"] = preset.run.local_iters;
  r["local_lr"] = preset.run.local_lr;
  r["server_mode"] = to_string(preset.run.server_mode);
  r["server_lr"] = preset.run.server_lr;
  r["initial_clusters"] = preset.run.initial_clusters;
  r["formulation"] = to_string(preset.run.tier1);
  r["tier2"] = to_string(preset.run.tier2);
  r["metric"] = to_string(preset.run.metric.base);
  r["ablation"] = preset.run.metric.ablation_names();
  if (std::isinf(preset.run.rho)) {
    r["rho"] = "inf";
  } else {
    r["rho"] = preset.run.rho;
  }
  r["mu_tilde"] = preset.run.mu_tilde;
  r["model"] = to_string(preset.run.model);
  r["hidden_dim"] = preset.run.hidden_dim;
  r["feature_out_dim"] = preset.run.feature_out_dim;
  r["batch_size"] = preset.run.batch_size;
  r["seed"] = preset.run.seed;
  r["threads"] = preset.run.threads;
  root["run"] = r;

  root["repeat"] = preset.repeat;
  root["expected_properties"] = preset.expected_properties;
  return root.dump(2) + "\n";
}

TheorySpec parse_theory_config_text(const std::string& text, const std::string& origin) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(origin + ": " + e.what());
  }
  if (!root.is_object()) fail(origin, "top level must be an object");
  reject_unknown(root, origin,
                 {"ambient_dim", "subspace_dim", "clusters", "clients", "samples_per_client",
                  "noise", "eta", "iterations", "init_dist", "seed", "weight_mode",
                  "cluster_proportions"});
  TheorySpec spec;
  spec.ambient_dim = read_int(root, origin, "ambient_dim", spec.ambient_dim);
  spec.subspace_dim = read_int(root, origin, "subspace_dim", spec.subspace_dim);
  spec.clusters = read_int(root, origin, "clusters", spec.clusters);
  spec.clients = read_int(root, origin, "clients", spec.clients);
  spec.samples_per_client = read_int(root, origin, "samples_per_client", spec.samples_per_client);
  spec.noise = read_number(root, origin, "noise", spec.noise);
  spec.eta = read_number(root, origin, "eta", spec.eta);
  spec.iterations = read_int(root, origin, "iterations", spec.iterations);
  spec.init_dist = read_number(root, origin, "init_dist", spec.init_dist);
  spec.seed = read_seed(root, origin, "seed", spec.seed);
  spec.weight_mode = theory_weight_mode_from_string(
      read_string(root, origin, "weight_mode", to_string(spec.weight_mode)));
  if (root.contains("cluster_proportions")) {
    const json& arr = root.at("cluster_proportions");
    if (!arr.is_array()) fail(origin, "key `cluster_proportions` must be an array of numbers");
    for (const json& item : arr) {
      if (!item.is_number()) fail(origin, "key `cluster_proportions` must be an array of numbers");
      spec.cluster_proportions.push_back(item.get<double>());
    }
  }
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    fail(origin, e.what());
  }
  return spec;
}

TheorySpec parse_theory_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open config file: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_theory_config_text(buf.str(), path.filename().string());
}

std::string serialize_theory_spec(const TheorySpec& spec) {
  ordered_json root;
  root["ambient_dim"] = spec.ambient_dim;
  root["subspace_dim"] = spec.subspace_dim;
  root["clusters"] = spec.clusters;
  root["clients"] = spec.clients;
  root["samples_per_client"] = spec.samples_per_client;
  root["noise"] = spec.noise;
  root["eta"] = spec.eta;
  root["iterations"] = spec.iterations;
  root["init_dist"] = spec.init_dist;
  root["seed"] = spec.seed;
  root["weight_mode"] = to_string(spec.weight_mode);
  root["cluster_proportions"] = spec.cluster_proportions;
  return root.dump(2) + "\n";
}

const std::vector<ExperimentPreset>& builtin_presets() {
  static const std::vector<ExperimentPreset> presets = [] {
    std::vector<ExperimentPreset> list;

    {
      ExperimentPreset p;
      p.name = "single-client";
      p.scenario.num_clients = 1;
      p.scenario.num_classes = 2;
      p.scenario.samples_per_client = 128;
      p.scenario.feature_dim = 8;
      p.scenario.concept_count = 1;
      p.scenario.master_seed = 7;
      p.run.rounds = 50;
      p.run.local_iters = 2;
      p.run.local_lr = 0.1;
      p.run.rho = std::numeric_limits<double>::infinity();
      p.run.seed = 7;
      p.expected_properties = {"near-perfect separable fit"};
      list.push_back(p);
    }

    {
      ExperimentPreset p;
      p.name = "concept-recovery";
      p.scenario.num_clients = 30;
      p.scenario.num_classes = 3;
      p.scenario.samples_per_client = 96;
      p.scenario.feature_dim = 12;
      p.scenario.lda_alpha = 10.0;
      p.scenario.concept_count = 3;
      p.scenario.beta = 1.0;
      p.scenario.master_seed = 11;
      p.run.rounds = 40;
      p.run.local_iters = 2;
      p.run.local_lr = 0.1;
      p.run.initial_clusters = 1;
      p.run.metric = MetricSpec::parse("cscp", {});
      p.run.rho = 0.3;
      p.run.mu_tilde = 0.4;
      p.run.seed = 11;
      p.repeat = 3;
      p.expected_properties = {"splits recover the planted concept count",
                               "adaptive beats single-model accuracy"};
      list.push_back(p);
    }

    {
      ExperimentPreset p;
      p.name = "feature-clusters";
      p.scenario.num_clients = 24;
      p.scenario.num_classes = 4;
      p.scenario.samples_per_client = 96;
      p.scenario.feature_dim = 12;
      p.scenario.lda_alpha = 10.0;
      p.scenario.concept_count = 1;
      p.scenario.beta = 0.0;
      p.scenario.feature_shift_kinds = 3;
      p.scenario.master_seed = 13;
      p.run.rounds = 40;
      p.run.local_iters = 2;
      p.run.local_lr = 0.1;
      p.run.metric = MetricSpec::parse("ascp", {});
      p.run.rho = 0.1;
      p.run.mu_tilde = 0.4;
      p.run.seed = 13;
      p.repeat = 3;
      p.expected_properties = {"feature-only heterogeneity splits under the augmented metric"};
      list.push_back(p);
    }

    {
      ExperimentPreset p;
      p.name = "label-noise-fedrc";
      p.scenario.num_clients = 20;
      p.scenario.num_classes = 4;
      p.scenario.samples_per_client = 96;
      p.scenario.feature_dim = 12;
      p.scenario.concept_count = 2;
      p.scenario.beta = 0.5;
      p.scenario.noise_kind = NoiseKind::symflip;
      p.scenario.noise_rate = 0.2;
      p.scenario.master_seed = 17;
      p.run.rounds = 40;
      p.run.local_iters = 2;
      p.run.local_lr = 0.1;
      p.run.tier1 = FormulationKind::ratio;
      p.run.initial_clusters = 2;
      p.run.rho = std::numeric_limits<double>::infinity();
      p.run.mu_tilde = 0.4;
      p.run.seed = 17;
      p.expected_properties = {"ratio scoring stays stable under label noise"};
      list.push_back(p);
    }

    {
      ExperimentPreset p;
      p.name = "hard-ifca";
      p.scenario.num_clients = 20;
      p.scenario.num_classes = 3;
      p.scenario.samples_per_client = 96;
      p.scenario.feature_dim = 12;
      p.scenario.concept_count = 3;
      p.scenario.beta = 1.0;
      p.scenario.master_seed = 19;
      p.run.rounds = 40;
      p.run.local_iters = 2;
      p.run.local_lr = 0.1;
      p.run.tier2 = Tier2Kind::ifca;
      p.run.initial_clusters = 3;
      p.run.rho = std::numeric_limits<double>::infinity();
      p.run.seed = 19;
      p.expected_properties = {"hard loss-based assignment tracks planted concepts"};
      list.push_back(p);
    }

    {
      ExperimentPreset p;
      p.name = "hard-fesem";
      p.scenario.num_clients = 20;
      p.scenario.num_classes = 3;
      p.scenario.samples_per_client = 96;
      p.scenario.feature_dim = 12;
      p.scenario.concept_count = 3;
      p.scenario.beta = 1.0;
      p.scenario.master_seed = 23;
      p.run.rounds = 40;
      p.run.local_iters = 2;
      p.run.local_lr = 0.1;
      p.run.tier2 = Tier2Kind::fesem;
      p.run.initial_clusters = 3;
      p.run.rho = std::numeric_limits<double>::infinity();
      p.run.seed = 23;
      p.expected_properties = {"hard parameter-distance assignment stays feasible"};
      list.push_back(p);
    }

    for (const ExperimentPreset& p : list) p.validate();
    return list;
  }();
  return presets;
}

const ExperimentPreset* find_preset(const std::string& name) {
  for (const ExperimentPreset& p : builtin_presets()) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

RunArtifacts summarize_run(std::uint64_t seed, std::vector<RoundMetrics> metrics) {
  RunArtifacts art;
  art.seed = seed;
  art.metrics = std::move(metrics);
  art.final_clusters = 0;
  for (const RoundMetrics& m : art.metrics) {
    art.best_val = std::max(art.best_val, m.val_acc);
    art.best_test = std::max(art.best_test, m.test_acc);
  }
  if (!art.metrics.empty()) {
    art.final_val = art.metrics.back().val_acc;
    art.final_test = art.metrics.back().test_acc;
    art.final_clusters = art.metrics.back().clusters;
  }
  return art;
}

std::string metrics_to_jsonl(const std::vector<RoundMetrics>& rounds) {
  std::string out;
  for (const RoundMetrics& m : rounds) {
    ordered_json line;
    line["round"] = m.round;
    line["k"] = m.clusters;
    line["val_acc"] = m.val_acc;
    line["test_acc"] = m.test_acc;
    line["objective"] = m.objective;
    line["max_dist"] = m.max_dist;
    line["splits"] = m.splits;
    line["removals"] = m.removals;
    out += line.dump();
    out += '\n';
  }
  return out;
}

std::string run_summary_csv(const RunArtifacts& run) {
  std::string csv = kSummaryHeader;
  append_stat_row(csv, "run", run.best_val, run.best_test, run.final_val, run.final_test,
                  std::to_string(run.final_clusters));
  return csv;
}

std::string aggregate_summary_csv(const PresetSummary& summary) {
  std::string csv = kSummaryHeader;
  for (std::size_t i = 0; i < summary.runs.size(); ++i) {
    const RunArtifacts& run = summary.runs[i];
    append_stat_row(csv, "run" + std::to_string(i), run.best_val, run.best_test, run.final_val,
                    run.final_test, std::to_string(run.final_clusters));
  }
  std::vector<double> fv, ft;
  for (const RunArtifacts& run : summary.runs) {
    fv.push_back(run.final_val);
    ft.push_back(run.final_test);
  }
  const MeanStd mfv = mean_std(fv);
  const MeanStd mft = mean_std(ft);
  append_stat_row(csv, "mean", summary.mean_best_val, summary.mean_best_test, mfv.mean, mft.mean,
                  fmt_double(summary.mean_final_clusters));
  append_stat_row(csv, "std", summary.std_best_val, summary.std_best_test, mfv.sd, mft.sd,
                  fmt_double(summary.std_final_clusters));
  return csv;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

void fill_aggregate_stats(PresetSummary& summary) {
  std::vector<double> bv, bt, fk;
  for (const RunArtifacts& run : summary.runs) {
    bv.push_back(run.best_val);
    bt.push_back(run.best_test);
    fk.push_back(static_cast<double>(run.final_clusters));
  }
  const MeanStd sv = mean_std(bv);
  const MeanStd st = mean_std(bt);
  const MeanStd sk = mean_std(fk);
  summary.mean_best_val = sv.mean;
  summary.std_best_val = sv.sd;
  summary.mean_best_test = st.mean;
  summary.std_best_test = st.sd;
  summary.mean_final_clusters = sk.mean;
  summary.std_final_clusters = sk.sd;
}

void write_run_outputs(const std::filesystem::path& out_dir, int run_index,
                       const RunArtifacts& art) {
  const std::filesystem::path run_dir = out_dir / ("run" + std::to_string(run_index));
  std::filesystem::create_directories(run_dir);
  write_file_atomic(run_dir / "metrics.jsonl", metrics_to_jsonl(art.metrics));
  write_file_atomic(run_dir / "summary.csv", run_summary_csv(art));
}

}  // namespace

PresetSummary run_preset(const ExperimentPreset& preset, const std::filesystem::path& out_dir) {
  preset.validate();
  const bool writing = !out_dir.empty();
  if (writing) std::filesystem::create_directories(out_dir);

  PresetSummary summary;
  for (int r = 0; r < preset.repeat; ++r) {
    ScenarioSpec sspec = preset.scenario;
    sspec.master_seed += static_cast<std::uint64_t>(r);
    RunConfig rconf = preset.run;
    rconf.seed += static_cast<std::uint64_t>(r);

    Engine engine(rconf, generate_scenario(sspec));
    std::vector<RoundMetrics> rounds;
    rounds.reserve(static_cast<std::size_t>(rconf.rounds));
    try {
      for (int t = 0; t < rconf.rounds; ++t) rounds.push_back(engine.round_step());
    } catch (...) {
      // flush whatever completed so a diverged run still leaves evidence
      summary.runs.push_back(summarize_run(rconf.seed, std::move(rounds)));
      fill_aggregate_stats(summary);
      if (writing) {
        write_run_outputs(out_dir, r, summary.runs.back());
        write_file_atomic(out_dir / "summary.csv", aggregate_summary_csv(summary));
      }
      throw;
    }
    summary.runs.push_back(summarize_run(rconf.seed, std::move(rounds)));
    if (writing) write_run_outputs(out_dir, r, summary.runs.back());
  }

  fill_aggregate_stats(summary);
  if (writing) write_file_atomic(out_dir / "summary.csv", aggregate_summary_csv(summary));
  return summary;
}

void write_theory_outputs(const ConvergenceReport& report, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);

  const int clusters = static_cast<int>(report.cluster_counts.size());
  std::string csv = "iter,dist";
  for (int k = 0; k < clusters; ++k) csv += ",resid_" + std::to_string(k);
  csv += '\n';
  for (std::size_t t = 0; t < report.dist_trace.size(); ++t) {
    csv += std::to_string(t);
    csv += ',';
    csv += fmt_double(report.dist_trace[t]);
    if (t >= 1 && t - 1 < report.residual_trace.size()) {
      const Eigen::VectorXd& resid = report.residual_trace[t - 1];
      for (int k = 0; k < clusters; ++k) {
        csv += ',';
        csv += k < resid.size() ? fmt_double(resid[k]) : std::string();
      }
    } else {
      for (int k = 0; k < clusters; ++k) csv += ',';
    }
    csv += '\n';
  }
  write_file_atomic(out_dir / "trace.csv", csv);

  ordered_json rep;
  rep["pass"] = report.pass;
  rep["fitted_ratio"] = report.fitted_ratio;
  rep["bound_factor"] = report.bound_factor;
  rep["bound_factor_sq"] = report.bound_factor_sq;
  rep["converged"] = report.converged;
  rep["sample_regime_ok"] = report.sample_regime_ok;
  rep["eta"] = report.eta;
  rep["c_min"] = report.c_min;
  rep["c_max"] = report.c_max;
  rep["c_min_sq"] = report.c_min_sq;
  rep["c_max_sq"] = report.c_max_sq;
  rep["E0"] = report.E0;
  rep["sigma_min_star"] = report.sigma_min_star;
  rep["kappa"] = report.kappa;
  rep["final_dist"] = report.dist_trace.empty() ? 0.0 : report.dist_trace.back();
  rep["iterations"] = report.dist_trace.empty() ? 0 : report.dist_trace.size() - 1;
  rep["theta_errors"] = report.theta_errors;
  rep["detail"] = report.detail;
  write_file_atomic(out_dir / "report.json", rep.dump(2) + "\n");
}

}  // namespace fedclust

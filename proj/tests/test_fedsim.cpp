#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "fedclust/datagen.hpp"
#include "fedclust/fedsim.hpp"
#include "fedclust/models.hpp"
#include "fedclust/rng.hpp"

using namespace fedclust;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ScenarioSpec blob_spec(int clients, int classes, int spc, std::uint64_t seed) {
  ScenarioSpec s;
  s.num_clients = clients;
  s.num_classes = classes;
  s.samples_per_client = spc;
  s.feature_dim = 6;
  s.lda_alpha = 1e6;
  s.concept_count = 1;
  s.beta = 0.0;
  s.feature_shift_kinds = 1;
  s.master_seed = seed;
  return s;
}

ScenarioSpec concept_spec(int clients, std::uint64_t seed) {
  ScenarioSpec s;
  s.num_clients = clients;
  s.num_classes = 6;
  s.samples_per_client = 60;
  s.feature_dim = 6;
  s.lda_alpha = 1e6;
  s.concept_count = 3;
  s.beta = 1.0;  // every label participates in the concept permutation
  s.feature_shift_kinds = 1;
  s.master_seed = seed;
  return s;
}

RunConfig base_config() {
  RunConfig c;
  c.rounds = 50;
  c.rho = kInf;
  c.seed = 5;
  c.threads = 1;
  return c;
}

bool same_metrics(const RoundMetrics& a, const RoundMetrics& b) {
  return a.round == b.round && a.clusters == b.clusters && a.val_acc == b.val_acc &&
         a.test_acc == b.test_acc && a.objective == b.objective && a.max_dist == b.max_dist &&
         a.mean_dist == b.mean_dist && a.splits == b.splits && a.removals == b.removals;
}

// standalone softmax-head training on one pooled batch, shared budget for
// the clustering-versus-pooling comparison
std::pair<FeatureExtractor, ClusterHead> train_single_head(const DataBatch& batch, int dim,
                                                           int classes, std::uint64_t key,
                                                           int steps, double lr) {
  FeatureExtractor phi = FeatureExtractor::init(ExtractorKind::linear, dim, 0, dim, key);
  std::vector<ClusterHead> heads{ClusterHead::init(dim, classes, derive_key(key, "head"))};
  Formulation f(FormulationKind::conditional, 1, classes);
  const Eigen::MatrixXd coeff =
      Eigen::MatrixXd::Constant(batch.size(), 1, 1.0 / batch.size());
  for (int t = 0; t < steps; ++t) {
    LikelihoodResult lr_res = likelihood_and_grads(phi, heads, batch, coeff, f);
    sgd_step(phi, heads, lr_res.grads, lr);
  }
  return {phi, heads[0]};
}

double head_accuracy(const FeatureExtractor& phi, const ClusterHead& head,
                     const DataBatch& batch) {
  const Eigen::MatrixXd proba = predict_proba_batch(phi, head, batch.X);
  long hits = 0;
  for (int j = 0; j < batch.size(); ++j) {
    int best = 0;
    for (int c = 1; c < proba.cols(); ++c) {
      if (proba(j, c) > proba(j, best)) best = c;
    }
    if (best == batch.y(j)) ++hits;
  }
  return static_cast<double>(hits) / batch.size();
}

DataBatch concat_batches(const std::vector<const DataBatch*>& parts) {
  long total = 0;
  for (const DataBatch* p : parts) total += p->size();
  DataBatch out;
  out.X.resize(total, parts.front()->X.cols());
  out.y.resize(total);
  long at = 0;
  for (const DataBatch* p : parts) {
    out.X.middleRows(at, p->size()) = p->X;
    out.y.segment(at, p->size()) = p->y;
    at += p->size();
  }
  return out;
}

}  // namespace

TEST_CASE("run config validation") {
  const Scenario sc = generate_scenario(blob_spec(3, 2, 30, 1));
  RunConfig c = base_config();
  c.rounds = -1;
  CHECK_THROWS_AS(Engine(c, sc), std::invalid_argument);
  c = base_config();
  c.clients_per_round = 4;  // more than the 3 clients
  CHECK_THROWS_AS(Engine(c, sc), std::invalid_argument);
  c = base_config();
  c.local_lr = 0.0;
  CHECK_THROWS_AS(Engine(c, sc), std::invalid_argument);
  c = base_config();
  c.mu_tilde = 1.5;
  CHECK_THROWS_AS(Engine(c, sc), std::invalid_argument);
  c = base_config();
  c.rho = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(Engine(c, sc), std::invalid_argument);
  c = base_config();
  c.server_mode = ServerMode::grad_agg;
  c.server_lr = 0.0;
  CHECK_THROWS_AS(Engine(c, sc), std::invalid_argument);
  c = base_config();
  c.initial_clusters = 0;
  CHECK_THROWS_AS(Engine(c, sc), std::invalid_argument);
  CHECK(server_mode_from_string("param_avg") == ServerMode::param_avg);
  CHECK(server_mode_from_string("grad_agg") == ServerMode::grad_agg);
  CHECK_THROWS_AS(server_mode_from_string("median"), std::invalid_argument);
}

TEST_CASE("a lone client on separable blobs trains to high validation accuracy") {
  ScenarioSpec spec = blob_spec(1, 2, 200, 7);
  const Scenario sc = generate_scenario(spec);
  RunConfig c = base_config();
  c.mu_tilde = 1.0;
  Engine engine(c, sc);
  const std::vector<RoundMetrics> metrics = engine.run();
  REQUIRE(metrics.size() == 50);
  double best_val = 0.0;
  for (const auto& m : metrics) best_val = std::max(best_val, m.val_acc);
  CHECK(best_val >= 0.95);
  for (const auto& m : metrics) {
    CHECK(m.clusters == 1);
    CHECK(m.val_acc >= 0.0);
    CHECK(m.val_acc <= 1.0);
    CHECK(m.test_acc >= 0.0);
    CHECK(m.test_acc <= 1.0);
  }
}

TEST_CASE("wide margins let the model become a perfect predictor") {
  ScenarioSpec spec = blob_spec(1, 2, 150, 3);
  spec.class_margin = 6.0;
  spec.feature_dim = 4;
  const Scenario sc = generate_scenario(spec);
  RunConfig c = base_config();
  c.rounds = 60;
  c.local_lr = 0.1;
  Engine engine(c, sc);
  const std::vector<RoundMetrics> metrics = engine.run();
  CHECK(metrics.back().val_acc == 1.0);
  CHECK(metrics.back().test_acc == 1.0);
}

TEST_CASE("averaging identical clients reproduces the lone-client model") {
  ScenarioSpec spec = blob_spec(1, 2, 90, 11);
  const Scenario solo = generate_scenario(spec);
  Scenario trio = solo;
  trio.clients.push_back(solo.clients[0]);
  trio.clients.push_back(solo.clients[0]);
  trio.clients[1].client_id = 1;
  trio.clients[2].client_id = 2;

  RunConfig c = base_config();
  c.rounds = 3;
  Engine a(c, solo);
  Engine b(c, trio);
  for (int t = 0; t < 3; ++t) {
    a.round_step();
    b.round_step();
  }
  CHECK((a.model().phi.W1 - b.model().phi.W1).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE(a.model().heads.size() == b.model().heads.size());
  for (std::size_t k = 0; k < a.model().heads.size(); ++k) {
    CHECK((a.model().heads[k].W - b.model().heads[k].W).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((a.model().heads[k].b - b.model().heads[k].b).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("zero rounds produce no metrics and leave the model at its init") {
  const Scenario sc = generate_scenario(blob_spec(2, 2, 40, 5));
  RunConfig c = base_config();
  c.rounds = 0;
  Engine engine(c, sc);
  const Eigen::MatrixXd w1 = engine.model().phi.W1;
  const std::vector<RoundMetrics> metrics = engine.run();
  CHECK(metrics.empty());
  CHECK((engine.model().phi.W1 - w1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(engine.current_round() == 0);
}

TEST_CASE("zero local passes refresh weights without moving parameters") {
  const Scenario sc = generate_scenario(blob_spec(1, 3, 50, 9));
  RunConfig c = base_config();
  c.rounds = 1;
  c.local_iters = 0;
  c.initial_clusters = 2;
  Engine engine(c, sc);
  const Eigen::MatrixXd w1 = engine.model().phi.W1;
  const Eigen::MatrixXd h0 = engine.model().heads[0].W;
  engine.round_step();
  CHECK((engine.model().phi.W1 - w1).cwiseAbs().maxCoeff() == 0.0);
  CHECK((engine.model().heads[0].W - h0).cwiseAbs().maxCoeff() == 0.0);
  // the weight state was still refreshed from the scores
  const WeightState& state = engine.weights()[0];
  CHECK(state.gamma.rows() == sc.clients[0].train.size());
  CHECK(state.omega.row(0).sum() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("with one cluster the responsibility tally is the class histogram") {
  const Scenario sc = generate_scenario(blob_spec(1, 4, 80, 13));
  RunConfig c = base_config();
  c.rounds = 1;
  Engine engine(c, sc);
  engine.round_step();
  const Eigen::MatrixXd& tally = engine.bookkeeping()[0];
  REQUIRE(tally.rows() == 1);
  REQUIRE(tally.cols() == 4);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(4);
  const DataBatch& train = sc.clients[0].train;
  for (int j = 0; j < train.size(); ++j) counts(train.y(j)) += 1.0;
  for (int cl = 0; cl < 4; ++cl) CHECK(tally(0, cl) == counts(cl));
}

TEST_CASE("a full-batch local update rarely lowers the client objective") {
  int improved = 0;
  for (int seed = 0; seed < 100; ++seed) {
    ScenarioSpec spec = blob_spec(1, 2, 40, 100 + static_cast<std::uint64_t>(seed));
    spec.feature_dim = 4;
    const Scenario sc = generate_scenario(spec);
    RunConfig c = base_config();
    c.rounds = 1;
    c.initial_clusters = 2;
    c.mu_tilde = 1.0;  // pure responsibility update, the provably ascending blend
    c.seed = 1000 + static_cast<std::uint64_t>(seed);
    Engine engine(c, sc);

    const DataBatch& train = sc.clients[0].train;
    const int n = train.size();
    WeightState state = engine.weights()[0];
    Formulation f0 = engine.model().formulation;
    const Eigen::MatrixXd scores0 =
        client_log_scores(train, engine.model().phi, engine.model().heads, f0);
    const double before = log_mixture_sum(state.omega, scores0) / n;

    const LocalUpdateResult r = local_update(sc.clients[0], engine.model(), state, c,
                                             derive_key(c.seed, "batch", 0ull, 0ull));
    Formulation f1 = engine.model().formulation;
    const Eigen::MatrixXd scores1 = client_log_scores(train, r.phi, r.heads, f1);
    const double after = log_mixture_sum(state.omega, scores1) / n;
    if (after >= before - 1e-12) ++improved;
  }
  CHECK(improved >= 90);
}

TEST_CASE("an uninformative scenario keeps accuracy at chance level") {
  ScenarioSpec spec = blob_spec(4, 5, 250, 21);
  spec.class_margin = 1e-6;  // features carry almost no label signal
  const Scenario sc = generate_scenario(spec);
  RunConfig c = base_config();
  Engine engine(c, sc);
  const auto [val, test] = engine.evaluate();
  CHECK(std::abs(val - 0.2) < 0.1);
  CHECK(std::abs(test - 0.2) < 0.1);
}

TEST_CASE("concept-matched heads beat one pooled model") {
  const Scenario sc = generate_scenario(concept_spec(6, 31));
  const int d = 6, C = 6;

  // pooled arm: one model on everything
  std::vector<const DataBatch*> all;
  for (const auto& cl : sc.clients) all.push_back(&cl.train);
  const DataBatch pooled = concat_batches(all);
  const auto [phi_single, head_single] = train_single_head(pooled, d, C, 77, 250, 0.2);

  // matched arm: one model per planted concept, trained on that concept's pool
  std::vector<std::pair<FeatureExtractor, ClusterHead>> matched;
  for (int g = 0; g < 3; ++g) {
    std::vector<const DataBatch*> parts;
    for (const auto& cl : sc.clients) {
      if (cl.planted_concept == g) parts.push_back(&cl.train);
    }
    matched.push_back(train_single_head(concat_batches(parts), d, C,
                                        100 + static_cast<std::uint64_t>(g), 250, 0.2));
  }

  double acc_single = 0.0, acc_matched = 0.0;
  for (const auto& cl : sc.clients) {
    const DataBatch& view = sc.global_test.per_concept[cl.planted_concept];
    acc_single += head_accuracy(phi_single, head_single, view);
    const auto& [phi_g, head_g] = matched[cl.planted_concept];
    acc_matched += head_accuracy(phi_g, head_g, view);
  }
  acc_single /= sc.clients.size();
  acc_matched /= sc.clients.size();
  CHECK(acc_matched > acc_single);
  CHECK(acc_matched > 0.8);
  // contradictory pooled labels cap the single model near one third
  CHECK(acc_single < 0.6);
}

TEST_CASE("cluster counts move only by one split and the round's removals") {
  const Scenario sc = generate_scenario(concept_spec(12, 41));
  RunConfig c = base_config();
  c.rounds = 20;
  c.rho = 0.05;
  c.initial_clusters = 2;
  c.local_lr = 0.1;
  Engine engine(c, sc);
  int prev = 2;
  for (int t = 0; t < 20; ++t) {
    const RoundMetrics m = engine.round_step();
    CHECK(m.splits >= 0);
    CHECK(m.splits <= 1);
    CHECK(m.removals >= 0);
    CHECK(m.clusters == prev + m.splits - m.removals);
    CHECK(m.clusters >= 1);
    prev = m.clusters;
  }
  CHECK(engine.model().clusters() == prev);
}

TEST_CASE("metrics are bit-identical across thread counts and reruns") {
  const Scenario sc = generate_scenario(concept_spec(8, 51));
  RunConfig c = base_config();
  c.rounds = 6;
  c.rho = 0.05;
  c.initial_clusters = 2;

  RunConfig c4 = c;
  c4.threads = 4;
  Engine e1(c, sc);
  Engine e4(c4, sc);
  Engine e1b(c, sc);
  const auto m1 = e1.run();
  const auto m4 = e4.run();
  const auto m1b = e1b.run();
  REQUIRE(m1.size() == m4.size());
  for (std::size_t t = 0; t < m1.size(); ++t) {
    CHECK(same_metrics(m1[t], m4[t]));
    CHECK(same_metrics(m1[t], m1b[t]));
  }
  CHECK((e1.model().phi.W1 - e4.model().phi.W1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("higher split thresholds leave fewer clusters on average") {
  const double rhos[3] = {0.05, 0.1, 0.3};
  double mean_k[3] = {0.0, 0.0, 0.0};
  const std::uint64_t seeds[3] = {11, 12, 13};
  for (int r = 0; r < 3; ++r) {
    for (std::uint64_t seed : seeds) {
      const Scenario sc = generate_scenario(concept_spec(10, seed));
      RunConfig c = base_config();
      c.rounds = 12;
      c.rho = rhos[r];
      c.local_lr = 0.1;
      c.seed = seed;
      Engine engine(c, sc);
      const auto metrics = engine.run();
      mean_k[r] += metrics.back().clusters;
    }
    mean_k[r] /= 3.0;
  }
  CHECK(mean_k[0] >= mean_k[1] - 1e-9);
  CHECK(mean_k[1] >= mean_k[2] - 1e-9);
}

TEST_CASE("partial participation touches only the sampled clients") {
  const Scenario sc = generate_scenario(blob_spec(6, 2, 40, 64));
  RunConfig c = base_config();
  c.rounds = 1;
  c.clients_per_round = 2;
  c.initial_clusters = 2;
  Engine engine(c, sc);
  const RoundMetrics m = engine.round_step();
  // this seed keeps both clusters voted; a removal would renormalize everyone
  REQUIRE(m.removals == 0);
  int touched = 0;
  for (const auto& w : engine.weights()) {
    // unsampled clients keep their exact uniform prior
    if ((w.omega.array() - 0.5).abs().maxCoeff() > 0.0) ++touched;
  }
  CHECK(touched == 2);
}

TEST_CASE("divergence failures carry the offending round") {
  const DivergenceError err(7);
  CHECK(err.round == 7);
  CHECK(std::string(err.what()).find("7") != std::string::npos);
}

TEST_CASE("hard assignment modes run deterministically end to end") {
  const Scenario sc = generate_scenario(concept_spec(9, 71));
  for (Tier2Kind tier2 : {Tier2Kind::ifca, Tier2Kind::fesem}) {
    RunConfig c = base_config();
    c.rounds = 8;
    c.initial_clusters = 3;
    c.tier2 = tier2;
    c.local_lr = 0.1;
    Engine e1(c, sc);
    Engine e2(c, sc);
    const auto m1 = e1.run();
    const auto m2 = e2.run();
    // splitting is disabled, so clusters only disappear via empty removal
    int prev = 3;
    for (std::size_t t = 0; t < m1.size(); ++t) {
      CHECK(same_metrics(m1[t], m2[t]));
      CHECK(m1[t].splits == 0);
      CHECK(m1[t].clusters == prev - m1[t].removals);
      CHECK(m1[t].clusters >= 1);
      prev = m1[t].clusters;
    }
    // hard assignments keep the weight rows one-hot
    for (const auto& w : e1.weights()) {
      for (int k = 0; k < w.omega_tilde.size(); ++k) {
        const double v = w.omega_tilde(k);
        CHECK((v == 0.0 || v == 1.0));
      }
    }
  }
}

TEST_CASE("gradient aggregation mode also trains the separable task") {
  ScenarioSpec spec = blob_spec(3, 2, 80, 81);
  const Scenario sc = generate_scenario(spec);
  RunConfig c = base_config();
  c.server_mode = ServerMode::grad_agg;
  c.server_lr = 0.05;
  c.rounds = 50;
  Engine engine(c, sc);
  const auto metrics = engine.run();
  double best_val = 0.0;
  for (const auto& m : metrics) best_val = std::max(best_val, m.val_acc);
  CHECK(best_val >= 0.9);
}

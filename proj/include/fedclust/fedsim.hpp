#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedclust/adaptive.hpp"
#include "fedclust/clusterweights.hpp"
#include "fedclust/datagen.hpp"
#include "fedclust/formulations.hpp"
#include "fedclust/models.hpp"

namespace fedclust {

enum class ServerMode { param_avg, grad_agg };

ServerMode server_mode_from_string(const std::string& s);
std::string to_string(ServerMode m);

struct RunConfig {
  int rounds = 50;
  int clients_per_round = 0;  // 0 -> every client every round
  int local_iters = 1;        // local epochs per round
  double local_lr = 0.05;
  ServerMode server_mode = ServerMode::param_avg;
  double server_lr = 1.0;  // grad_agg only
  int initial_clusters = 1;
  FormulationKind tier1 = FormulationKind::conditional;
  Tier2Kind tier2 = Tier2Kind::soft;
  MetricSpec metric;
  double rho = 0.1;  // split threshold; infinity disables splitting
  double mu_tilde = 0.5;
  ExtractorKind model = ExtractorKind::linear;
  int hidden_dim = 16;  // mlp1 only
  int feature_out_dim = 0;  // 0 -> same as input dim
  int batch_size = 0;   // 0 -> full batch
  std::uint64_t seed = 1;
  int threads = 0;  // 0 -> FEDCLUST_THREADS or hardware

  void validate(int num_clients) const;
  int sampled_per_round(int num_clients) const {
    return clients_per_round == 0 ? num_clients : clients_per_round;
  }
};

struct RoundMetrics {
  int round = 0;
  int clusters = 1;
  double val_acc = 0.0;
  double test_acc = 0.0;
  double objective = 0.0;
  double max_dist = 0.0;
  double mean_dist = 0.0;
  int splits = 0;
  int removals = 0;
  double wall_ms = 0.0;  // informational only, never serialized
};

struct ClusterModel {
  FeatureExtractor phi;
  std::vector<ClusterHead> heads;
  Formulation formulation;
  int clusters() const { return static_cast<int>(heads.size()); }
};

class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(int round)
      : std::runtime_error("objective diverged at round " + std::to_string(round)),
        round(round) {}
  int round;
};

struct LocalUpdateResult {
  FeatureExtractor phi;
  std::vector<ClusterHead> heads;
  GradientBundle accumulated;   // sum of per-pass gradients (grad_agg mode)
  Eigen::VectorXd flat_grad;    // first-pass gradient at round-start params
  Eigen::MatrixXd bookkeeping;  // clusters x classes, per-class responsibility mass
  long train_count = 0;
};

// One client's round: weight refresh (e_step or hard assignment), then
// local_iters epochs of coefficient-weighted gradient steps with weights
// frozen. hard_one_hot must be provided for fesem (the caller owns the
// parameter caches that assignment needs) and is ignored otherwise.
LocalUpdateResult local_update(const ClientDataset& client, const ClusterModel& model,
                               WeightState& state, const RunConfig& config,
                               std::uint64_t batch_key,
                               const Eigen::VectorXd* hard_one_hot = nullptr);

// Per-client log L_k matrix for the current parameters. For the ratio
// formulation the marginals are re-estimated from this client's own
// predictions first (into the local copy).
Eigen::MatrixXd client_log_scores(const DataBatch& batch, const FeatureExtractor& phi,
                                  const std::vector<ClusterHead>& heads,
                                  Formulation& local_formulation);

class Engine {
 public:
  Engine(RunConfig config, Scenario scenario);

  std::vector<RoundMetrics> run();  // all configured rounds
  RoundMetrics round_step();

  const ClusterModel& model() const { return model_; }
  const std::vector<WeightState>& weights() const { return weights_; }
  const std::vector<Eigen::MatrixXd>& bookkeeping() const { return bookkeeping_; }
  const DistanceReport& last_report() const { return last_report_; }
  const Scenario& scenario() const { return scenario_; }
  int current_round() const { return round_; }
  long degenerate_rows() const;
  long empty_shared_class_pairs() const { return empty_shared_pairs_; }

  std::pair<double, double> evaluate() const;  // (val acc, test acc)
  double objective() const;                    // data-fit term on train splits

 private:
  struct ClientCache {
    bool valid = false;
    PrototypeSet protos;
    Eigen::VectorXd flat_grad;
    std::vector<ClusterHead> local_heads;
    int assigned = 0;  // argmax omega_tilde at cache time
  };

  std::vector<int> sample_clients(int round) const;
  void aggregate(const std::vector<int>& sampled,
                 const std::vector<LocalUpdateResult>& results);
  void adapt_clusters(RoundMetrics& metrics);
  ClusterHead aggregate_subcluster_head(int parent, const ClusterHead& parent_head,
                                        const std::vector<int>& group) const;

  RunConfig config_;
  Scenario scenario_;
  ClusterModel model_;
  std::vector<WeightState> weights_;
  std::vector<Eigen::MatrixXd> bookkeeping_;
  std::vector<ClientCache> caches_;
  DistanceReport last_report_;
  long empty_shared_pairs_ = 0;
  int round_ = 0;
  int threads_ = 1;
};

}  // namespace fedclust

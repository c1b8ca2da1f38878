#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fedclust/clusterweights.hpp"
#include "fedclust/datagen.hpp"
#include "fedclust/formulations.hpp"
#include "fedclust/models.hpp"

namespace fedclust {

// Per-client feature summaries under the shared extractor: one mean feature
// per class seen locally, plus the overall mean feature.
struct PrototypeSet {
  Eigen::MatrixXd class_protos;  // num_classes x feat_dim
  std::vector<bool> present;     // classes with at least one train sample
  Eigen::VectorXi class_counts;  // per-class train counts
  Eigen::VectorXd mean_proto;    // feat_dim
  long total_samples = 0;
};

enum class BaseMetric { ascp, cscp };

BaseMetric base_metric_from_string(const std::string& s);
std::string to_string(BaseMetric m);

// Base metric plus the three single-change variants. ascp reacts to any
// distribution difference (class or mean prototypes); cscp only to
// class-conditional differences.
struct MetricSpec {
  BaseMetric base = BaseMetric::cscp;
  bool grad_cosine = false;        // compare flattened local gradients instead
  bool drop_confidence = false;    // omit the omega_tilde product
  bool mean_over_classes = false;  // mean instead of max across shared classes

  static MetricSpec parse(const std::string& base, const std::vector<std::string>& ablations);
  std::vector<std::string> ablation_names() const;
};

// Everything the pairwise distance needs from one client.
struct ClientSummary {
  int client_id = -1;
  PrototypeSet protos;
  Eigen::VectorXd omega_tilde;
  Eigen::VectorXd flat_grad;  // used only by the grad_cosine variant
};

struct SplitDecision {
  int cluster = -1;
  int seed_a = -1;  // client ids
  int seed_b = -1;
  std::vector<int> group_a;
  std::vector<int> group_b;
};

struct ClusterDistances {
  int cluster = -1;
  std::vector<int> members;  // client ids, ascending
  Eigen::MatrixXd D;
};

struct DistanceReport {
  std::vector<ClusterDistances> clusters;
  MetricSpec metric;
  std::optional<SplitDecision> split;
  std::vector<int> removals;
  long empty_shared_class_pairs = 0;
  double max_distance = 0.0;
  double mean_distance = 0.0;
};

double cosine_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

PrototypeSet compute_prototypes(const DataBatch& train, const FeatureExtractor& phi);

double client_distance(const ClientSummary& a, const ClientSummary& b, int cluster,
                       const MetricSpec& metric, long* empty_shared_counter = nullptr);

// true iff max(D) - mean(off-diagonal D) >= rho; singleton clusters never split
bool split_condition(const Eigen::MatrixXd& D, double rho);

// Seeds at the farthest pair (first such pair in scan order), everyone else
// joins the nearer seed, ties to the first seed. Returns client-id groups.
std::pair<std::vector<int>, std::vector<int>> bipartition(const Eigen::MatrixXd& D,
                                                          const std::vector<int>& members);

// Builds per-cluster membership (argmax omega_tilde, lowest index on ties),
// distance matrices, and at most one split decision: among clusters meeting
// the split condition, the one whose largest entry is biggest.
DistanceReport build_distance_report(const std::vector<ClientSummary>& summaries,
                                     int num_clusters, const MetricSpec& metric, double rho);

// Grows cluster k into k + a new trailing cluster. Sample and client weights
// of k are halved into both. Heads come from the provided aggregator (one
// call per subcluster). Bookkeeping rows are duplicated.
void apply_split(const SplitDecision& split, std::vector<ClusterHead>& heads,
                 std::vector<WeightState>& weights,
                 std::vector<Eigen::MatrixXd>& bookkeeping, Formulation& formulation,
                 const std::function<ClusterHead(const std::vector<int>&)>& aggregate_head);

// Deletes clusters with zero votes (never all, never the last one) and
// renormalizes every weight row over the survivors. votes[k] counts clients
// whose omega_tilde peaks at k; entries beyond votes.size() are kept.
// Returns the removed cluster ids (pre-removal indexing).
std::vector<int> detect_and_remove_empty(const std::vector<long>& votes,
                                         std::vector<ClusterHead>& heads,
                                         std::vector<WeightState>& weights,
                                         std::vector<Eigen::MatrixXd>& bookkeeping,
                                         Formulation& formulation);

}  // namespace fedclust

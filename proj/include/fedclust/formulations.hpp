#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace fedclust {

// How a cluster scores a labeled sample from its class predictions.
//   conditional: log p_k(y|x)
//   ratio:       log p_k(y|x) - log m_k(y), the label-marginal-discounted score
enum class FormulationKind { conditional, ratio };

FormulationKind formulation_from_string(const std::string& s);
std::string to_string(FormulationKind k);

inline constexpr double kMarginalFloor = 1e-12;

class Formulation {
 public:
  Formulation() = default;
  Formulation(FormulationKind kind, int num_clusters, int num_classes);

  FormulationKind kind() const { return kind_; }
  int num_clusters() const { return static_cast<int>(marginals_.rows()); }
  int num_classes() const { return static_cast<int>(marginals_.cols()); }

  // log score of one sample given its log class probabilities under cluster k
  double log_score(int k, const Eigen::RowVectorXd& log_proba, int label) const;

  // Re-estimates cluster k's label marginal as the mean of the given
  // prediction rows, floored and renormalized. The stored marginal is
  // treated as a constant by gradient computations.
  void update_marginal(int k, const Eigen::MatrixXd& proba);

  const Eigen::MatrixXd& marginals() const { return marginals_; }

  // Grows the marginal table when a cluster is added (copies the source row).
  void duplicate_cluster(int source);
  // Shrinks it when clusters are dropped (keep[k] selects survivors).
  void remove_clusters(const std::vector<bool>& keep);

 private:
  FormulationKind kind_ = FormulationKind::conditional;
  Eigen::MatrixXd marginals_;  // K x C, each row a floored probability vector
};

// Mean of prediction rows, floored at kMarginalFloor and renormalized.
Eigen::RowVectorXd estimate_marginal(const Eigen::MatrixXd& proba);

}  // namespace fedclust

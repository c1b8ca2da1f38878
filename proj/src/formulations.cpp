#include "fedclust/formulations.hpp"

#include <cmath>
#include <stdexcept>

namespace fedclust {

FormulationKind formulation_from_string(const std::string& s) {
  if (s == "conditional") return FormulationKind::conditional;
  if (s == "fedrc") return FormulationKind::ratio;
  throw std::invalid_argument("unknown formulation: " + s);
}

std::string to_string(FormulationKind k) {
  return k == FormulationKind::conditional ? "conditional" : "fedrc";
}

Formulation::Formulation(FormulationKind kind, int num_clusters, int num_classes) : kind_(kind) {
  if (num_clusters < 1 || num_classes < 2) {
    throw std::invalid_argument("formulation needs at least one cluster and two classes");
  }
  marginals_ = Eigen::MatrixXd::Constant(num_clusters, num_classes, 1.0 / num_classes);
}

double Formulation::log_score(int k, const Eigen::RowVectorXd& log_proba, int label) const {
  const double lp = log_proba(label);
  if (kind_ == FormulationKind::conditional) return lp;
  const double m = std::max(marginals_(k, label), kMarginalFloor);
  return lp - std::log(m);
}

void Formulation::update_marginal(int k, const Eigen::MatrixXd& proba) {
  marginals_.row(k) = estimate_marginal(proba);
}

void Formulation::duplicate_cluster(int source) {
  Eigen::MatrixXd grown(marginals_.rows() + 1, marginals_.cols());
  grown.topRows(marginals_.rows()) = marginals_;
  grown.row(grown.rows() - 1) = marginals_.row(source);
  marginals_ = std::move(grown);
}

void Formulation::remove_clusters(const std::vector<bool>& keep) {
  if (static_cast<Eigen::Index>(keep.size()) != marginals_.rows()) {
    throw std::invalid_argument("keep mask size mismatch");
  }
  Eigen::Index kept = 0;
  for (bool b : keep) kept += b ? 1 : 0;
  Eigen::MatrixXd shrunk(kept, marginals_.cols());
  Eigen::Index row = 0;
  for (Eigen::Index k = 0; k < marginals_.rows(); ++k) {
    if (keep[static_cast<size_t>(k)]) shrunk.row(row++) = marginals_.row(k);
  }
  marginals_ = std::move(shrunk);
}

Eigen::RowVectorXd estimate_marginal(const Eigen::MatrixXd& proba) {
  if (proba.rows() == 0) {
    throw std::invalid_argument("cannot estimate a marginal from an empty batch");
  }
  Eigen::RowVectorXd m = proba.colwise().mean();
  m = m.cwiseMax(kMarginalFloor);
  m /= m.sum();
  return m;
}

}  // namespace fedclust

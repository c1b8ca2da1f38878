#include "fedclust/clusterweights.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace fedclust {

namespace {
constexpr double kSimplexTol = 1e-9;

void check_simplex_row(const Eigen::RowVectorXd& row, const char* what) {
  if ((row.array() < -kSimplexTol).any() || std::abs(row.sum() - 1.0) > kSimplexTol) {
    throw std::runtime_error(std::string(what) + " left the simplex");
  }
}

// row-normalize exp(log_weights + log_scores); returns false when everything
// underflows or is otherwise degenerate
bool normalized_responsibility(const Eigen::RowVectorXd& log_weighted, Eigen::RowVectorXd& out) {
  const double mx = log_weighted.maxCoeff();
  if (!std::isfinite(mx)) return false;
  out = (log_weighted.array() - mx).exp();
  const double total = out.sum();
  if (!(total > 0.0) || !std::isfinite(total)) return false;
  out /= total;
  return true;
}
}  // namespace

Tier2Kind tier2_from_string(const std::string& s) {
  if (s == "soft") return Tier2Kind::soft;
  if (s == "ifca") return Tier2Kind::ifca;
  if (s == "fesem") return Tier2Kind::fesem;
  throw std::invalid_argument("unknown tier2 mode: " + s);
}

std::string to_string(Tier2Kind k) {
  switch (k) {
    case Tier2Kind::soft: return "soft";
    case Tier2Kind::ifca: return "ifca";
    default: return "fesem";
  }
}

WeightState WeightState::uniform(int n_samples, int num_clusters, double mu_tilde) {
  if (n_samples < 1 || num_clusters < 1) throw std::invalid_argument("bad weight state shape");
  if (mu_tilde < 0.0 || mu_tilde > 1.0) throw std::invalid_argument("mu_tilde outside [0,1]");
  WeightState s;
  s.omega = Eigen::MatrixXd::Constant(n_samples, num_clusters, 1.0 / num_clusters);
  s.omega_tilde = Eigen::VectorXd::Constant(num_clusters, 1.0 / num_clusters);
  s.gamma = s.omega;
  s.gamma_tilde = s.omega;
  s.mu_tilde = mu_tilde;
  return s;
}

void WeightState::validate() const {
  for (Eigen::Index j = 0; j < omega.rows(); ++j) {
    check_simplex_row(omega.row(j), "sample weight row");
  }
  check_simplex_row(omega_tilde.transpose(), "client weight vector");
}

void e_step(WeightState& state, const Eigen::MatrixXd& log_scores) {
  const Eigen::Index n = log_scores.rows();
  const Eigen::Index K = log_scores.cols();
  if (state.omega.rows() != n || state.omega.cols() != K || state.omega_tilde.size() != K) {
    throw std::invalid_argument("log-score shape does not match weight state");
  }
  if (!log_scores.allFinite()) throw std::invalid_argument("log-scores must be finite");

  state.gamma.resize(n, K);
  state.gamma_tilde.resize(n, K);
  const Eigen::RowVectorXd log_client = state.omega_tilde.array().log().matrix().transpose();
  const Eigen::RowVectorXd uniform = Eigen::RowVectorXd::Constant(K, 1.0 / K);

  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::RowVectorXd row;
    const Eigen::RowVectorXd log_omega = state.omega.row(j).array().log();
    if (normalized_responsibility(log_omega + log_scores.row(j), row)) {
      state.gamma.row(j) = row;
    } else {
      state.gamma.row(j) = uniform;
      ++state.degenerate_rows;
    }
    if (normalized_responsibility(log_client + log_scores.row(j), row)) {
      state.gamma_tilde.row(j) = row;
    } else {
      state.gamma_tilde.row(j) = uniform;
      ++state.degenerate_rows;
    }
  }

  state.omega_tilde = state.gamma_tilde.colwise().mean().transpose();
  const double mu = state.mu_tilde;
  state.omega =
      mu * state.gamma + (1.0 - mu) * state.omega_tilde.transpose().replicate(n, 1);
}

Eigen::VectorXd hard_assign_ifca(const Eigen::VectorXd& mean_losses) {
  const Eigen::Index K = mean_losses.size();
  if (K < 1) throw std::invalid_argument("need at least one cluster");
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < K; ++k) {
    if (mean_losses(k) < mean_losses(best)) best = k;
  }
  Eigen::VectorXd one_hot = Eigen::VectorXd::Zero(K);
  one_hot(best) = 1.0;
  return one_hot;
}

Eigen::VectorXd hard_assign_fesem(const Eigen::VectorXd& client_params,
                                  const std::vector<Eigen::VectorXd>& cluster_params) {
  const Eigen::Index K = static_cast<Eigen::Index>(cluster_params.size());
  if (K < 1) throw std::invalid_argument("need at least one cluster");
  Eigen::VectorXd dist(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    if (cluster_params[k].size() != client_params.size()) {
      throw std::invalid_argument("parameter shape mismatch");
    }
    dist(k) = (cluster_params[k] - client_params).norm();
  }
  return hard_assign_ifca(dist);
}

void set_hard_assignment(WeightState& state, const Eigen::VectorXd& one_hot) {
  if (one_hot.size() != state.omega_tilde.size()) {
    throw std::invalid_argument("one-hot length mismatch");
  }
  state.omega_tilde = one_hot;
  state.omega = one_hot.transpose().replicate(state.omega.rows(), 1);
  state.gamma = state.omega;
  state.gamma_tilde = state.omega;
}

Eigen::VectorXd test_time_mixture(const Eigen::VectorXd& omega_tilde,
                                  const Eigen::MatrixXd& cluster_proba) {
  if (cluster_proba.rows() != omega_tilde.size()) {
    throw std::invalid_argument("one probability row per cluster expected");
  }
  return cluster_proba.transpose() * omega_tilde;
}

double log_mixture_sum(const Eigen::MatrixXd& omega, const Eigen::MatrixXd& log_scores) {
  if (omega.rows() != log_scores.rows() || omega.cols() != log_scores.cols()) {
    throw std::invalid_argument("weight and score shapes differ");
  }
  double total = 0.0;
  for (Eigen::Index j = 0; j < omega.rows(); ++j) {
    const Eigen::ArrayXd a = omega.row(j).array().log() + log_scores.row(j).array();
    const double mx = a.maxCoeff();
    if (!std::isfinite(mx)) {
      total = -std::numeric_limits<double>::infinity();
      continue;
    }
    total += mx + std::log((a - mx).exp().sum());
  }
  return total;
}

}  // namespace fedclust

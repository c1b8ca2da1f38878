#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace fedclust {

enum class Tier2Kind { soft, ifca, fesem };

Tier2Kind tier2_from_string(const std::string& s);
std::string to_string(Tier2Kind k);

// One client's clustering weights. omega holds the sample-wise mixture
// weights (one simplex row per local sample), omega_tilde the client-wise
// weights that feed test-time mixing and membership votes. gamma and
// gamma_tilde are the latest responsibilities, kept because downstream
// bookkeeping sums them per class.
struct WeightState {
  Eigen::MatrixXd omega;        // N_i x K
  Eigen::VectorXd omega_tilde;  // K
  Eigen::MatrixXd gamma;        // N_i x K
  Eigen::MatrixXd gamma_tilde;  // N_i x K
  double mu_tilde = 1.0;
  long degenerate_rows = 0;

  static WeightState uniform(int n_samples, int num_clusters, double mu_tilde);
  int clusters() const { return static_cast<int>(omega.cols()); }
  int samples() const { return static_cast<int>(omega.rows()); }
  // throws if any row (or omega_tilde) leaves the simplex by more than 1e-9
  void validate() const;
};

// Responsibility update followed by the penalty-coupled weight blend:
//   gamma       = row-normalized omega .* L        (log-space)
//   gamma_tilde = row-normalized omega_tilde .* L  (log-space)
//   omega_tilde <- column means of gamma_tilde
//   omega       <- mu_tilde * gamma + (1 - mu_tilde) * omega_tilde
// Rows whose weighted likelihoods all underflow are reset to uniform and
// counted in state.degenerate_rows.
void e_step(WeightState& state, const Eigen::MatrixXd& log_scores);

// One-hot at the smallest mean local loss; ties go to the lowest index.
Eigen::VectorXd hard_assign_ifca(const Eigen::VectorXd& mean_losses);

// One-hot at the nearest cluster parameter vector in Euclidean distance.
Eigen::VectorXd hard_assign_fesem(const Eigen::VectorXd& client_params,
                                  const std::vector<Eigen::VectorXd>& cluster_params);

// Overwrites both weight tiers of a client with the same one-hot rows.
void set_hard_assignment(WeightState& state, const Eigen::VectorXd& one_hot);

// sum_k omega_tilde[k] * cluster_proba.row(k)
Eigen::VectorXd test_time_mixture(const Eigen::VectorXd& omega_tilde,
                                  const Eigen::MatrixXd& cluster_proba);

// sum_j log sum_k omega(j,k) * exp(log_scores(j,k)), evaluated stably.
// This is one client's unnormalized contribution to the data-fit objective.
double log_mixture_sum(const Eigen::MatrixXd& omega, const Eigen::MatrixXd& log_scores);

}  // namespace fedclust

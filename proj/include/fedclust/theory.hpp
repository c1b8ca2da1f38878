#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace fedclust {

enum class TheoryWeightMode { oracle, estimated };

TheoryWeightMode theory_weight_mode_from_string(const std::string& s);
std::string to_string(TheoryWeightMode m);

// Planted linear-representation recovery problem: scalar targets
// y = theta_k^T B^T x + z with a shared orthonormal subspace B (d x c) and
// per-cluster coefficient vectors of norm sqrt(c).
struct TheorySpec {
  int ambient_dim = 20;
  int subspace_dim = 2;
  int clusters = 3;
  int clients = 50;
  int samples_per_client = 50;
  double noise = 0.0;
  double eta = 0.0;       // 0 -> auto-tuned from the planted instance
  int iterations = 500;
  double init_dist = 0.5; // planted distance of the starting subspace
  std::uint64_t seed = 1;
  TheoryWeightMode weight_mode = TheoryWeightMode::oracle;
  std::vector<double> cluster_proportions;  // empty -> balanced round-robin

  void validate() const;
  long total_samples() const { return static_cast<long>(clients) * samples_per_client; }
};

struct TheoryInstance {
  std::vector<Eigen::MatrixXd> X;        // per client, n_i x d
  std::vector<Eigen::VectorXd> y;        // per client
  std::vector<Eigen::VectorXi> planted;  // per client, cluster id per sample
  Eigen::MatrixXd B_star;                // d x c, orthonormal columns
  Eigen::MatrixXd Theta_star;            // K x c, rows are theta_k^*
  Eigen::VectorXd cluster_counts;        // planted mass per cluster
};

struct AltMinResult {
  Eigen::MatrixXd Theta;  // K x c
  Eigen::MatrixXd B_hat;  // d x c, re-orthonormalized
  bool singular = false;
  int singular_cluster = -1;
};

struct ConvergenceReport {
  std::vector<double> dist_trace;
  std::vector<Eigen::VectorXd> residual_trace;  // per-iteration per-cluster mean sq residual
  Eigen::VectorXd cluster_counts;
  double E0 = 0.0;
  double sigma_min_star = 0.0;
  double kappa = 0.0;
  double eta = 0.0;
  // linear and squared cluster-mass normalizations of the contraction constants
  double c_min = 0.0, c_max = 0.0;
  double c_min_sq = 0.0, c_max_sq = 0.0;
  double bound_factor = 0.0;
  double bound_factor_sq = 0.0;
  bool sample_regime_ok = false;
  std::vector<double> theta_errors;  // final ||theta_k - B^T B* theta_k^*||
  double fitted_ratio = 0.0;
  bool converged = false;  // trace reached the target precision
  bool pass = false;
  std::string detail;
};

TheoryInstance generate_theory_instance(const TheorySpec& spec);

// Starting subspace at the requested principal-angle distance from target.
Eigen::MatrixXd initial_subspace(const Eigen::MatrixXd& B_star, double dist, std::uint64_t key);

// Closed-form per-cluster least squares for Theta, one gradient step on B,
// then QR re-orthonormalization (R diagonal forced positive).
AltMinResult alt_min_step(const Eigen::MatrixXd& B_hat, const TheoryInstance& inst,
                          const std::vector<Eigen::VectorXi>& assign, double eta);

// Spectral norm of B1_perp^T B2: the sine of the largest principal angle.
double principal_angle_dist(const Eigen::MatrixXd& B1, const Eigen::MatrixXd& B2);

// Fits the per-step contraction ratio of the trace and compares it to the
// one-step bound factor (with slack added by the caller's criteria).
void verify_contraction(ConvergenceReport& report, double slack);

// Full pipeline: generate, iterate, fill the report.
ConvergenceReport run_theory(const TheorySpec& spec);

}  // namespace fedclust

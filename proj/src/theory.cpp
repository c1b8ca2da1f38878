#include "fedclust/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fedclust/rng.hpp"

namespace fedclust {

TheoryWeightMode theory_weight_mode_from_string(const std::string& s) {
  if (s == "oracle") return TheoryWeightMode::oracle;
  if (s == "estimated") return TheoryWeightMode::estimated;
  throw std::invalid_argument("unknown weight mode: " + s);
}

std::string to_string(TheoryWeightMode m) {
  return m == TheoryWeightMode::oracle ? "oracle" : "estimated";
}

void TheorySpec::validate() const {
  if (subspace_dim < 1 || ambient_dim < subspace_dim) {
    throw std::invalid_argument("need 1 <= subspace_dim <= ambient_dim");
  }
  if (clusters < 1 || clients < 1 || samples_per_client < 1) {
    throw std::invalid_argument("clusters, clients and samples must be positive");
  }
  if (noise < 0.0) throw std::invalid_argument("noise must be non-negative");
  if (iterations < 1) throw std::invalid_argument("iterations must be positive");
  if (init_dist < 0.0 || init_dist >= 1.0) {
    throw std::invalid_argument("init_dist must lie in [0,1)");
  }
  if (!cluster_proportions.empty()) {
    if (static_cast<int>(cluster_proportions.size()) != clusters) {
      throw std::invalid_argument("cluster_proportions must have one entry per cluster");
    }
    double total = 0.0;
    for (double p : cluster_proportions) {
      if (p <= 0.0) throw std::invalid_argument("cluster proportions must be positive");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("cluster proportions must sum to 1");
    }
  }
}

namespace {

// thin QR with the R diagonal forced positive, so repeated factorizations of
// the same subspace give the same basis
Eigen::MatrixXd qr_orthonormalize(const Eigen::MatrixXd& M, double* min_rdiag = nullptr) {
  const Eigen::Index d = M.rows();
  const Eigen::Index c = M.cols();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(M);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(d, c);
  const Eigen::MatrixXd R = qr.matrixQR().topLeftCorner(c, c);
  double mn = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < c; ++j) {
    if (R(j, j) < 0.0) Q.col(j) = -Q.col(j);
    mn = std::min(mn, std::abs(R(j, j)));
  }
  if (min_rdiag) *min_rdiag = mn;
  return Q;
}

std::vector<long> planted_cluster_sizes(const TheorySpec& spec) {
  const long N = spec.total_samples();
  const int K = spec.clusters;
  std::vector<long> counts(K, 0);
  if (spec.cluster_proportions.empty()) {
    for (long g = 0; g < N; ++g) counts[g % K] += 1;
    return counts;
  }
  // largest-remainder apportionment of N samples
  std::vector<double> frac(K);
  long assigned = 0;
  for (int k = 0; k < K; ++k) {
    const double exact = spec.cluster_proportions[k] * N;
    counts[k] = static_cast<long>(std::floor(exact));
    frac[k] = exact - counts[k];
    assigned += counts[k];
  }
  std::vector<int> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (long r = 0; r < N - assigned; ++r) counts[order[r % K]] += 1;
  return counts;
}

}  // namespace

TheoryInstance generate_theory_instance(const TheorySpec& spec) {
  spec.validate();
  const int d = spec.ambient_dim;
  const int c = spec.subspace_dim;
  const int K = spec.clusters;
  const long N = spec.total_samples();

  TheoryInstance inst;
  {
    RngStream rng = RngStream::derived(spec.seed, "b-star");
    Eigen::MatrixXd G(d, c);
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < c; ++j) G(i, j) = rng.normal();
    }
    inst.B_star = qr_orthonormalize(G);
  }
  {
    RngStream rng = RngStream::derived(spec.seed, "theta-star");
    inst.Theta_star.resize(K, c);
    for (int k = 0; k < K; ++k) {
      Eigen::RowVectorXd row(c);
      for (int j = 0; j < c; ++j) row(j) = rng.normal();
      inst.Theta_star.row(k) = row * (std::sqrt(static_cast<double>(c)) / row.norm());
    }
  }

  // global sample order is client-major; planted ids follow it
  const std::vector<long> sizes = planted_cluster_sizes(spec);
  std::vector<int> planted_flat;
  planted_flat.reserve(N);
  if (spec.cluster_proportions.empty()) {
    for (long g = 0; g < N; ++g) planted_flat.push_back(static_cast<int>(g % K));
  } else {
    for (int k = 0; k < K; ++k) planted_flat.insert(planted_flat.end(), sizes[k], k);
  }

  inst.cluster_counts = Eigen::VectorXd::Zero(K);
  for (long k = 0; k < K; ++k) inst.cluster_counts(k) = static_cast<double>(sizes[k]);

  inst.X.resize(spec.clients);
  inst.y.resize(spec.clients);
  inst.planted.resize(spec.clients);
  long g = 0;
  for (int i = 0; i < spec.clients; ++i) {
    RngStream rng = RngStream::derived(spec.seed, "samples", static_cast<std::uint64_t>(i));
    const int n = spec.samples_per_client;
    inst.X[i].resize(n, d);
    inst.y[i].resize(n);
    inst.planted[i].resize(n);
    for (int j = 0; j < n; ++j, ++g) {
      for (int t = 0; t < d; ++t) inst.X[i](j, t) = rng.normal();
      const int k = planted_flat[g];
      inst.planted[i](j) = k;
      const double clean = inst.Theta_star.row(k).dot(inst.B_star.transpose() * inst.X[i].row(j).transpose());
      inst.y[i](j) = clean + spec.noise * rng.normal();
    }
  }
  return inst;
}

Eigen::MatrixXd initial_subspace(const Eigen::MatrixXd& B_star, double dist, std::uint64_t key) {
  if (dist <= 0.0) return B_star;
  const Eigen::Index d = B_star.rows();
  const Eigen::Index c = B_star.cols();
  if (d < 2 * c) {
    throw std::invalid_argument("ambient dim must be at least twice the subspace dim");
  }
  RngStream rng(key);
  Eigen::MatrixXd G(d, c);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) G(i, j) = rng.normal();
  }
  // orthonormal directions inside the complement of B*
  const Eigen::MatrixXd P = G - B_star * (B_star.transpose() * G);
  const Eigen::MatrixXd W = qr_orthonormalize(P);
  const double angle = std::asin(std::min(dist, 1.0));
  return B_star * std::cos(angle) + W * std::sin(angle);
}

AltMinResult alt_min_step(const Eigen::MatrixXd& B_hat, const TheoryInstance& inst,
                          const std::vector<Eigen::VectorXi>& assign, double eta) {
  const Eigen::Index d = B_hat.rows();
  const Eigen::Index c = B_hat.cols();
  const int K = static_cast<int>(inst.Theta_star.rows());
  long N = 0;
  for (const auto& X : inst.X) N += X.rows();

  AltMinResult res;
  res.Theta.resize(K, c);

  std::vector<Eigen::MatrixXd> A(K, Eigen::MatrixXd::Zero(c, c));
  std::vector<Eigen::VectorXd> r(K, Eigen::VectorXd::Zero(c));
  std::vector<long> counts(K, 0);
  for (size_t i = 0; i < inst.X.size(); ++i) {
    const Eigen::MatrixXd V = inst.X[i] * B_hat;  // n x c
    for (Eigen::Index j = 0; j < V.rows(); ++j) {
      const int k = assign[i](j);
      A[k].noalias() += V.row(j).transpose() * V.row(j);
      r[k].noalias() += V.row(j).transpose() * inst.y[i](j);
      counts[k] += 1;
    }
  }

  for (int k = 0; k < K; ++k) {
    A[k] /= static_cast<double>(N);
    r[k] /= static_cast<double>(N);
    if (counts[k] < c) {
      res.singular = true;
      res.singular_cluster = k;
      return res;
    }
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(A[k]);
    const Eigen::VectorXd theta = ldlt.solve(r[k]);
    const double resid = (A[k] * theta - r[k]).norm();
    const double scale = A[k].norm() * theta.norm() + r[k].norm();
    if (ldlt.info() != Eigen::Success || !theta.allFinite() ||
        resid > 1e-8 * std::max(scale, 1e-30)) {
      res.singular = true;
      res.singular_cluster = k;
      return res;
    }
    res.Theta.row(k) = theta.transpose();
  }

  Eigen::MatrixXd B_new = B_hat;
  for (int k = 0; k < K; ++k) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
    for (size_t i = 0; i < inst.X.size(); ++i) {
      for (Eigen::Index j = 0; j < inst.X[i].rows(); ++j) {
        if (assign[i](j) != k) continue;
        const double pred = res.Theta.row(k).dot(B_hat.transpose() * inst.X[i].row(j).transpose());
        w.noalias() += inst.X[i].row(j).transpose() * (pred - inst.y[i](j));
      }
    }
    B_new.noalias() -= (eta / static_cast<double>(N)) * (w * res.Theta.row(k));
  }
  res.B_hat = qr_orthonormalize(B_new);
  return res;
}

double principal_angle_dist(const Eigen::MatrixXd& B1, const Eigen::MatrixXd& B2) {
  if (B1.rows() != B2.rows()) throw std::invalid_argument("subspace ambient dims differ");
  const Eigen::Index d = B1.rows();

  auto ensure_orthonormal = [&](const Eigen::MatrixXd& B) {
    const Eigen::MatrixXd gram = B.transpose() * B;
    const double err = (gram - Eigen::MatrixXd::Identity(B.cols(), B.cols())).cwiseAbs().maxCoeff();
    if (err <= 1e-10) return B;
    double mn = 0.0;
    Eigen::MatrixXd Q = qr_orthonormalize(B, &mn);
    if (mn < 1e-12 * std::max(1.0, B.cwiseAbs().maxCoeff())) {
      throw std::invalid_argument("rank-deficient subspace basis");
    }
    return Q;
  };

  const Eigen::MatrixXd Q1 = ensure_orthonormal(B1);
  const Eigen::MatrixXd Q2 = ensure_orthonormal(B2);
  if (Q1.cols() >= d) return 0.0;  // complement is empty

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(Q1);
  const Eigen::MatrixXd full = qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd perp = full.rightCols(d - Q1.cols());
  const Eigen::MatrixXd prod = perp.transpose() * Q2;
  const double s = prod.jacobiSvd().singularValues()(0);
  return std::min(s, 1.0);
}

void verify_contraction(ConvergenceReport& report, double slack) {
  const auto& trace = report.dist_trace;
  if (trace.size() < 10) throw std::invalid_argument("trace too short to fit a rate");

  double positive_min = std::numeric_limits<double>::infinity();
  for (double v : trace) {
    if (v > 0.0) positive_min = std::min(positive_min, v);
  }
  const double floor = std::max(1e-11, 3.0 * positive_min);

  // least-squares slope of log dist over the pre-floor segment
  std::vector<std::pair<double, double>> pts;
  for (size_t t = 5; t < trace.size(); ++t) {
    if (trace[t] > floor) pts.emplace_back(static_cast<double>(t), std::log(trace[t]));
  }
  if (pts.size() < 5) {
    pts.clear();
    for (size_t t = 1; t < trace.size(); ++t) {
      if (trace[t] > 0.0) pts.emplace_back(static_cast<double>(t), std::log(trace[t]));
    }
  }
  if (pts.size() < 2) {
    report.fitted_ratio = 0.0;  // dropped to zero immediately
    report.pass = true;
    report.detail = "trace hit the floor before a rate could be fitted";
    return;
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (auto [x, yv] : pts) {
    sx += x;
    sy += yv;
    sxx += x * x;
    sxy += x * yv;
  }
  const double n = static_cast<double>(pts.size());
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  report.fitted_ratio = std::exp(slope);

  const double looser = std::max(report.bound_factor, report.bound_factor_sq);
  std::ostringstream detail;
  detail << "fitted ratio " << report.fitted_ratio << " vs bound " << looser << " + " << slack;
  report.pass = report.fitted_ratio < 1.0 && report.fitted_ratio <= looser + slack;
  if (!(report.fitted_ratio < 1.0)) detail << " (no contraction)";
  report.detail = detail.str();
}

ConvergenceReport run_theory(const TheorySpec& spec) {
  spec.validate();
  const TheoryInstance inst = generate_theory_instance(spec);
  const int K = spec.clusters;
  const long N = spec.total_samples();

  ConvergenceReport report;
  report.cluster_counts = inst.cluster_counts;
  report.E0 = 1.0 - spec.init_dist * spec.init_dist;
  {
    const Eigen::VectorXd sv = inst.Theta_star.jacobiSvd().singularValues();
    report.sigma_min_star = sv(sv.size() - 1);
    report.kappa = sv(0) / sv(sv.size() - 1);
  }
  report.sample_regime_ok =
      static_cast<double>(N) >=
      static_cast<double>(K) * K / (spec.ambient_dim + spec.subspace_dim);

  const double min_frac = inst.cluster_counts.minCoeff() / static_cast<double>(N);
  const double max_frac = inst.cluster_counts.maxCoeff() / static_cast<double>(N);
  const double sig2 = report.sigma_min_star * report.sigma_min_star;

  double eta = spec.eta;
  if (eta <= 0.0) {
    // keep the larger contraction constant at one half
    eta = 0.5 / (K * max_frac * sig2 * report.E0);
  }
  report.eta = eta;

  report.c_min = eta * K * min_frac * sig2 * report.E0;
  report.c_max = eta * K * max_frac * sig2 * report.E0;
  report.c_min_sq = eta * K * min_frac * min_frac * sig2 * report.E0;
  report.c_max_sq = eta * K * max_frac * max_frac * sig2 * report.E0;
  auto factor = [](double cmin, double cmax) {
    if (cmax >= 2.0) return std::numeric_limits<double>::infinity();
    return (1.0 - cmin + 0.285 * cmax) / std::sqrt(1.0 - 0.5 * cmax);
  };
  report.bound_factor = factor(report.c_min, report.c_max);
  report.bound_factor_sq = factor(report.c_min_sq, report.c_max_sq);

  Eigen::MatrixXd B_hat =
      initial_subspace(inst.B_star, spec.init_dist, derive_key(spec.seed, "b-init"));
  report.dist_trace.push_back(principal_angle_dist(B_hat, inst.B_star));

  std::vector<Eigen::VectorXi> assign = inst.planted;
  Eigen::MatrixXd Theta;
  bool have_theta = false;
  RngStream assign_rng = RngStream::derived(spec.seed, "assign-init");
  if (spec.weight_mode == TheoryWeightMode::estimated) {
    for (auto& a : assign) {
      for (Eigen::Index j = 0; j < a.size(); ++j) {
        a(j) = static_cast<int>(assign_rng.uniform_int(K));
      }
    }
  }

  for (int it = 0; it < spec.iterations; ++it) {
    if (spec.weight_mode == TheoryWeightMode::estimated && have_theta) {
      for (size_t i = 0; i < inst.X.size(); ++i) {
        const Eigen::MatrixXd V = inst.X[i] * B_hat;            // n x c
        const Eigen::MatrixXd pred = V * Theta.transpose();     // n x K
        for (Eigen::Index j = 0; j < pred.rows(); ++j) {
          int best = 0;
          double best_r = std::abs(pred(j, 0) - inst.y[i](j));
          for (int k = 1; k < K; ++k) {
            const double rk = std::abs(pred(j, k) - inst.y[i](j));
            if (rk < best_r) {
              best_r = rk;
              best = k;
            }
          }
          assign[i](j) = best;
        }
      }
    }

    const AltMinResult step = alt_min_step(B_hat, inst, assign, eta);
    if (step.singular) {
      std::ostringstream msg;
      msg << "singular normal equations at iteration " << it << " for cluster "
          << step.singular_cluster;
      report.detail = msg.str();
      report.pass = false;
      return report;
    }
    Theta = step.Theta;
    have_theta = true;
    B_hat = step.B_hat;
    report.dist_trace.push_back(principal_angle_dist(B_hat, inst.B_star));

    Eigen::VectorXd resid = Eigen::VectorXd::Zero(K);
    Eigen::VectorXd resid_n = Eigen::VectorXd::Zero(K);
    for (size_t i = 0; i < inst.X.size(); ++i) {
      const Eigen::MatrixXd V = inst.X[i] * B_hat;
      for (Eigen::Index j = 0; j < V.rows(); ++j) {
        const int k = assign[i](j);
        const double e = V.row(j).dot(Theta.row(k)) - inst.y[i](j);
        resid(k) += e * e;
        resid_n(k) += 1.0;
      }
    }
    for (int k = 0; k < K; ++k) {
      resid(k) = resid_n(k) > 0 ? resid(k) / resid_n(k) : 0.0;
    }
    report.residual_trace.push_back(resid);
  }

  report.theta_errors.resize(K);
  const Eigen::MatrixXd target = (B_hat.transpose() * inst.B_star) * inst.Theta_star.transpose();
  for (int k = 0; k < K; ++k) {
    report.theta_errors[k] = (Theta.row(k).transpose() - target.col(k)).norm();
  }
  for (double vdist : report.dist_trace) {
    if (vdist < 1e-3) {
      report.converged = true;
      break;
    }
  }
  verify_contraction(report, 0.05);
  return report;
}

}  // namespace fedclust

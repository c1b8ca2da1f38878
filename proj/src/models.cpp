#include "fedclust/models.hpp"

#include <cmath>
#include <stdexcept>

#include "fedclust/rng.hpp"

namespace fedclust {

ExtractorKind extractor_kind_from_string(const std::string& s) {
  if (s == "linear") return ExtractorKind::linear;
  if (s == "mlp1") return ExtractorKind::mlp1;
  throw std::invalid_argument("unknown extractor: " + s);
}

std::string to_string(ExtractorKind k) {
  return k == ExtractorKind::linear ? "linear" : "mlp1";
}

namespace {

Eigen::MatrixXd gaussian_matrix(int rows, int cols, double stddev, RngStream& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, stddev);
  }
  return m;
}

// stable row-wise log-softmax
Eigen::MatrixXd log_softmax_rows(Eigen::MatrixXd logits) {
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    logits.row(i).array() -= lse;
  }
  return logits;
}

}  // namespace

FeatureExtractor FeatureExtractor::init(ExtractorKind kind, int in_dim, int hidden_dim,
                                        int out_dim, std::uint64_t key) {
  if (in_dim < 1 || out_dim < 1) throw std::invalid_argument("extractor dims must be positive");
  FeatureExtractor phi;
  phi.kind = kind;
  phi.in_dim = in_dim;
  phi.out_dim = out_dim;
  RngStream rng(key);
  if (kind == ExtractorKind::linear) {
    phi.hidden_dim = 0;
    phi.W1 = gaussian_matrix(in_dim, out_dim, 1.0 / std::sqrt(in_dim), rng);
  } else {
    if (hidden_dim < 1) throw std::invalid_argument("mlp1 needs a positive hidden dim");
    phi.hidden_dim = hidden_dim;
    phi.W1 = gaussian_matrix(in_dim, hidden_dim, 1.0 / std::sqrt(in_dim), rng);
    phi.b1 = Eigen::VectorXd::Zero(hidden_dim);
    phi.W2 = gaussian_matrix(hidden_dim, out_dim, 1.0 / std::sqrt(hidden_dim), rng);
    phi.b2 = Eigen::VectorXd::Zero(out_dim);
  }
  return phi;
}

Eigen::VectorXd FeatureExtractor::forward(const Eigen::VectorXd& x) const {
  if (kind == ExtractorKind::linear) return W1.transpose() * x;
  const Eigen::VectorXd u = ((W1.transpose() * x) + b1).array().tanh();
  return W2.transpose() * u + b2;
}

Eigen::MatrixXd FeatureExtractor::forward_batch(const Eigen::MatrixXd& X) const {
  if (kind == ExtractorKind::linear) return X * W1;
  Eigen::MatrixXd U = ((X * W1).rowwise() + b1.transpose()).array().tanh();
  return (U * W2).rowwise() + b2.transpose();
}

ClusterHead ClusterHead::init(int feat_dim, int num_classes, std::uint64_t key) {
  if (feat_dim < 1 || num_classes < 2) throw std::invalid_argument("bad head dims");
  ClusterHead h;
  RngStream rng(key);
  h.W = gaussian_matrix(feat_dim, num_classes, 1.0 / std::sqrt(feat_dim), rng);
  h.b = Eigen::VectorXd::Zero(num_classes);
  return h;
}

GradientBundle GradientBundle::zeros_like(const FeatureExtractor& phi,
                                          const std::vector<ClusterHead>& heads) {
  GradientBundle g;
  g.dphi.W1 = Eigen::MatrixXd::Zero(phi.W1.rows(), phi.W1.cols());
  if (phi.kind == ExtractorKind::mlp1) {
    g.dphi.b1 = Eigen::VectorXd::Zero(phi.b1.size());
    g.dphi.W2 = Eigen::MatrixXd::Zero(phi.W2.rows(), phi.W2.cols());
    g.dphi.b2 = Eigen::VectorXd::Zero(phi.b2.size());
  }
  g.dtheta.resize(heads.size());
  for (size_t k = 0; k < heads.size(); ++k) {
    g.dtheta[k].W = Eigen::MatrixXd::Zero(heads[k].W.rows(), heads[k].W.cols());
    g.dtheta[k].b = Eigen::VectorXd::Zero(heads[k].b.size());
  }
  return g;
}

void GradientBundle::add(const GradientBundle& other) {
  if (dtheta.size() != other.dtheta.size()) throw std::invalid_argument("bundle shape mismatch");
  dphi.W1 += other.dphi.W1;
  if (dphi.b1.size() > 0) {
    dphi.b1 += other.dphi.b1;
    dphi.W2 += other.dphi.W2;
    dphi.b2 += other.dphi.b2;
  }
  for (size_t k = 0; k < dtheta.size(); ++k) {
    dtheta[k].W += other.dtheta[k].W;
    dtheta[k].b += other.dtheta[k].b;
  }
  samples += other.samples;
}

void GradientBundle::scale(double s) {
  dphi.W1 *= s;
  if (dphi.b1.size() > 0) {
    dphi.b1 *= s;
    dphi.W2 *= s;
    dphi.b2 *= s;
  }
  for (auto& g : dtheta) {
    g.W *= s;
    g.b *= s;
  }
}

Eigen::VectorXd GradientBundle::flattened() const {
  Eigen::Index total = dphi.W1.size() + dphi.b1.size() + dphi.W2.size() + dphi.b2.size();
  for (const auto& g : dtheta) total += g.W.size() + g.b.size();
  Eigen::VectorXd flat(total);
  Eigen::Index at = 0;
  auto put = [&](const Eigen::MatrixXd& m) {
    flat.segment(at, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    at += m.size();
  };
  auto putv = [&](const Eigen::VectorXd& v) {
    flat.segment(at, v.size()) = v;
    at += v.size();
  };
  put(dphi.W1);
  putv(dphi.b1);
  put(dphi.W2);
  putv(dphi.b2);
  for (const auto& g : dtheta) {
    put(g.W);
    putv(g.b);
  }
  return flat;
}

Eigen::VectorXd predict_proba(const FeatureExtractor& phi, const ClusterHead& head,
                              const Eigen::VectorXd& x) {
  const Eigen::VectorXd z = phi.forward(x);
  Eigen::VectorXd logits = head.W.transpose() * z + head.b;
  const double mx = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - mx).exp();
  return p / p.sum();
}

Eigen::MatrixXd predict_proba_batch(const FeatureExtractor& phi, const ClusterHead& head,
                                    const Eigen::MatrixXd& X) {
  return log_proba_batch(phi, head, X).array().exp();
}

Eigen::MatrixXd log_proba_batch(const FeatureExtractor& phi, const ClusterHead& head,
                                const Eigen::MatrixXd& X) {
  const Eigen::MatrixXd Z = phi.forward_batch(X);
  Eigen::MatrixXd logits = (Z * head.W).rowwise() + head.b.transpose();
  return log_softmax_rows(std::move(logits));
}

LikelihoodResult likelihood_and_grads(const FeatureExtractor& phi,
                                      const std::vector<ClusterHead>& heads,
                                      const DataBatch& batch, const Eigen::MatrixXd& coeffs,
                                      const Formulation& formulation) {
  const int n = batch.size();
  const int K = static_cast<int>(heads.size());
  if (coeffs.rows() != n || coeffs.cols() != K) {
    throw std::invalid_argument("coefficient matrix must be samples x clusters");
  }
  if (!coeffs.allFinite() || (coeffs.array() < 0.0).any()) {
    throw std::invalid_argument("coefficients must be finite and non-negative");
  }

  LikelihoodResult out;
  out.log_scores.resize(n, K);
  out.grads = GradientBundle::zeros_like(phi, heads);
  out.grads.samples = n;

  const Eigen::MatrixXd Z = phi.forward_batch(batch.X);  // n x feat
  Eigen::MatrixXd U;                                     // n x hidden, mlp1 only
  if (phi.kind == ExtractorKind::mlp1) {
    U = ((batch.X * phi.W1).rowwise() + phi.b1.transpose()).array().tanh();
  }
  Eigen::MatrixXd dZ = Eigen::MatrixXd::Zero(n, Z.cols());

  for (int k = 0; k < K; ++k) {
    Eigen::MatrixXd logits = (Z * heads[k].W).rowwise() + heads[k].b.transpose();
    const Eigen::MatrixXd logp = log_softmax_rows(std::move(logits));
    const int C = static_cast<int>(logp.cols());
    for (int j = 0; j < n; ++j) {
      const int y = batch.y(j);
      if (y < 0 || y >= C) throw std::out_of_range("label outside class range");
      out.log_scores(j, k) = formulation.log_score(k, logp.row(j), y);
      if (!std::isfinite(out.log_scores(j, k))) {
        throw std::runtime_error("non-finite score for sample " + std::to_string(j) +
                                 " under cluster " + std::to_string(k));
      }
      const double c = coeffs(j, k);
      if (c == 0.0) continue;
      // d(-log p[y])/dlogits = p - e_y; the frozen marginal term drops out
      Eigen::RowVectorXd delta = logp.row(j).array().exp();
      delta(y) -= 1.0;
      out.grads.dtheta[k].W.noalias() += c * (Z.row(j).transpose() * delta);
      out.grads.dtheta[k].b += c * delta.transpose();
      dZ.row(j).noalias() += c * (delta * heads[k].W.transpose());
    }
  }

  if (phi.kind == ExtractorKind::linear) {
    out.grads.dphi.W1.noalias() = batch.X.transpose() * dZ;
  } else {
    out.grads.dphi.W2.noalias() = U.transpose() * dZ;
    out.grads.dphi.b2 = dZ.colwise().sum().transpose();
    const Eigen::MatrixXd dA = (1.0 - U.array().square()) * (dZ * phi.W2.transpose()).array();
    out.grads.dphi.W1.noalias() = batch.X.transpose() * dA;
    out.grads.dphi.b1 = dA.colwise().sum().transpose();
  }
  return out;
}

void sgd_step(FeatureExtractor& phi, std::vector<ClusterHead>& heads,
              const GradientBundle& grads, double eta) {
  if (heads.size() != grads.dtheta.size()) throw std::invalid_argument("bundle shape mismatch");
  phi.W1 -= eta * grads.dphi.W1;
  if (phi.kind == ExtractorKind::mlp1) {
    phi.b1 -= eta * grads.dphi.b1;
    phi.W2 -= eta * grads.dphi.W2;
    phi.b2 -= eta * grads.dphi.b2;
  }
  for (size_t k = 0; k < heads.size(); ++k) {
    heads[k].W -= eta * grads.dtheta[k].W;
    heads[k].b -= eta * grads.dtheta[k].b;
  }
}

Eigen::VectorXd flatten(const ClusterHead& head) {
  Eigen::VectorXd flat(head.W.size() + head.b.size());
  flat.head(head.W.size()) = Eigen::Map<const Eigen::VectorXd>(head.W.data(), head.W.size());
  flat.tail(head.b.size()) = head.b;
  return flat;
}

}  // namespace fedclust

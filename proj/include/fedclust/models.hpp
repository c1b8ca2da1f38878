#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "fedclust/datagen.hpp"
#include "fedclust/formulations.hpp"

namespace fedclust {

enum class ExtractorKind { linear, mlp1 };

ExtractorKind extractor_kind_from_string(const std::string& s);
std::string to_string(ExtractorKind k);

// Shared feature map z = g(x). linear: z = W1^T x. mlp1: z = W2^T tanh(W1^T x + b1) + b2.
struct FeatureExtractor {
  ExtractorKind kind = ExtractorKind::linear;
  int in_dim = 0;
  int hidden_dim = 0;
  int out_dim = 0;
  Eigen::MatrixXd W1;  // in x out (linear) or in x hidden (mlp1)
  Eigen::VectorXd b1;  // hidden (mlp1)
  Eigen::MatrixXd W2;  // hidden x out (mlp1)
  Eigen::VectorXd b2;  // out (mlp1)

  static FeatureExtractor init(ExtractorKind kind, int in_dim, int hidden_dim, int out_dim,
                               std::uint64_t key);

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& X) const;  // n x out
};

// Per-cluster softmax classifier over the extracted features.
struct ClusterHead {
  Eigen::MatrixXd W;  // feat x classes
  Eigen::VectorXd b;  // classes

  static ClusterHead init(int feat_dim, int num_classes, std::uint64_t key);
};

struct ExtractorGrad {
  Eigen::MatrixXd W1;
  Eigen::VectorXd b1;
  Eigen::MatrixXd W2;
  Eigen::VectorXd b2;
};

struct HeadGrad {
  Eigen::MatrixXd W;
  Eigen::VectorXd b;
};

// Accumulated gradients of a coefficient-weighted negative-log-score sum.
// Adding bundles of two batches equals the bundle of the concatenation
// (in fixed summation order).
struct GradientBundle {
  ExtractorGrad dphi;
  std::vector<HeadGrad> dtheta;
  long samples = 0;

  static GradientBundle zeros_like(const FeatureExtractor& phi,
                                   const std::vector<ClusterHead>& heads);
  void add(const GradientBundle& other);
  void scale(double s);
  Eigen::VectorXd flattened() const;
};

Eigen::VectorXd predict_proba(const FeatureExtractor& phi, const ClusterHead& head,
                              const Eigen::VectorXd& x);
Eigen::MatrixXd predict_proba_batch(const FeatureExtractor& phi, const ClusterHead& head,
                                    const Eigen::MatrixXd& X);
// log-softmax directly, for score computations that must not round-trip exp/log
Eigen::MatrixXd log_proba_batch(const FeatureExtractor& phi, const ClusterHead& head,
                                const Eigen::MatrixXd& X);

struct LikelihoodResult {
  Eigen::MatrixXd log_scores;  // n x K, per-sample per-cluster log L_k
  GradientBundle grads;
};

// Evaluates log L_k for every sample and cluster and accumulates
//   grads = d/dparams [ sum_{j,k} coeffs(j,k) * (-log L_k(x_j, y_j)) ].
// Passing the E-step responsibilities gamma as coeffs reproduces the
// responsibility-weighted likelihood updates, because (gamma/L) dL = gamma dlogL.
// The marginal inside a ratio formulation is frozen, so it contributes no
// gradient term.
LikelihoodResult likelihood_and_grads(const FeatureExtractor& phi,
                                      const std::vector<ClusterHead>& heads,
                                      const DataBatch& batch, const Eigen::MatrixXd& coeffs,
                                      const Formulation& formulation);

// params <- params - eta * grads, elementwise across extractor and heads
void sgd_step(FeatureExtractor& phi, std::vector<ClusterHead>& heads,
              const GradientBundle& grads, double eta);

Eigen::VectorXd flatten(const ClusterHead& head);

}  // namespace fedclust

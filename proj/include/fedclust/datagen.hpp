#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "fedclust/rng.hpp"

namespace fedclust {

enum class NoiseKind { none, pairflip, symflip };

NoiseKind noise_kind_from_string(const std::string& s);
std::string to_string(NoiseKind k);

struct ScenarioSpec {
  int num_clients = 1;
  int num_classes = 2;
  int samples_per_client = 64;
  int feature_dim = 8;
  double lda_alpha = 1.0;
  int concept_count = 3;
  double beta = 0.0;
  int feature_shift_kinds = 1;
  NoiseKind noise_kind = NoiseKind::none;
  double noise_rate = 0.0;
  std::uint64_t master_seed = 0;

  // Separation of the class-mean blobs; controls how easy the base
  // classification task is.
  double class_margin = 3.0;

  void validate() const;  // throws std::invalid_argument on bad fields
};

struct DataBatch {
  Eigen::MatrixXd X;  // n x d, one sample per row
  Eigen::VectorXi y;  // n
  int size() const { return static_cast<int>(y.size()); }
};

struct ClientDataset {
  int client_id = 0;
  DataBatch train, val, test;
  int planted_concept = 0;
  int planted_augmentation = 0;
  int train_count() const { return train.size(); }
};

struct GlobalTestSet {
  // index = concept id; same base features, labels mapped per concept
  std::vector<DataBatch> per_concept;
};

struct Scenario {
  std::vector<ClientDataset> clients;
  GlobalTestSet global_test;
  Eigen::MatrixXd class_means;  // C x d planted blob centers
};

// Number of permuted labels for a concept shift; 0 means identity.
int concept_shift_modulus(int num_classes, double beta);

// Labels y < m rotate by concept_id mod m; the rest stay fixed.
std::vector<int> apply_concept_shift(const std::vector<int>& labels, int concept_id,
                                     int num_classes, double beta);

std::vector<int> apply_label_noise(const std::vector<int>& labels, NoiseKind kind,
                                   double rate, int num_classes, RngStream& rng);

// Per-augmentation feature map x -> A*x + b. Id 0 is the identity; other ids
// derive their parameters from the id alone, so clients sharing an id share
// the transform exactly.
struct AffineTransform {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::VectorXd apply(const Eigen::VectorXd& x) const { return A * x + b; }
};

AffineTransform augmentation_transform(int aug_id, int dim, std::uint64_t master_seed);

Scenario generate_scenario(const ScenarioSpec& spec);

}  // namespace fedclust

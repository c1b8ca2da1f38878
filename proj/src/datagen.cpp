#include "fedclust/datagen.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fedclust {

namespace {

// Strength of the non-identity augmentations. The rotation is kept mild and
// the bias strong so feature shift mostly moves the client's overall feature
// mean rather than reshaping class geometry.
constexpr double kAugRotationAngle = 0.18;
constexpr double kAugScaleJitter = 0.06;
constexpr double kAugBiasNorm = 1.4;

constexpr int kProportionRetries = 16;

Eigen::VectorXd gaussian_vector(RngStream& rng, int dim) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v(i) = rng.normal();
  return v;
}

// C separated blob centers: random orthonormal directions when they fit in
// the ambient dimension, unit directions otherwise.
Eigen::MatrixXd make_class_means(int num_classes, int dim, double margin,
                                 std::uint64_t master_seed) {
  RngStream rng = RngStream::derived(master_seed, rng_tag("class-means"));
  Eigen::MatrixXd G(dim, num_classes);
  for (int c = 0; c < num_classes; ++c) G.col(c) = gaussian_vector(rng, dim);
  Eigen::MatrixXd dirs;
  if (num_classes <= dim) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(dim, num_classes);
    dirs = q;
  } else {
    dirs = G;
    for (int c = 0; c < num_classes; ++c) dirs.col(c).normalize();
  }
  return margin * dirs.transpose();  // C x d
}

struct RawSamples {
  std::vector<Eigen::VectorXd> x;
  std::vector<int> y;
};

DataBatch to_batch(const RawSamples& raw, int lo, int hi, int dim) {
  DataBatch b;
  b.X.resize(hi - lo, dim);
  b.y.resize(hi - lo);
  for (int i = lo; i < hi; ++i) {
    b.X.row(i - lo) = raw.x[static_cast<std::size_t>(i)].transpose();
    b.y(i - lo) = raw.y[static_cast<std::size_t>(i)];
  }
  return b;
}

// 70/15/15 with largest-remainder rounding; every partition gets >= 1 sample.
void split_sizes(int n, int& n_train, int& n_val, int& n_test) {
  n_train = static_cast<int>(std::lround(0.70 * n));
  n_val = static_cast<int>(std::lround(0.15 * n));
  n_test = n - n_train - n_val;
  auto smallest_needs_one = [&]() { return n_train < 1 || n_val < 1 || n_test < 1; };
  while (smallest_needs_one()) {
    int* largest = &n_train;
    if (n_val > *largest) largest = &n_val;
    if (n_test > *largest) largest = &n_test;
    int* smallest = &n_train;
    if (n_val < *smallest) smallest = &n_val;
    if (n_test < *smallest) smallest = &n_test;
    (*largest)--;
    (*smallest)++;
  }
}

}  // namespace

NoiseKind noise_kind_from_string(const std::string& s) {
  if (s == "none") return NoiseKind::none;
  if (s == "pairflip") return NoiseKind::pairflip;
  if (s == "symflip") return NoiseKind::symflip;
  throw std::invalid_argument("unknown noise_kind: " + s);
}

std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::none: return "none";
    case NoiseKind::pairflip: return "pairflip";
    case NoiseKind::symflip: return "symflip";
  }
  return "none";
}

void ScenarioSpec::validate() const {
  if (num_clients < 1) throw std::invalid_argument("num_clients must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (samples_per_client < 3)
    throw std::invalid_argument("samples_per_client must be >= 3 so every partition is nonempty");
  if (feature_dim < 1) throw std::invalid_argument("feature_dim must be >= 1");
  if (lda_alpha <= 0.0) throw std::invalid_argument("lda_alpha must be positive");
  if (concept_count < 1) throw std::invalid_argument("concepts must be >= 1");
  if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("beta must be in [0,1]");
  if (feature_shift_kinds < 1) throw std::invalid_argument("feature_shift_kinds must be >= 1");
  if (noise_rate < 0.0 || noise_rate >= 1.0) throw std::invalid_argument("noise_rate must be in [0,1)");
  if (class_margin <= 0.0) throw std::invalid_argument("class_margin must be positive");
}

int concept_shift_modulus(int num_classes, double beta) {
  if (beta <= 0.0) return 0;
  int m = std::max(2, static_cast<int>(std::lround(num_classes * beta)));
  return std::min(m, num_classes);
}

std::vector<int> apply_concept_shift(const std::vector<int>& labels, int concept_id,
                                     int num_classes, double beta) {
  if (concept_id < 0) throw std::invalid_argument("concept_id must be >= 0");
  int m = concept_shift_modulus(num_classes, beta);
  if (m == 0 || concept_id == 0) return labels;
  std::vector<int> out = labels;
  for (auto& y : out) {
    if (y < m) y = (y + concept_id) % m;
  }
  return out;
}

std::vector<int> apply_label_noise(const std::vector<int>& labels, NoiseKind kind,
                                   double rate, int num_classes, RngStream& rng) {
  if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("noise rate must be in [0,1]");
  if (kind == NoiseKind::none || rate == 0.0) return labels;
  std::vector<int> out = labels;
  for (auto& y : out) {
    if (rng.uniform() >= rate) continue;
    if (kind == NoiseKind::pairflip) {
      y = (y + 1) % num_classes;
    } else {
      // uniform over the C-1 wrong labels
      int r = rng.uniform_int(num_classes - 1);
      y = r < y ? r : r + 1;
    }
  }
  return out;
}

AffineTransform augmentation_transform(int aug_id, int dim, std::uint64_t master_seed) {
  AffineTransform t;
  t.A = Eigen::MatrixXd::Identity(dim, dim);
  t.b = Eigen::VectorXd::Zero(dim);
  if (aug_id == 0) return t;

  // Parameters depend only on (master_seed, aug_id), never on the client.
  RngStream rng = RngStream::derived(master_seed, rng_tag("augmentation"),
                                     static_cast<std::uint64_t>(aug_id));

  // rotation in a random 2-plane
  if (dim >= 2) {
    Eigen::MatrixXd pair(dim, 2);
    pair.col(0) = gaussian_vector(rng, dim);
    pair.col(1) = gaussian_vector(rng, dim);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(pair);
    Eigen::MatrixXd uv = qr.householderQ() * Eigen::MatrixXd::Identity(dim, 2);
    Eigen::VectorXd u = uv.col(0), v = uv.col(1);
    double a = kAugRotationAngle;
    Eigen::MatrixXd rot = Eigen::MatrixXd::Identity(dim, dim) +
                          (std::cos(a) - 1.0) * (u * u.transpose() + v * v.transpose()) +
                          std::sin(a) * (u * v.transpose() - v * u.transpose());
    t.A = rot;
  }

  // per-coordinate scaling
  Eigen::VectorXd scale(dim);
  for (int i = 0; i < dim; ++i)
    scale(i) = 1.0 + kAugScaleJitter * (2.0 * rng.uniform() - 1.0);
  t.A = scale.asDiagonal() * t.A;

  // additive bias
  Eigen::VectorXd dir = gaussian_vector(rng, dim);
  double nrm = dir.norm();
  if (nrm > 0) t.b = kAugBiasNorm * dir / nrm;
  return t;
}

Scenario generate_scenario(const ScenarioSpec& spec) {
  spec.validate();
  Scenario sc;
  sc.class_means = make_class_means(spec.num_classes, spec.feature_dim, spec.class_margin,
                                    spec.master_seed);

  sc.clients.reserve(static_cast<std::size_t>(spec.num_clients));
  for (int i = 0; i < spec.num_clients; ++i) {
    RngStream rng = RngStream::derived(spec.master_seed, rng_tag("client"),
                                       static_cast<std::uint64_t>(i));
    ClientDataset client;
    client.client_id = i;
    client.planted_concept = i % spec.concept_count;
    client.planted_augmentation = rng.uniform_int(spec.feature_shift_kinds);

    std::vector<int> counts;
    for (int attempt = 0;; ++attempt) {
      std::vector<double> props = rng.dirichlet(spec.lda_alpha, spec.num_classes);
      counts = rng.multinomial(spec.samples_per_client, props);
      int total = std::accumulate(counts.begin(), counts.end(), 0);
      if (total > 0) break;
      if (attempt >= kProportionRetries)
        throw std::runtime_error("client " + std::to_string(i) +
                                 ": no class received any samples after retries");
    }

    RawSamples raw;
    raw.x.reserve(static_cast<std::size_t>(spec.samples_per_client));
    raw.y.reserve(static_cast<std::size_t>(spec.samples_per_client));
    for (int c = 0; c < spec.num_classes; ++c) {
      for (int s = 0; s < counts[static_cast<std::size_t>(c)]; ++s) {
        Eigen::VectorXd x = sc.class_means.row(c).transpose() + gaussian_vector(rng, spec.feature_dim);
        raw.x.push_back(std::move(x));
        raw.y.push_back(c);
      }
    }

    // class-ordered generation above, so mix before partitioning
    std::vector<int> order(raw.y.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    RawSamples mixed;
    mixed.x.reserve(raw.x.size());
    mixed.y.reserve(raw.y.size());
    for (int idx : order) {
      mixed.x.push_back(raw.x[static_cast<std::size_t>(idx)]);
      mixed.y.push_back(raw.y[static_cast<std::size_t>(idx)]);
    }

    mixed.y = apply_concept_shift(mixed.y, client.planted_concept, spec.num_classes, spec.beta);
    mixed.y = apply_label_noise(mixed.y, spec.noise_kind, spec.noise_rate, spec.num_classes, rng);

    AffineTransform aug =
        augmentation_transform(client.planted_augmentation, spec.feature_dim, spec.master_seed);
    if (client.planted_augmentation != 0) {
      for (auto& x : mixed.x) x = aug.apply(x);
    }

    int n = static_cast<int>(mixed.y.size());
    int n_train = 0, n_val = 0, n_test = 0;
    split_sizes(n, n_train, n_val, n_test);
    client.train = to_batch(mixed, 0, n_train, spec.feature_dim);
    client.val = to_batch(mixed, n_train, n_train + n_val, spec.feature_dim);
    client.test = to_batch(mixed, n_train + n_val, n, spec.feature_dim);
    sc.clients.push_back(std::move(client));
  }

  // Shared evaluation pool: base-distribution features, one label view per
  // concept, no augmentation and no label noise.
  RngStream grng = RngStream::derived(spec.master_seed, rng_tag("global-test"));
  int n_global = spec.samples_per_client;
  std::vector<double> uniform_props(static_cast<std::size_t>(spec.num_classes),
                                    1.0 / spec.num_classes);
  RawSamples pool;
  pool.x.reserve(static_cast<std::size_t>(n_global));
  pool.y.reserve(static_cast<std::size_t>(n_global));
  for (int s = 0; s < n_global; ++s) {
    int c = grng.categorical(uniform_props);
    pool.x.push_back(sc.class_means.row(c).transpose() + gaussian_vector(grng, spec.feature_dim));
    pool.y.push_back(c);
  }
  sc.global_test.per_concept.resize(static_cast<std::size_t>(spec.concept_count));
  for (int g = 0; g < spec.concept_count; ++g) {
    RawSamples view = pool;
    view.y = apply_concept_shift(view.y, g, spec.num_classes, spec.beta);
    sc.global_test.per_concept[static_cast<std::size_t>(g)] =
        to_batch(view, 0, n_global, spec.feature_dim);
  }
  return sc;
}

}  // namespace fedclust

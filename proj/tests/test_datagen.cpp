#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "fedclust/datagen.hpp"
#include "fedclust/rng.hpp"

using namespace fedclust;

namespace {

std::vector<int> label_histogram(const ClientDataset& client, int num_classes) {
  std::vector<int> hist(static_cast<std::size_t>(num_classes), 0);
  for (const DataBatch* b : {&client.train, &client.val, &client.test}) {
    for (int i = 0; i < b->y.size(); ++i) hist[static_cast<std::size_t>(b->y(i))]++;
  }
  return hist;
}

bool batches_equal(const DataBatch& a, const DataBatch& b) {
  return a.X.rows() == b.X.rows() && a.X.cols() == b.X.cols() && a.X == b.X && a.y == b.y;
}

}  // namespace

TEST_CASE("huge dirichlet concentration yields near-uniform client histograms") {
  ScenarioSpec spec;
  spec.num_clients = 4;
  spec.num_classes = 4;
  spec.samples_per_client = 2000;
  spec.feature_dim = 6;
  spec.lda_alpha = 1e6;
  spec.concept_count = 1;
  spec.master_seed = 5;
  const Scenario sc = generate_scenario(spec);
  for (const ClientDataset& client : sc.clients) {
    const auto hist = label_histogram(client, spec.num_classes);
    const int total = std::accumulate(hist.begin(), hist.end(), 0);
    REQUIRE(total == spec.samples_per_client);
    for (int count : hist) {
      const double frac = static_cast<double>(count) / total;
      CHECK(std::abs(frac - 0.25) <= 0.05);
    }
  }
}

TEST_CASE("zero shift fraction leaves labels at their base values") {
  ScenarioSpec a;
  a.num_clients = 6;
  a.num_classes = 5;
  a.samples_per_client = 60;
  a.feature_dim = 4;
  a.beta = 0.0;
  a.concept_count = 3;
  a.master_seed = 21;
  ScenarioSpec b = a;
  b.concept_count = 1;
  const Scenario sa = generate_scenario(a);
  const Scenario sb = generate_scenario(b);
  for (std::size_t i = 0; i < sa.clients.size(); ++i) {
    CHECK(batches_equal(sa.clients[i].train, sb.clients[i].train));
    CHECK(batches_equal(sa.clients[i].val, sb.clients[i].val));
    CHECK(batches_equal(sa.clients[i].test, sb.clients[i].test));
  }
}

TEST_CASE("two-label cyclic permutation across three concepts") {
  const std::vector<int> base{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  // C=10, beta=0.2 -> first two labels rotate by concept id
  CHECK(apply_concept_shift(base, 0, 10, 0.2) == base);
  const std::vector<int> swapped{1, 0, 2, 3, 4, 5, 6, 7, 8, 9};
  CHECK(apply_concept_shift(base, 1, 10, 0.2) == swapped);
  CHECK(apply_concept_shift(base, 2, 10, 0.2) == base);
}

TEST_CASE("concept shift worked examples") {
  CHECK(apply_concept_shift({0, 1, 9}, 1, 10, 0.1) == std::vector<int>{1, 0, 9});
  const std::vector<int> any{3, 0, 7, 1};
  CHECK(apply_concept_shift(any, 0, 10, 0.7) == any);
  CHECK(apply_concept_shift({0, 1, 2, 3}, 2, 10, 0.4) == std::vector<int>{2, 3, 0, 1});
}

TEST_CASE("concept shift modulus") {
  CHECK(concept_shift_modulus(10, 0.0) == 0);
  CHECK(concept_shift_modulus(10, 0.1) == 2);
  CHECK(concept_shift_modulus(10, 0.4) == 4);
  CHECK(concept_shift_modulus(3, 1.0) == 3);
}

TEST_CASE("zero noise rate leaves labels unchanged") {
  RngStream rng(9);
  const std::vector<int> labels{0, 1, 2, 3, 4};
  CHECK(apply_label_noise(labels, NoiseKind::symflip, 0.0, 5, rng) == labels);
  CHECK(apply_label_noise(labels, NoiseKind::none, 0.5, 5, rng) == labels);
}

TEST_CASE("pair flip at full rate advances every label by one") {
  RngStream rng(9);
  const auto out = apply_label_noise({3}, NoiseKind::pairflip, 1.0, 10, rng);
  CHECK(out == std::vector<int>{4});
  const auto wrap = apply_label_noise({9}, NoiseKind::pairflip, 1.0, 10, rng);
  CHECK(wrap == std::vector<int>{0});
}

TEST_CASE("symmetric flip matches its sampling rule") {
  RngStream rng(31);
  const int n = 10000;
  const std::vector<int> labels(static_cast<std::size_t>(n), 3);
  const auto out = apply_label_noise(labels, NoiseKind::symflip, 0.4, 10, rng);
  int flipped = 0;
  std::vector<int> target_counts(10, 0);
  for (int y : out) {
    CHECK(y >= 0);
    CHECK(y < 10);
    if (y != 3) {
      flipped++;
      target_counts[static_cast<std::size_t>(y)]++;
    }
  }
  const double flip_frac = static_cast<double>(flipped) / n;
  CHECK(std::abs(flip_frac - 0.4) <= 0.02);

  // chi-square over the 9 wrong classes, df = 8, p > 0.01 <=> stat < 20.09
  const double expected = static_cast<double>(flipped) / 9.0;
  double stat = 0.0;
  for (int c = 0; c < 10; ++c) {
    if (c == 3) continue;
    const double diff = target_counts[static_cast<std::size_t>(c)] - expected;
    stat += diff * diff / expected;
  }
  CHECK(stat < 20.09);
}

TEST_CASE("generation is deterministic in the master seed") {
  ScenarioSpec spec;
  spec.num_clients = 5;
  spec.num_classes = 3;
  spec.samples_per_client = 48;
  spec.feature_dim = 7;
  spec.beta = 0.6;
  spec.concept_count = 2;
  spec.feature_shift_kinds = 3;
  spec.noise_kind = NoiseKind::pairflip;
  spec.noise_rate = 0.1;
  spec.master_seed = 99;
  const Scenario a = generate_scenario(spec);
  const Scenario b = generate_scenario(spec);
  REQUIRE(a.clients.size() == b.clients.size());
  for (std::size_t i = 0; i < a.clients.size(); ++i) {
    CHECK(batches_equal(a.clients[i].train, b.clients[i].train));
    CHECK(batches_equal(a.clients[i].val, b.clients[i].val));
    CHECK(batches_equal(a.clients[i].test, b.clients[i].test));
    CHECK(a.clients[i].planted_concept == b.clients[i].planted_concept);
    CHECK(a.clients[i].planted_augmentation == b.clients[i].planted_augmentation);
  }
  REQUIRE(a.global_test.per_concept.size() == b.global_test.per_concept.size());
  for (std::size_t g = 0; g < a.global_test.per_concept.size(); ++g) {
    CHECK(batches_equal(a.global_test.per_concept[g], b.global_test.per_concept[g]));
  }
}

TEST_CASE("planted concepts produce distinguishable label maps") {
  ScenarioSpec spec;
  spec.num_clients = 4;
  spec.num_classes = 4;
  spec.samples_per_client = 40;
  spec.feature_dim = 4;
  spec.beta = 0.5;
  spec.concept_count = 2;
  spec.master_seed = 3;
  const Scenario sc = generate_scenario(spec);
  std::vector<int> identity(4);
  std::iota(identity.begin(), identity.end(), 0);
  bool found_differing_pair = false;
  for (std::size_t i = 0; i < sc.clients.size() && !found_differing_pair; ++i) {
    for (std::size_t j = i + 1; j < sc.clients.size(); ++j) {
      if (sc.clients[i].planted_concept == sc.clients[j].planted_concept) continue;
      const auto map_i = apply_concept_shift(identity, sc.clients[i].planted_concept, 4, 0.5);
      const auto map_j = apply_concept_shift(identity, sc.clients[j].planted_concept, 4, 0.5);
      if (map_i != map_j) {
        found_differing_pair = true;
        break;
      }
    }
  }
  CHECK(found_differing_pair);
}

TEST_CASE("partitions are nonempty and labels stay in range") {
  ScenarioSpec spec;
  spec.num_clients = 3;
  spec.num_classes = 4;
  spec.samples_per_client = 64;
  spec.feature_dim = 5;
  spec.master_seed = 12;
  const Scenario sc = generate_scenario(spec);
  for (const ClientDataset& client : sc.clients) {
    CHECK(client.train.size() == 45);  // lround(0.70 * 64)
    CHECK(client.val.size() == 10);    // lround(0.15 * 64)
    CHECK(client.test.size() == 9);
    CHECK(client.train_count() > 0);
    for (const DataBatch* b : {&client.train, &client.val, &client.test}) {
      for (int i = 0; i < b->y.size(); ++i) {
        CHECK(b->y(i) >= 0);
        CHECK(b->y(i) < spec.num_classes);
      }
    }
  }
}

TEST_CASE("global test pool shares features across concept views") {
  ScenarioSpec spec;
  spec.num_clients = 2;
  spec.num_classes = 6;
  spec.samples_per_client = 90;
  spec.feature_dim = 5;
  spec.beta = 0.5;
  spec.concept_count = 3;
  spec.master_seed = 8;
  const Scenario sc = generate_scenario(spec);
  REQUIRE(sc.global_test.per_concept.size() == 3);
  const DataBatch& v0 = sc.global_test.per_concept[0];
  for (std::size_t g = 1; g < 3; ++g) {
    const DataBatch& vg = sc.global_test.per_concept[g];
    CHECK(v0.X == vg.X);
    CHECK(v0.y != vg.y);  // beta > 0 relabels the low classes
  }
}

TEST_CASE("augmentation zero is the identity and others are reproducible") {
  const AffineTransform id = augmentation_transform(0, 6, 77);
  CHECK(id.A == Eigen::MatrixXd::Identity(6, 6));
  CHECK(id.b == Eigen::VectorXd::Zero(6));

  const AffineTransform t1 = augmentation_transform(2, 6, 77);
  const AffineTransform t2 = augmentation_transform(2, 6, 77);
  CHECK(t1.A == t2.A);
  CHECK(t1.b == t2.b);
  CHECK(t1.A != Eigen::MatrixXd::Identity(6, 6));
  CHECK(t1.b.norm() == doctest::Approx(1.4));

  const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(6, -1.0, 1.0);
  CHECK((t1.apply(x) - (t1.A * x + t1.b)).norm() == doctest::Approx(0.0));
}

TEST_CASE("invalid scenario specs are rejected") {
  ScenarioSpec spec;
  spec.num_classes = 1;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = ScenarioSpec{};
  spec.lda_alpha = 0.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = ScenarioSpec{};
  spec.noise_rate = 1.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = ScenarioSpec{};
  spec.beta = 1.5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "fedclust/rng.hpp"

using namespace fedclust;

TEST_CASE("identical keys reproduce identical streams") {
  RngStream a(42), b(42);
  for (int i = 0; i < 256; ++i) CHECK(a.uniform() == b.uniform());
}

TEST_CASE("derive_key separates sibling streams") {
  const auto k1 = derive_key(1, "client", 0);
  const auto k2 = derive_key(1, "client", 1);
  const auto k3 = derive_key(1, "batch", 0);
  const auto k4 = derive_key(2, "client", 0);
  CHECK(k1 != k2);
  CHECK(k1 != k3);
  CHECK(k1 != k4);
  CHECK(k2 != k3);
}

TEST_CASE("derive_key is order sensitive") {
  CHECK(derive_key(1, 2, 3) != derive_key(1, 3, 2));
  CHECK(derive_key(1, "a", "b") != derive_key(1, "b", "a"));
}

TEST_CASE("derived streams are reproducible") {
  auto a = RngStream::derived(9, "sample", 4);
  auto b = RngStream::derived(9, "sample", 4);
  for (int i = 0; i < 64; ++i) CHECK(a.uniform() == b.uniform());
}

TEST_CASE("uniform lies in the half-open unit interval") {
  RngStream r(7);
  for (int i = 0; i < 2000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("uniform_int covers its range and rejects bad bounds") {
  RngStream r(7);
  std::vector<int> seen(5, 0);
  for (int i = 0; i < 2000; ++i) {
    const int v = r.uniform_int(5);
    REQUIRE(v >= 0);
    REQUIRE(v < 5);
    seen[static_cast<std::size_t>(v)]++;
  }
  for (int c : seen) CHECK(c > 0);
  CHECK_THROWS_AS(r.uniform_int(0), std::invalid_argument);
  CHECK_THROWS_AS(r.uniform_int(-3), std::invalid_argument);
}

TEST_CASE("normal draws have roughly the requested moments") {
  RngStream r(123);
  const int n = 20000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal(2.0, 3.0);
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(mean == doctest::Approx(2.0).epsilon(0.05));
  CHECK(var == doctest::Approx(9.0).epsilon(0.05));
}

TEST_CASE("dirichlet draws live on the simplex") {
  RngStream r(3);
  for (int i = 0; i < 50; ++i) {
    const auto v = r.dirichlet(0.5, 8);
    REQUIRE(v.size() == 8);
    double sum = 0.0;
    for (double x : v) {
      CHECK(x >= 0.0);
      sum += x;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("dirichlet falls back to uniform on degenerate draws") {
  RngStream r(3);
  bool saw_uniform = false;
  for (int i = 0; i < 100 && !saw_uniform; ++i) {
    const auto v = r.dirichlet(1e-300, 4);
    saw_uniform = std::all_of(v.begin(), v.end(), [](double x) { return x == 0.25; });
  }
  CHECK(saw_uniform);
}

TEST_CASE("categorical never selects zero-weight categories") {
  RngStream r(11);
  const std::vector<double> w{0.0, 2.0, 0.0, 1.0};
  for (int i = 0; i < 500; ++i) {
    const int idx = r.categorical(w);
    CHECK((idx == 1 || idx == 3));
  }
}

TEST_CASE("multinomial counts sum to the number of draws") {
  RngStream r(5);
  const auto counts = r.multinomial(100, {0.2, 0.3, 0.5});
  REQUIRE(counts.size() == 3);
  CHECK(std::accumulate(counts.begin(), counts.end(), 0) == 100);
}

TEST_CASE("shuffle permutes without changing contents") {
  RngStream r(77);
  std::vector<int> v{1, 2, 3, 4, 5, 5, 6};
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  r.shuffle(v);
  std::sort(v.begin(), v.end());
  CHECK(v == sorted);
}

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <type_traits>
#include <vector>

namespace fedclust {

// splitmix64 finalizer; used to derive independent stream keys from a master
// seed plus a path of tags, so every client/round/purpose gets its own engine.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a so call sites can use readable stream names.
constexpr std::uint64_t rng_tag(const char* s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  while (*s) {
    h ^= static_cast<unsigned char>(*s++);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t tag_value(const char* s) { return rng_tag(s); }
template <class T, std::enable_if_t<std::is_integral_v<T>, int> = 0>
constexpr std::uint64_t tag_value(T v) {
  return static_cast<std::uint64_t>(v);
}

inline std::uint64_t derive_key(std::uint64_t master) { return splitmix64(master); }

template <class Head, class... Rest>
std::uint64_t derive_key(std::uint64_t master, Head head, Rest... rest) {
  return derive_key(splitmix64(master ^ splitmix64(tag_value(head) + 0x632be59bd9b4e019ULL)),
                    rest...);
}

class RngStream {
 public:
  explicit RngStream(std::uint64_t key) : eng_(key) {}

  template <class... Tags>
  static RngStream derived(std::uint64_t master, Tags... tags) {
    return RngStream(derive_key(master, tags...));
  }

  std::mt19937_64& engine() { return eng_; }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    return std::uniform_int_distribution<int>(0, n - 1)(eng_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }

  double gamma(double alpha) {
    return std::gamma_distribution<double>(alpha, 1.0)(eng_);
  }

  // Dirichlet(alpha, ..., alpha) over k categories via normalized gammas.
  std::vector<double> dirichlet(double alpha, int k) {
    std::vector<double> v(static_cast<std::size_t>(k));
    double sum = 0.0;
    for (auto& x : v) {
      x = gamma(alpha);
      sum += x;
    }
    if (sum <= 0.0 || !std::isfinite(sum)) {
      for (auto& x : v) x = 1.0 / k;  // degenerate draw at tiny alpha
      return v;
    }
    for (auto& x : v) x /= sum;
    return v;
  }

  // index draw from an (unnormalized) non-negative weight vector
  int categorical(const std::vector<double>& w) {
    double total = 0.0;
    for (double x : w) total += x;
    double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      acc += w[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(w.size()) - 1;
  }

  // n draws into per-category counts
  std::vector<int> multinomial(int n, const std::vector<double>& p) {
    std::vector<int> counts(p.size(), 0);
    for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(categorical(p))]++;
    return counts;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), eng_);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace fedclust

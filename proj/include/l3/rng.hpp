#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace l3 {

// Counter-style PRNG (splitmix64 core). Used everywhere instead of <random>
// engines so that streams are reproducible across compilers and the full
// state is a pair of u64 that serializes trivially into checkpoints.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0x9e3779b97f4a7c15ull) : state_(seed), gauss_spare_(0.0), has_spare_(false) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return gauss_spare_;
    }
    const double a = uniform();
    const double r = std::sqrt(-2.0 * std::log(1.0 - a));
    const double t = uniform() * 2.0 * std::numbers::pi;
    gauss_spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  // Derive an independent stream; used to give each parameter tensor its own
  // seed so init does not depend on construction order.
  Rng fork(uint64_t salt) {
    Rng r(next_u64() ^ (salt * 0xd1342543de82ef95ull));
    return r;
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) {
    state_ = s;
    has_spare_ = false;
  }

 private:
  uint64_t state_;
  double gauss_spare_;
  bool has_spare_;
};

// Zipf(s) sampler over [0, n) via inverse-CDF on precomputed weights.
class ZipfSampler {
 public:
  ZipfSampler(int n, double exponent);
  int sample(Rng& rng) const;

 private:
  std::vector<double> cdf_;
};

inline ZipfSampler::ZipfSampler(int n, double exponent) {
  cdf_.resize(n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    acc += 1.0 / std::pow(static_cast<double>(i + 1), exponent);
    cdf_[i] = acc;
  }
  for (auto& c : cdf_) c /= acc;
}

inline int ZipfSampler::sample(Rng& rng) const {
  const double u = rng.uniform();
  auto it = std::lower_bound(cdf_.begin(), cdf_.end(), u);
  if (it == cdf_.end()) --it;
  return static_cast<int>(it - cdf_.begin());
}

}  // namespace l3

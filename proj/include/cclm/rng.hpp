#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace cclm {

// xoshiro256** with splitmix64 seeding. Hand-rolled so that streams are
// bit-reproducible across standard libraries and trivially serializable.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    if (n == 0) throw std::runtime_error("Rng::below: n must be positive");
    return next_u64() % n;
  }

  // Standard normal via Box-Muller (stateless between calls).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Index sampled proportionally to weights (weights need not be normalized).
  size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw std::runtime_error("Rng::categorical: nonpositive total weight");
    double u = uniform() * total;
    for (size_t i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return i;
    }
    return weights.size() - 1;
  }

  std::vector<uint64_t> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
  void restore(const std::vector<uint64_t>& st) {
    if (st.size() != 4) throw std::runtime_error("Rng::restore: state must have 4 words");
    for (int i = 0; i < 4; ++i) s_[i] = st[i];
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t s_[4];
};

// A set of independently seeded named substreams derived from one root seed.
// The same (seed, name) pair always yields the same stream, so components
// (corpus, masking, negatives, init, batching) stay decoupled.
class RngPool {
 public:
  using StateMap = std::map<std::string, std::vector<uint64_t>>;

  RngPool() : seed_(0) {}
  explicit RngPool(uint64_t seed) : seed_(seed) {}

  Rng& stream(const std::string& name) {
    auto it = streams_.find(name);
    if (it == streams_.end()) {
      it = streams_.emplace(name, Rng(seed_ ^ fnv1a(name))).first;
    }
    return it->second;
  }

  uint64_t seed() const { return seed_; }

  StateMap states() const {
    StateMap out;
    for (const auto& [name, rng] : streams_) out[name] = rng.state();
    return out;
  }

  void restore(const StateMap& states) {
    for (const auto& [name, st] : states) stream(name).restore(st);
  }

  static uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  uint64_t seed_;
  std::map<std::string, Rng> streams_;
};

}  // namespace cclm

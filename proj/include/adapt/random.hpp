#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "adapt/errors.hpp"
#include "adapt/tensor.hpp"

namespace adapt {

namespace detail {
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}
}  // namespace detail

// Maps a uniform draw to a Gumbel(0,1) sample; the draw is clamped away from
// {0,1} so the double log stays finite.
inline double gumbel_from_uniform(double u) {
  u = std::clamp(u, 1e-12, 1.0 - 1e-12);
  return -std::log(-std::log(u));
}

// Seeded, stream-addressed random source. All draws go through the fully
// specified std::mt19937_64 engine and hand-written transforms, so identical
// (seed, stream_id) pairs give identical sequences across runs and platforms.
class RandomSource {
 public:
  explicit RandomSource(uint64_t seed, uint64_t stream_id = 0)
      : seed_(seed), stream_(stream_id),
        eng_(detail::splitmix64(seed ^ detail::splitmix64(stream_id + 0x632be59bd9b4e019ull))) {}

  uint64_t seed() const { return seed_; }
  uint64_t stream_id() const { return stream_; }

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the second value is discarded to keep the draw count per call
  // fixed (state restores stay exact).
  double normal() {
    double u1 = std::max(uniform(), 1e-12);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double gumbel() { return gumbel_from_uniform(uniform()); }

  // Uniform index in [0, n)
  size_t index(size_t n) {
    if (n == 0) throw std::invalid_argument("RandomSource::index: n must be positive");
    size_t i = static_cast<size_t>(uniform() * static_cast<double>(n));
    return std::min(i, n - 1);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const size_t n = static_cast<size_t>(std::distance(first, last));
    for (size_t i = n; i > 1; --i) std::swap(first[i - 1], first[index(i)]);
  }

  // Derives an independent stream; deterministic in (seed, stream_id, key).
  RandomSource substream(uint64_t key) const {
    return RandomSource(seed_, detail::splitmix64(stream_ ^ detail::splitmix64(key)));
  }

  std::string save_state() const {
    std::ostringstream os;
    os << seed_ << ' ' << stream_ << ' ' << eng_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> seed_ >> stream_ >> eng_;
    if (!is) throw data_error("RandomSource::load_state: malformed state string");
  }

 private:
  uint64_t seed_;
  uint64_t stream_;
  std::mt19937_64 eng_;
};

// i.i.d. Gumbel(0,1) samples as a constant (non-recorded) tensor.
template <typename T>
Tensor<T> gumbel_sample(RandomSource& rng, Shape shape) {
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(rng.gumbel());
  return Tensor<T>::from_values(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> randn_tensor(RandomSource& rng, Shape shape, T stddev = T(1)) {
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(rng.normal()) * stddev;
  return Tensor<T>::from_values(std::move(shape), std::move(v));
}

}  // namespace adapt

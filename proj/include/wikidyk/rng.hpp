#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace wikidyk {

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// Portable seeded generator. The standard distributions are
// implementation-defined, so sampling is done by hand on top of the
// (fully specified) mt19937_64 bit stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  /// Uniform double in [0, 1).
  double uniform();
  double normal();

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// Keyed bijection on [0, n): a small Feistel network over the enclosing
/// power-of-two domain with cycle walking. Lets a stream of n records be
/// emitted in shuffled order without materializing the permutation.
class IndexPermutation {
 public:
  IndexPermutation(std::uint64_t n, std::uint64_t seed);

  std::uint64_t operator()(std::uint64_t index) const;
  std::uint64_t size() const noexcept { return n_; }

 private:
  std::uint64_t encrypt(std::uint64_t x) const;

  std::uint64_t n_;
  unsigned half_bits_ = 1;
  std::uint64_t half_mask_ = 1;
  std::uint64_t keys_[4]{};
};

}  // namespace wikidyk

#pragma once

#include <cstdint>
#include <functional>
#include <random>

#include <Eigen/Dense>

namespace shiftcai {

/// Mixes (seed, stream, index) into an independent 64-bit seed (splitmix64).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

// Stream tags, so that different consumers of one user seed never overlap.
namespace streams {
inline constexpr std::uint64_t kTruthOracle = 0x7472757468ULL;
inline constexpr std::uint64_t kOuterData = 0x6f75746572ULL;
inline constexpr std::uint64_t kBootstrap = 0x626f6f74ULL;
inline constexpr std::uint64_t kBootstrapRedraw = 0x726564726177ULL;
inline constexpr std::uint64_t kCovariates = 0x636f76ULL;
inline constexpr std::uint64_t kPopulation = 0x706f70ULL;
inline constexpr std::uint64_t kSampling = 0x73616d70ULL;
}  // namespace streams

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * std::generate_canonical<double, 53>(engine_);
  }
  Eigen::VectorXd normal_vector(Eigen::Index size);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Runs body(i) for i in [0, count) on up to `workers` threads.
/// Work is split into contiguous blocks; callers write results by index, so
/// output never depends on the worker count.
void parallel_for(std::size_t count, unsigned workers, const std::function<void(std::size_t)>& body);

/// Default worker count: hardware concurrency, at least one.
unsigned default_workers();

}  // namespace shiftcai

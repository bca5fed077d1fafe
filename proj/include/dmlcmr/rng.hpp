#pragma once

#include <cstdint>
#include <random>

namespace dmlcmr {

/// Portable random source used everywhere in the library.
///
/// The bit stream is std::mt19937_64 (fully specified by the standard). The
/// variate transforms are implemented here rather than taken from <random>
/// so that generated datasets are identical across standard libraries:
///   - uniform():  (u64 >> 11) * 2^-53, in [0, 1)
///   - normal():   Marsaglia polar method, spare value cached
///   - uniform_int(lo, hi): rejection sampling on the top bits
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  // Inclusive on both ends.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finaliser.
std::uint64_t mix64(std::uint64_t x);

/// Seed for an independent sub-stream: every task that needs randomness gets
/// derive_seed(parent, task_id), so results never depend on execution order.
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t task);

}  // namespace dmlcmr

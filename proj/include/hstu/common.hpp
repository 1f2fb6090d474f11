#pragma once

// Shared basics: scalar type, errors, deterministic RNG, flop accounting.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace hstu {

#if defined(HSTU_REAL_FLOAT32)
using real = float;
#else
// Tests and gradient checks assume 64-bit; float32 is a benchmark-only build mode.
using real = double;
#endif

// ----- errors ---------------------------------------------------------------

// Bad configs, malformed files, contract violations at the API boundary.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (divergence, bad gradients).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ----- deterministic rng ----------------------------------------------------
// mt19937_64 is fully specified by the standard; std::*_distribution is not,
// so every draw below is hand-rolled to keep streams byte-identical anywhere.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t raw() { return engine_(); }

  // Unbiased integer in [0, bound) via rejection.
  std::uint64_t uniform_u64(std::uint64_t bound) {
    if (bound == 0) throw ConfigError("uniform_u64: bound must be positive");
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % bound;
  }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one value per call (no cached second draw, keeps replay trivial).
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Dirichlet(1,...,1): normalized Exp(1) draws.
  std::vector<double> dirichlet_flat(std::size_t k) {
    std::vector<double> g(k);
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      double u;
      do {
        u = uniform();
      } while (u <= 0.0);
      g[i] = -std::log(u);
      total += g[i];
    }
    for (double& v : g) v /= total;
    return g;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_u64(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// ----- flop accounting --------------------------------------------------------
// Closed-form counts incremented by the kernels that do the work. Attention is
// tracked apart from dense projections so serving-cost ratios can be asserted
// exactly.

struct FlopCounter {
  std::uint64_t attention = 0;
  std::uint64_t linear = 0;
  std::uint64_t other = 0;
  std::uint64_t total() const { return attention + linear + other; }
  void reset() { attention = linear = other = 0; }
};

inline thread_local FlopCounter* tls_flops = nullptr;

struct FlopScope {
  explicit FlopScope(FlopCounter& c) : prev_(tls_flops) { tls_flops = &c; }
  ~FlopScope() { tls_flops = prev_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* prev_;
};

inline void count_attention_flops(std::uint64_t n) {
  if (tls_flops) tls_flops->attention += n;
}
inline void count_linear_flops(std::uint64_t n) {
  if (tls_flops) tls_flops->linear += n;
}
inline void count_other_flops(std::uint64_t n) {
  if (tls_flops) tls_flops->other += n;
}

// Per-score-cell cost besides the two dot products: bias add, SiLU (or exp)
// taken as two, normalization divide. Shared with the closed-form predictions.
inline constexpr std::uint64_t kAttnCellExtraFlops = 4;

// ----- misc -------------------------------------------------------------------

inline int worker_count() {
  if (const char* env = std::getenv("HSTU_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

// FNV-1a over arbitrary integer streams; used for cache fingerprints.
struct Fnv1a {
  std::uint64_t state = 1469598103934665603ull;
  void feed(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      state ^= (v >> (8 * i)) & 0xff;
      state *= 1099511628211ull;
    }
  }
  std::uint64_t value() const { return state; }
};

}  // namespace hstu

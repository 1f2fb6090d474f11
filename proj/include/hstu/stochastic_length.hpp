#pragma once

// Stochastic length training: long sequences are subsampled to L* = floor(N^(a/2))
// with probability 1 - N^a/n^2, shortening the attention cost tail while keeping
// occasional full passes. Includes the three subsequence selectors and the
// sparsity metrics used to report length distributions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "hstu/common.hpp"

namespace hstu {

enum class SelectionMethod { greedy, random_uniform, feature_weighted };

struct SLPolicy {
  double alpha = 2.0;              // in (1, 2]
  std::size_t max_content_len = 0; // N_c
  SelectionMethod method = SelectionMethod::feature_weighted;

  void validate() const {
    require(alpha > 1.0 && alpha <= 2.0, "stochastic length alpha must lie in (1, 2]");
    require(max_content_len >= 1, "stochastic length needs a positive max content length");
  }

  std::size_t threshold() const {  // L*
    validate();
    return std::size_t(std::floor(std::pow(double(max_content_len), alpha / 2.0)));
  }

  double keep_full_probability(std::size_t n) const {
    double p = std::pow(double(max_content_len), alpha) / (double(n) * double(n));
    return std::min(1.0, std::max(0.0, p));
  }
};

struct SLDecision {
  bool keep_full = true;
  std::size_t target_len = 0;  // L* when subsampling
};

inline SLDecision sl_decide(std::size_t n, const SLPolicy& policy, Rng& rng) {
  policy.validate();
  require(n >= 1, "sequence length must be positive");
  std::size_t lstar = policy.threshold();
  SLDecision d;
  d.target_len = lstar;
  if (n <= lstar) return d;
  d.keep_full = rng.uniform() < policy.keep_full_probability(n);
  return d;
}

// Picks L of n positions, preserving relative order. Recency feature
// f_i = now - t_i; greedy keeps the L smallest f_i, feature-weighted draws
// sequentially without replacement with weight proportional to
// max(0, 1 - f_i / sum_j f_j), renormalizing after each draw.
inline std::vector<std::size_t> select_subsequence(std::size_t n, std::size_t L,
                                                   SelectionMethod method,
                                                   const std::vector<std::int64_t>& timestamps,
                                                   std::int64_t now, Rng& rng) {
  require(L <= n, "cannot select more positions than the sequence holds");
  std::vector<std::size_t> picked;
  if (L == 0) return picked;
  if (L == n) {
    picked.resize(n);
    std::iota(picked.begin(), picked.end(), 0);
    return picked;
  }
  switch (method) {
    case SelectionMethod::greedy: {
      require(timestamps.size() == n, "greedy selection needs one timestamp per position");
      // smallest f_i = most recent; stable on ties so earlier positions win
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return now - timestamps[a] < now - timestamps[b];
      });
      picked.assign(order.begin(), order.begin() + std::ptrdiff_t(L));
      break;
    }
    case SelectionMethod::random_uniform: {
      std::vector<std::size_t> pool(n);
      std::iota(pool.begin(), pool.end(), 0);
      for (std::size_t i = 0; i < L; ++i) {
        std::size_t j = i + std::size_t(rng.uniform_u64(pool.size() - i));
        std::swap(pool[i], pool[j]);
      }
      picked.assign(pool.begin(), pool.begin() + std::ptrdiff_t(L));
      break;
    }
    case SelectionMethod::feature_weighted: {
      require(timestamps.size() == n, "weighted selection needs one timestamp per position");
      std::vector<double> f(n);
      double fsum = 0;
      for (std::size_t i = 0; i < n; ++i) {
        f[i] = double(now - timestamps[i]);
        fsum += f[i];
      }
      std::vector<double> w(n);
      for (std::size_t i = 0; i < n; ++i)
        w[i] = fsum > 0 ? std::max(0.0, 1.0 - f[i] / fsum) : 1.0;
      std::vector<std::size_t> alive(n);
      std::iota(alive.begin(), alive.end(), 0);
      for (std::size_t draw = 0; draw < L; ++draw) {
        double wsum = 0;
        for (std::size_t idx : alive) wsum += w[idx];
        std::size_t chosen_slot = alive.size() - 1;
        if (wsum > 0) {
          double r = rng.uniform() * wsum;
          double acc = 0;
          for (std::size_t slot = 0; slot < alive.size(); ++slot) {
            acc += w[alive[slot]];
            if (r < acc) {
              chosen_slot = slot;
              break;
            }
          }
        } else {
          chosen_slot = std::size_t(rng.uniform_u64(alive.size()));
        }
        picked.push_back(alive[chosen_slot]);
        alive.erase(alive.begin() + std::ptrdiff_t(chosen_slot));
      }
      std::sort(picked.begin(), picked.end());
      break;
    }
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

struct SparsityMetrics {
  double sparsity = 0;  // 1 - mean(len)/N
  double s2 = 0;        // 1 - mean(len^2)/N^2
};

inline SparsityMetrics sparsity_metrics(const std::vector<std::size_t>& lengths, std::size_t N) {
  require(N >= 1, "max length must be positive");
  require(!lengths.empty(), "sparsity needs at least one length");
  double sum = 0, sum2 = 0;
  for (std::size_t n : lengths) {
    require(n <= N, "length exceeds the stated maximum");
    sum += double(n);
    sum2 += double(n) * double(n);
  }
  double count = double(lengths.size());
  SparsityMetrics m;
  m.sparsity = 1.0 - (sum / count) / double(N);
  m.s2 = 1.0 - (sum2 / count) / (double(N) * double(N));
  return m;
}

}  // namespace hstu

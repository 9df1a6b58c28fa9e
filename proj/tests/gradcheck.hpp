#pragma once

#include <algorithm>
#include <functional>

#include "chainseg/core/autodiff.hpp"
#include "chainseg/core/rng.hpp"

namespace cstest {

using chainseg::Rng;
using chainseg::Var;

struct GradCheckResult {
  double max_rel = 0.0;
  int probes = 0;
  size_t worst_leaf = 0;   // index into `leaves` of the worst probe
  int64_t worst_idx = 0;   // flat element index within that leaf
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central-difference check of a scalar-valued graph builder against the tape.
// `build` must reconstruct the graph from the leaves' current values on every
// call; leaves are perturbed in place. 64-bit only: step 1e-5 paired with a
// 1e-3 relative tolerance leaves no float32 headroom.
//
// Piecewise-linear ops (relu, max pooling) make an occasional probe interval
// straddle a kink, where the central difference measures an average of two
// one-sided slopes instead of the derivative. A straddle-induced discrepancy
// collapses once the step no longer spans the kink, while a genuinely wrong
// analytic gradient is step-independent, so a probe that misses `tol` at the
// base step is retried at h/8 and h/64 and keeps its best agreement.
//
// `floor` bounds the rel-error denominator from below, so coordinates whose
// true derivative is (near-)zero are held to |a - n| <= tol*floor in absolute
// terms. Such coordinates exist structurally: a conv bias feeding a
// normalization layer is mean-subtracted away, and central differences on it
// measure pure rounding noise (~1e-9 here, so 1e-7 sits safely above it while
// staying far below any gradient magnitude that could influence training).
template <typename F>
GradCheckResult grad_check(F&& build, const std::vector<Var<double>>& leaves, Rng& rng,
                           int probes_per_leaf = 5, double h = 1e-5, double tol = 1e-3,
                           double floor = 1e-4) {
  for (const auto& l : leaves) l->drop_grad();
  {
    auto loss = build();
    chainseg::backward(loss);
  }
  std::vector<chainseg::Tensor<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& l : leaves)
    analytic.push_back(l->grad_ready ? l->grad
                                     : chainseg::Tensor<double>::zeros(l->value.shape()));

  GradCheckResult res;
  chainseg::NoGrad ng;
  for (size_t li = 0; li < leaves.size(); ++li) {
    const auto& l = leaves[li];
    for (int p = 0; p < probes_per_leaf; ++p) {
      const int64_t idx = rng.uniform_int(l->value.numel());
      const double orig = l->value[idx];
      const double a = analytic[li][idx];
      double best = std::numeric_limits<double>::infinity();
      double best_numeric = 0.0;
      for (const double step : {h, h / 8.0, h / 64.0}) {
        l->value[idx] = orig + step;
        const double fp = build()->value[0];
        l->value[idx] = orig - step;
        const double fm = build()->value[0];
        l->value[idx] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        const double rel =
            std::abs(a - numeric) / std::max({floor, std::abs(a), std::abs(numeric)});
        if (rel < best) {
          best = rel;
          best_numeric = numeric;
        }
        if (best <= tol) break;
      }
      if (best > res.max_rel) {
        res.max_rel = best;
        res.worst_leaf = li;
        res.worst_idx = idx;
        res.worst_analytic = a;
        res.worst_numeric = best_numeric;
      }
      ++res.probes;
    }
  }
  for (const auto& l : leaves) l->drop_grad();
  return res;
}

inline chainseg::Tensor<double> random_tensor(std::vector<int64_t> shape, Rng& rng,
                                              double lo = -1.0, double hi = 1.0) {
  chainseg::Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline Var<double> random_var(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  return chainseg::make_var(random_tensor(std::move(shape), rng, lo, hi), true);
}

}  // namespace cstest

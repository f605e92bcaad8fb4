#pragma once

// Reference implementations used to cross-check the library, written as
// directly as possible (loops, double accumulation) so they stay obviously
// correct even if slow.

#include <cmath>
#include <functional>
#include <vector>

#include "wmbench/tensor.hpp"

namespace oracle {

// Central finite differences of a scalar function over a flat float array.
inline std::vector<double> fd_gradient(std::vector<float>& x,
                                       const std::function<double()>& eval, double h = 1e-2) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); i++) {
    const float keep = x[i];
    x[i] = keep + static_cast<float>(h);
    const double up = eval();
    x[i] = keep - static_cast<float>(h);
    const double dn = eval();
    x[i] = keep;
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

// Worst relative mismatch between analytic and finite-difference gradients.
// Coordinates are normalized by their own magnitude, floored at a few
// percent of the largest gradient so near-zero entries do not explode the
// ratio.
inline double max_rel_err(const std::vector<float>& analytic, const std::vector<double>& fd) {
  double gmax = 0.0;
  for (double v : fd) gmax = std::max(gmax, std::abs(v));
  for (float v : analytic) gmax = std::max(gmax, static_cast<double>(std::abs(v)));
  if (gmax == 0.0) return 0.0;
  double worst = 0.0;
  for (size_t i = 0; i < fd.size(); i++) {
    const double denom = std::max(std::abs(fd[i]), 0.05 * gmax);
    worst = std::max(worst, std::abs(fd[i] - analytic[i]) / denom);
  }
  return worst;
}

// Fraction of rows whose argmax equals the paired label, counted one by one.
inline double recall_by_counting(const wmbench::Tensor& probs, const std::vector<int>& labels) {
  int hits = 0;
  for (int s = 0; s < probs.n; s++) {
    const float* row = probs.sample(s);
    int best = 0;
    for (int i = 1; i < probs.per_sample(); i++)
      if (row[i] > row[best]) best = i;
    if (best == labels[s]) hits++;
  }
  return static_cast<double>(hits) / probs.n;
}

// Reference Jensen-Shannon divergence in nats, natural-log KL against the
// midpoint, computed in double.
inline double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  double js = 0.0;
  for (size_t i = 0; i < p.size(); i++) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) js += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) js += 0.5 * q[i] * std::log(q[i] / m);
  }
  return js;
}

}  // namespace oracle

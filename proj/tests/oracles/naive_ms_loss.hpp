#pragma once

// Per-anchor double-loop multi-similarity loss. The gradient is assembled pair
// by pair: dL/dS_ik contributes x_k to anchor i and x_i to item k.

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace oracle {

struct MsResult {
  double loss = 0.0;
  std::vector<std::vector<double>> grad;
};

inline MsResult ms_loss(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& y,
                        double alpha = 2.0, double beta = 50.0, double lam = 0.5, double margin = 0.1) {
  const std::size_t n = x.size(), d = x[0].size();
  auto sim = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += x[a][k] * x[b][k];
    return s;
  };
  const double inf = std::numeric_limits<double>::infinity();
  MsResult out;
  out.grad.assign(n, std::vector<double>(d, 0.0));
  std::vector<std::vector<double>> dS(n, std::vector<double>(n, 0.0));
  double total = 0.0;
  int active = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double hardest_neg = -inf, easiest_pos = inf;
    bool any_neg = false, any_pos = false;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      if (y[k] == y[i]) {
        any_pos = true;
        if (sim(i, k) < easiest_pos) easiest_pos = sim(i, k);
      } else {
        any_neg = true;
        if (sim(i, k) > hardest_neg) hardest_neg = sim(i, k);
      }
    }
    std::vector<std::size_t> P, N;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      if (y[k] == y[i] && (!any_neg || sim(i, k) <= hardest_neg + margin)) P.push_back(k);
      if (y[k] != y[i] && any_pos && sim(i, k) >= easiest_pos - margin) N.push_back(k);
    }
    if (P.empty() && N.empty()) continue;
    ++active;
    double sp = 0.0, sn = 0.0;
    for (std::size_t k : P) sp += std::exp(-alpha * (sim(i, k) - lam));
    for (std::size_t k : N) sn += std::exp(beta * (sim(i, k) - lam));
    total += std::log(1.0 + sp) / alpha + std::log(1.0 + sn) / beta;
    for (std::size_t k : P) dS[i][k] = -std::exp(-alpha * (sim(i, k) - lam)) / (1.0 + sp);
    for (std::size_t k : N) dS[i][k] = std::exp(beta * (sim(i, k) - lam)) / (1.0 + sn);
  }
  if (active == 0) return out;
  out.loss = total / active;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      if (dS[i][k] == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) {
        out.grad[i][c] += dS[i][k] * x[k][c] / active;
        out.grad[k][c] += dS[i][k] * x[i][c] / active;
      }
    }
  return out;
}

}  // namespace oracle

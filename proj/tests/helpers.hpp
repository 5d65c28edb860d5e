#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "perft/moe.hpp"
#include "perft/numerics.hpp"
#include "perft/rng.hpp"
#include "perft/tensor.hpp"

namespace perft::testing {

inline Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Tensor t = Tensor::zeros(rows, cols);
  for (auto& x : t.data()) x = scale * rng.normal();
  return t;
}

inline FfnExpert make_expert(Rng& rng, std::size_t d, std::size_t da, Activation act, bool gated, const std::string& name) {
  FfnExpert e;
  e.w_up = Parameter(name + ".w_up", random_tensor(rng, d, da, 0.5));
  e.w_down = Parameter(name + ".w_down", random_tensor(rng, da, d, 0.5));
  if (gated) e.w_gate = Parameter(name + ".w_gate", random_tensor(rng, d, da, 0.5));
  e.act = act;
  return e;
}

inline MoeLayer make_layer(Rng& rng, std::size_t d, std::size_t da, std::size_t n, std::size_t k, bool renorm,
                    Activation act = Activation::silu, bool gated = false) {
  MoeLayer m;
  m.router.weight = Parameter("router", random_tensor(rng, d, n));
  m.router.top_k = k;
  m.router.renormalize = renorm;
  for (std::size_t i = 0; i < n; ++i) m.experts.push_back(make_expert(rng, d, da, act, gated, "e" + std::to_string(i)));
  return m;
}

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c = Tensor::zeros(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline Tensor naive_transpose(const Tensor& a) {
  Tensor t = Tensor::zeros(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// Top-k by repeated argmax; strict comparison keeps the lowest index on ties.
inline std::vector<std::size_t> brute_topk(const std::vector<double>& p, std::size_t k) {
  std::vector<bool> taken(p.size(), false);
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < k; ++r) {
    std::size_t best = p.size();
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (taken[i]) continue;
      if (best == p.size() || p[i] > p[best]) best = i;
    }
    taken[best] = true;
    out.push_back(best);
  }
  return out;
}

inline double max_grad_error(const std::vector<Parameter*>& params, const std::vector<Tensor>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    worst = std::max(worst, max_relative_error(params[i]->grad, numeric[i]));
  }
  return worst;
}

}  // namespace perft::testing

#include "perft/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "perft/errors.hpp"

namespace perft {

RouteResult route_from_logits(const Tensor& logits, std::size_t k, bool renormalize) {
  const std::size_t n = logits.cols();
  if (k == 0 || k > n) {
    throw ConfigError("router top_k=" + std::to_string(k) + " must be in [1, " +
                      std::to_string(n) + "]");
  }
  RouteResult r;
  r.logits = logits;
  r.probs = softmax_rows(logits);
  r.gates = Tensor::zeros(logits.rows(), n);
  r.renormalized = renormalize;
  r.topk.resize(logits.rows());

  std::vector<std::size_t> order(n);
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    auto p = r.probs.row(t);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        return p[a] > p[b] || (p[a] == p[b] && a < b);
                      });
    auto& chosen = r.topk[t];
    chosen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    double kept = 0.0;
    for (auto i : chosen) kept += p[i];
    auto g = r.gates.row(t);
    for (auto i : chosen) g[i] = renormalize ? p[i] / kept : p[i];
  }
  return r;
}

RouteResult route(const Router& router, const Tensor& h, RouterCache* cache) {
  if (h.cols() != router.weight.value.rows()) {
    throw DimensionError("route: hidden width " + std::to_string(h.cols()) +
                         " does not match router " + shape_string(router.weight.value.shape()));
  }
  Tensor logits = matmul(h, router.weight.value);
  if (router.delta) {
    PeftCache dc;
    logits += peft_forward(*router.delta, h, cache ? &dc : nullptr);
    if (cache) cache->delta = std::move(dc);
  }
  if (cache) cache->input = h;
  return route_from_logits(logits, router.top_k, router.renormalize);
}

Tensor route_backward(const RouteResult& route, const Tensor& d_gates, const Tensor* d_probs_extra,
                      const Tensor* d_logits_extra) {
  const std::size_t tokens = route.tokens();
  const std::size_t n = route.num_experts();
  Tensor d_probs = Tensor::zeros(tokens, n);
  for (std::size_t t = 0; t < tokens; ++t) {
    auto p = route.probs.row(t);
    auto dg = d_gates.row(t);
    auto dp = d_probs.row(t);
    const auto& chosen = route.topk[t];
    if (route.renormalized) {
      double kept = 0.0;
      double weighted = 0.0;
      for (auto i : chosen) {
        kept += p[i];
        weighted += dg[i] * p[i];
      }
      for (auto i : chosen) dp[i] = dg[i] / kept - weighted / (kept * kept);
    } else {
      for (auto i : chosen) dp[i] = dg[i];
    }
  }
  if (d_probs_extra) d_probs += *d_probs_extra;
  Tensor d_logits = softmax_rows_backward(route.probs, d_probs);
  if (d_logits_extra) d_logits += *d_logits_extra;
  return d_logits;
}

Tensor router_backward(Router& router, const RouterCache& cache, const Tensor& d_logits) {
  Tensor dh = Tensor::zeros(cache.input.rows(), cache.input.cols());
  const bool need_weight = router.weight.trainable;
  matmul_backward(cache.input, router.weight.value, d_logits, &dh,
                  need_weight ? &router.weight.grad : nullptr);
  if (router.delta && cache.delta) dh += peft_backward(*router.delta, *cache.delta, d_logits);
  return dh;
}

Tensor ffn_forward(const FfnExpert& expert, const Tensor& h, FfnCache* cache) {
  Tensor pre = matmul(h, expert.w_up.value);
  Tensor hidden = apply_activation(expert.act, pre);
  Tensor gate_pre;
  if (expert.w_gate) {
    gate_pre = matmul(h, expert.w_gate->value);
    for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] *= gate_pre[i];
  }
  Tensor out = matmul(hidden, expert.w_down.value);
  if (cache) {
    cache->input = h;
    cache->pre = std::move(pre);
    cache->gate_pre = std::move(gate_pre);
    cache->hidden = std::move(hidden);
  }
  return out;
}

Tensor ffn_backward(FfnExpert& expert, const FfnCache& cache, const Tensor& d_out) {
  if (expert.w_down.trainable) gemm_accumulate(expert.w_down.grad, cache.hidden, true, d_out, false);
  Tensor d_hidden = Tensor::zeros(cache.hidden.rows(), cache.hidden.cols());
  gemm_accumulate(d_hidden, d_out, false, expert.w_down.value, true);

  Tensor d_in = Tensor::zeros(cache.input.rows(), cache.input.cols());
  if (expert.w_gate) {
    Tensor d_gate_pre = d_hidden;
    for (std::size_t i = 0; i < d_gate_pre.size(); ++i) {
      d_gate_pre[i] *= activate(expert.act, cache.pre[i]);
    }
    for (std::size_t i = 0; i < d_hidden.size(); ++i) d_hidden[i] *= cache.gate_pre[i];
    if (expert.w_gate->trainable) gemm_accumulate(expert.w_gate->grad, cache.input, true, d_gate_pre, false);
    gemm_accumulate(d_in, d_gate_pre, false, expert.w_gate->value, true);
  }
  if (expert.act != Activation::identity) {
    for (std::size_t i = 0; i < d_hidden.size(); ++i) {
      d_hidden[i] *= activate_derivative(expert.act, cache.pre[i]);
    }
  }
  if (expert.w_up.trainable) gemm_accumulate(expert.w_up.grad, cache.input, true, d_hidden, false);
  gemm_accumulate(d_in, d_hidden, false, expert.w_up.value, true);
  return d_in;
}

std::vector<std::vector<std::size_t>> dispatch_lists(const RouteResult& route) {
  std::vector<std::vector<std::size_t>> lists(route.num_experts());
  for (std::size_t t = 0; t < route.tokens(); ++t) {
    for (auto i : route.topk[t]) {
      if (route.gates(t, i) != 0.0) lists[i].push_back(t);
    }
  }
  return lists;
}

MoeOutput moe_forward(const MoeLayer& layer, const Tensor& h) { return moe_forward(layer, h, nullptr); }

MoeOutput moe_forward(const MoeLayer& layer, const Tensor& h, MoeCache* cache) {
  if (layer.router.num_experts() != layer.experts.size()) {
    throw ConfigError("router width does not match expert count");
  }
  MoeOutput result;
  result.route = route(layer.router, h, cache ? &cache->router : nullptr);
  result.output = Tensor::zeros(h.rows(), h.cols());
  auto dispatch = dispatch_lists(result.route);
  if (cache) {
    cache->experts.assign(layer.experts.size(), {});
    cache->expert_out.assign(layer.experts.size(), {});
  }
  for (std::size_t i = 0; i < layer.experts.size(); ++i) {
    const auto& rows = dispatch[i];
    if (rows.empty()) continue;
    Tensor sub = gather_rows(h, rows);
    Tensor y = ffn_forward(layer.experts[i], sub, cache ? &cache->experts[i] : nullptr);
    result.expert_evaluations += rows.size();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double g = result.route.gates(rows[r], i);
      auto dst = result.output.row(rows[r]);
      auto src = y.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g * src[j];
    }
    if (cache) cache->expert_out[i] = std::move(y);
  }
  if (cache) {
    cache->route = result.route;
    cache->dispatch = std::move(dispatch);
  }
  return result;
}

Tensor moe_backward(MoeLayer& layer, const MoeCache& cache, const Tensor& d_out,
                    const AuxWeights& aux) {
  const auto& rt = cache.route;
  Tensor dh = Tensor::zeros(d_out.rows(), d_out.cols());
  Tensor d_gates = Tensor::zeros(rt.tokens(), rt.num_experts());
  for (std::size_t i = 0; i < layer.experts.size(); ++i) {
    const auto& rows = cache.dispatch[i];
    if (rows.empty()) continue;
    const Tensor& y = cache.expert_out[i];
    Tensor dy = Tensor::zeros(rows.size(), d_out.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const std::size_t t = rows[r];
      const double g = rt.gates(t, i);
      auto src = d_out.row(t);
      auto dst = dy.row(r);
      auto yr = y.row(r);
      double dot = 0.0;
      for (std::size_t j = 0; j < dst.size(); ++j) {
        dst[j] = g * src[j];
        dot += src[j] * yr[j];
      }
      d_gates(t, i) = dot;
    }
    Tensor dsub = ffn_backward(layer.experts[i], cache.experts[i], dy);
    scatter_add_rows(dh, dsub, rows);
  }
  std::optional<Tensor> dp_extra;
  std::optional<Tensor> dz_extra;
  if (aux.load_balance != 0.0) {
    dp_extra = load_balance_grad(rt);
    *dp_extra *= aux.load_balance;
  }
  if (aux.z_loss != 0.0) {
    dz_extra = z_loss_grad(rt.logits);
    *dz_extra *= aux.z_loss;
  }
  Tensor d_logits = route_backward(rt, d_gates, dp_extra ? &*dp_extra : nullptr,
                                   dz_extra ? &*dz_extra : nullptr);
  dh += router_backward(layer.router, cache.router, d_logits);
  return dh;
}

double load_balance_loss(const RouteResult& route) {
  const std::size_t tokens = route.tokens();
  const std::size_t n = route.num_experts();
  if (tokens == 0) throw InputError("load_balance_loss: no tokens");
  std::vector<double> f(n, 0.0);
  std::vector<double> p(n, 0.0);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (auto i : route.topk[t]) f[i] += 1.0;
    for (std::size_t i = 0; i < n; ++i) p[i] += route.probs(t, i);
  }
  const double k = static_cast<double>(route.topk.front().size());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    loss += (f[i] / (static_cast<double>(tokens) * k)) * (p[i] / static_cast<double>(tokens));
  }
  return static_cast<double>(n) * loss;
}

Tensor load_balance_grad(const RouteResult& route) {
  const std::size_t tokens = route.tokens();
  const std::size_t n = route.num_experts();
  std::vector<double> f(n, 0.0);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (auto i : route.topk[t]) f[i] += 1.0;
  }
  const double k = static_cast<double>(route.topk.front().size());
  const double denom = static_cast<double>(tokens);
  Tensor g = Tensor::zeros(tokens, n);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      g(t, i) = static_cast<double>(n) * (f[i] / (denom * k)) / denom;
    }
  }
  return g;
}

double z_loss(const Tensor& logits) {
  const auto lse = logsumexp_rows(logits);
  double s = 0.0;
  for (double v : lse) s += v * v;
  return s / static_cast<double>(logits.rows());
}

Tensor z_loss_grad(const Tensor& logits) {
  const auto lse = logsumexp_rows(logits);
  Tensor g = softmax_rows(logits);
  const double inv_t = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t t = 0; t < g.rows(); ++t) {
    for (auto& v : g.row(t)) v *= 2.0 * lse[t] * inv_t;
  }
  return g;
}

}  // namespace perft

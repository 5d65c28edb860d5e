#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "perft/adapter.hpp"
#include "perft/numerics.hpp"
#include "perft/tensor.hpp"

namespace perft {

// Token-wise top-K router. Columns of `weight` (D x N) are the expert vectors.
// An optional low-rank delta on the logits implements gate-LoRA.
struct Router {
  Parameter weight;
  std::size_t top_k = 1;
  bool renormalize = false;
  std::optional<PeftExpert> delta;

  std::size_t num_experts() const noexcept { return weight.value.cols(); }
};

struct RouteResult {
  Tensor logits;  // T x N
  Tensor probs;   // softmax over all N
  Tensor gates;   // top-K masked (and optionally renormalized) probs
  std::vector<std::vector<std::size_t>> topk;  // per token, descending prob, ties to lowest index
  bool renormalized = false;

  std::size_t tokens() const noexcept { return probs.rows(); }
  std::size_t num_experts() const noexcept { return probs.cols(); }
};

// Softmax, then top-K mask, then (optionally) division by the kept mass.
RouteResult route_from_logits(const Tensor& logits, std::size_t k, bool renormalize);

struct RouterCache {
  Tensor input;
  std::optional<PeftCache> delta;
};

RouteResult route(const Router& router, const Tensor& h, RouterCache* cache = nullptr);

// Gradient through the gates to the logits. `d_probs_extra` carries terms that
// depend on the probabilities directly (load-balance loss), `d_logits_extra`
// terms that depend on the logits (z-loss); either may be null.
Tensor route_backward(const RouteResult& route, const Tensor& d_gates, const Tensor* d_probs_extra,
                      const Tensor* d_logits_extra);

// Backpropagates d_logits into the router weights (and delta) and returns dH.
Tensor router_backward(Router& router, const RouterCache& cache, const Tensor& d_logits);

// FFN expert act(h W_up) W_down, or [act(h W_up) (.) (h W_gate)] W_down when gated.
// Columns of W_up are the key-memory vectors.
struct FfnExpert {
  Parameter w_up;    // D x D_a
  Parameter w_down;  // D_a x D
  std::optional<Parameter> w_gate;
  Activation act = Activation::relu;

  std::size_t width() const noexcept { return w_up.value.cols(); }
};

struct FfnCache {
  Tensor input;
  Tensor pre;
  Tensor gate_pre;
  Tensor hidden;
};

Tensor ffn_forward(const FfnExpert& expert, const Tensor& h, FfnCache* cache = nullptr);
Tensor ffn_backward(FfnExpert& expert, const FfnCache& cache, const Tensor& d_out);

struct MoeLayer {
  Router router;
  std::vector<FfnExpert> experts;

  std::size_t num_experts() const noexcept { return experts.size(); }
};

// Tokens dispatched to each expert, read off a route.
std::vector<std::vector<std::size_t>> dispatch_lists(const RouteResult& route);

struct MoeOutput {
  Tensor output;
  RouteResult route;
  // (token, expert) pairs actually evaluated; zero-gate experts are skipped.
  std::size_t expert_evaluations = 0;
};

MoeOutput moe_forward(const MoeLayer& layer, const Tensor& h);

struct MoeCache {
  RouterCache router;
  RouteResult route;
  std::vector<std::vector<std::size_t>> dispatch;
  std::vector<FfnCache> experts;
  std::vector<Tensor> expert_out;
};

MoeOutput moe_forward(const MoeLayer& layer, const Tensor& h, MoeCache* cache);

// Auxiliary-loss weights folded into a backward pass.
struct AuxWeights {
  double load_balance = 0.0;
  double z_loss = 0.0;
  double peft_load_balance = 0.0;
  double peft_z_loss = 0.0;
};

Tensor moe_backward(MoeLayer& layer, const MoeCache& cache, const Tensor& d_out,
                    const AuxWeights& aux = {});

// N * sum_i f_i P_i with f_i = (tokens whose top-K contains i) / (T K) and
// P_i the mean routing probability.
double load_balance_loss(const RouteResult& route);
// d loss / d probs with f held constant.
Tensor load_balance_grad(const RouteResult& route);

// mean_t logsumexp(logits_t)^2
double z_loss(const Tensor& logits);
Tensor z_loss_grad(const Tensor& logits);

}  // namespace perft

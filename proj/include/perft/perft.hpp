#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "perft/adapter.hpp"
#include "perft/attention.hpp"
#include "perft/moe.hpp"

namespace perft {

// Routed / embedded / dense / single PEFT experts on the MoE layer, plus the
// two MoE-agnostic baselines (LoRA on W_q, W_v and LoRA on the router).
enum class Variant { routed, embedded, dense, single, qv_lora, gate_lora };

std::string_view variant_name(Variant v);  // "R", "E", "D", "S", "qv_lora", "gate_lora"
Variant parse_variant(std::string_view name);
bool adapts_moe(Variant v);  // R, E, D, S

struct PerftConfig {
  Variant variant = Variant::routed;
  std::size_t num_experts = 2;  // M; forced to N for E and to 1 for S
  std::size_t top_k = 2;        // K_peft; only R routes
  std::size_t bottleneck = 8;   // D_B
  Activation act = Activation::identity;
  std::optional<double> alpha;  // defaults to D_B (unit output scale)
  bool renormalize = false;     // PEFT router; E follows the backbone router
  bool peft_z_loss = false;

  double alpha_value() const { return alpha.value_or(static_cast<double>(bottleneck)); }
  // Applies the variant constraints that depend on the backbone.
  PerftConfig resolved(std::size_t backbone_experts, std::size_t backbone_top_k) const;
  void validate() const;
};

// The PEFT router follows the backbone gating contract exactly.
using PeftRouter = Router;

struct MoeAdapters {
  Variant variant = Variant::routed;
  std::vector<PeftExpert> experts;
  std::optional<PeftRouter> router;  // routed only
};

struct AdaptedMoeCache {
  MoeCache base;
  std::vector<PeftCache> embedded;
  std::vector<Tensor> embedded_out;
  RouterCache peft_router;
  std::optional<RouteResult> peft_route;
  std::vector<std::vector<std::size_t>> peft_dispatch;
  std::vector<PeftCache> peft;
  std::vector<Tensor> peft_out;
};

struct AdaptedMoeOutput {
  Tensor output;
  RouteResult route;
  std::optional<RouteResult> peft_route;
  std::size_t expert_evaluations = 0;
  std::size_t adapter_evaluations = 0;
};

// MoE layer plus the attached PEFT experts (null adapters = plain MoE).
// Residual addition is the caller's job.
AdaptedMoeOutput adapted_moe_forward(const MoeLayer& moe, const MoeAdapters* adapters,
                                     const Tensor& h, AdaptedMoeCache* cache = nullptr);
Tensor adapted_moe_backward(MoeLayer& moe, MoeAdapters* adapters, const AdaptedMoeCache& cache,
                            const Tensor& d_out, const AuxWeights& aux = {});

// MoE(h) + sum_j G~(h)_j delta_j(h)
AdaptedMoeOutput perft_r_forward(const MoeLayer& moe, const PeftRouter& router,
                                 std::span<const PeftExpert> experts, const Tensor& h);
// sum_i G(h)_i (E_i(h) + delta_i(h)) with the backbone gating
AdaptedMoeOutput perft_e_forward(const MoeLayer& moe, std::span<const PeftExpert> experts,
                                 const Tensor& h);
// MoE(h) + sum_j delta_j(h); PERFT-S is the M = 1 case
AdaptedMoeOutput perft_d_forward(const MoeLayer& moe, std::span<const PeftExpert> experts,
                                 const Tensor& h);

// Builds the adapters for a resolved MoE-adapting config (R, E, D, S).
MoeAdapters make_moe_adapters(const PerftConfig& cfg, std::size_t d_model, const std::string& prefix,
                              Rng& rng);

// LoRA deltas on W_q and W_v; the base matrices stay frozen.
void attach_qv_lora(Attention& attn, std::size_t rank, double alpha, Rng& rng,
                    const std::string& prefix = "attn");
// LoRA delta on the router logits, rank x (D + N) parameters.
void attach_gate_lora(Router& router, std::size_t rank, double alpha, Rng& rng,
                      const std::string& prefix = "router");

// ------------------------------------------------------------ accounting

struct BackboneDims {
  std::size_t d_model = 0;
  std::size_t layers = 0;
  std::size_t experts = 0;  // N
  std::size_t top_k = 0;    // K
  std::size_t expert_width = 0;
  std::uint64_t activated_total_model = 0;  // parameters active per token
};

// OLMoE-1B-7B: D=2048, L=16, Top8/64, D_a=1024, SwiGLU experts, untied
// 50304-token embeddings; 1,282,017,280 parameters active per token.
BackboneDims olmoe_1b_7b_dims();

struct ParamAccount {
  std::uint64_t activated_trainable = 0;
  std::uint64_t total_trainable = 0;
  std::uint64_t activated_total_model = 0;
  double ratio_percent = 0.0;
};

ParamAccount count_activated(const PerftConfig& cfg, const BackboneDims& dims);

// "2.10M" style, two decimals.
std::string format_millions(std::uint64_t n);

}  // namespace perft

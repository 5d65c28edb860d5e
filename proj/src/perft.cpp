#include "perft/perft.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>

#include "perft/errors.hpp"

namespace perft {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::routed: return "R";
    case Variant::embedded: return "E";
    case Variant::dense: return "D";
    case Variant::single: return "S";
    case Variant::qv_lora: return "qv_lora";
    case Variant::gate_lora: return "gate_lora";
  }
  return "R";
}

Variant parse_variant(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s.rfind("perft-", 0) == 0 || s.rfind("perft_", 0) == 0) s = s.substr(6);
  if (s == "r" || s == "routed") return Variant::routed;
  if (s == "e" || s == "embedded") return Variant::embedded;
  if (s == "d" || s == "dense") return Variant::dense;
  if (s == "s" || s == "single") return Variant::single;
  if (s == "qv_lora" || s == "qv-lora" || s == "lora_qv") return Variant::qv_lora;
  if (s == "gate_lora" || s == "gate-lora" || s == "router_lora") return Variant::gate_lora;
  throw ConfigError("unknown PERFT variant '" + std::string(name) + "'");
}

bool adapts_moe(Variant v) {
  return v == Variant::routed || v == Variant::embedded || v == Variant::dense ||
         v == Variant::single;
}

PerftConfig PerftConfig::resolved(std::size_t backbone_experts, std::size_t backbone_top_k) const {
  PerftConfig c = *this;
  switch (variant) {
    case Variant::embedded:
      c.num_experts = backbone_experts;
      c.top_k = backbone_top_k;
      break;
    case Variant::single:
      c.num_experts = 1;
      c.top_k = 1;
      break;
    case Variant::dense:
      c.top_k = c.num_experts;
      break;
    case Variant::qv_lora:
    case Variant::gate_lora:
      c.num_experts = 1;
      c.top_k = 1;
      break;
    case Variant::routed: break;
  }
  return c;
}

void PerftConfig::validate() const {
  if (bottleneck < 1) throw ConfigError("perft.bottleneck must be >= 1");
  if (num_experts < 1) throw ConfigError("perft.experts must be >= 1");
  if (variant == Variant::routed && (top_k < 1 || top_k > num_experts)) {
    throw ConfigError("perft.top_k must be in [1, perft.experts] for PERFT-R");
  }
  if (!(alpha_value() > 0.0)) throw ConfigError("perft.alpha must be positive");
  if (act != Activation::identity && act != Activation::relu) {
    throw ConfigError("perft.activation must be identity (LoRA) or relu (parallel adapter)");
  }
}

AdaptedMoeOutput adapted_moe_forward(const MoeLayer& moe, const MoeAdapters* adapters,
                                     const Tensor& h, AdaptedMoeCache* cache) {
  AdaptedMoeOutput result;
  const bool adapted = adapters && adapts_moe(adapters->variant);

  if (adapted && adapters->variant == Variant::embedded) {
    if (adapters->experts.size() != moe.num_experts()) {
      throw ConfigError("PERFT-E needs one adapter per FFN expert (" +
                        std::to_string(moe.num_experts()) + "), got " +
                        std::to_string(adapters->experts.size()));
    }
    result.route = route(moe.router, h, cache ? &cache->base.router : nullptr);
    result.output = Tensor::zeros(h.rows(), h.cols());
    auto dispatch = dispatch_lists(result.route);
    if (cache) {
      cache->base.experts.assign(moe.num_experts(), {});
      cache->base.expert_out.assign(moe.num_experts(), {});
      cache->embedded.assign(moe.num_experts(), {});
      cache->embedded_out.assign(moe.num_experts(), {});
    }
    for (std::size_t i = 0; i < moe.num_experts(); ++i) {
      const auto& rows = dispatch[i];
      if (rows.empty()) continue;
      Tensor sub = gather_rows(h, rows);
      Tensor y = ffn_forward(moe.experts[i], sub, cache ? &cache->base.experts[i] : nullptr);
      Tensor delta = peft_forward(adapters->experts[i], sub, cache ? &cache->embedded[i] : nullptr);
      result.expert_evaluations += rows.size();
      result.adapter_evaluations += rows.size();
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const double g = result.route.gates(rows[r], i);
        auto dst = result.output.row(rows[r]);
        auto yr = y.row(r);
        auto dr = delta.row(r);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g * (yr[j] + dr[j]);
      }
      if (cache) {
        cache->base.expert_out[i] = std::move(y);
        cache->embedded_out[i] = std::move(delta);
      }
    }
    if (cache) {
      cache->base.route = result.route;
      cache->base.dispatch = std::move(dispatch);
    }
    return result;
  }

  MoeOutput base = moe_forward(moe, h, cache ? &cache->base : nullptr);
  result.output = std::move(base.output);
  result.route = std::move(base.route);
  result.expert_evaluations = base.expert_evaluations;
  if (!adapted) return result;

  if (adapters->variant == Variant::routed) {
    if (!adapters->router) throw ConfigError("PERFT-R adapters need a PEFT router");
    if (adapters->router->num_experts() != adapters->experts.size()) {
      throw ConfigError("PEFT router width does not match adapter count");
    }
    RouteResult pr = route(*adapters->router, h, cache ? &cache->peft_router : nullptr);
    auto dispatch = dispatch_lists(pr);
    if (cache) {
      cache->peft.assign(adapters->experts.size(), {});
      cache->peft_out.assign(adapters->experts.size(), {});
    }
    for (std::size_t j = 0; j < adapters->experts.size(); ++j) {
      const auto& rows = dispatch[j];
      if (rows.empty()) continue;
      Tensor delta = peft_forward(adapters->experts[j], gather_rows(h, rows),
                                  cache ? &cache->peft[j] : nullptr);
      result.adapter_evaluations += rows.size();
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const double g = pr.gates(rows[r], j);
        auto dst = result.output.row(rows[r]);
        auto dr = delta.row(r);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += g * dr[c];
      }
      if (cache) cache->peft_out[j] = std::move(delta);
    }
    if (cache) {
      cache->peft_route = pr;
      cache->peft_dispatch = std::move(dispatch);
    }
    result.peft_route = std::move(pr);
    return result;
  }

  // dense / single: every adapter sees every token
  if (cache) cache->peft.assign(adapters->experts.size(), {});
  for (std::size_t j = 0; j < adapters->experts.size(); ++j) {
    result.output += peft_forward(adapters->experts[j], h, cache ? &cache->peft[j] : nullptr);
    result.adapter_evaluations += h.rows();
  }
  return result;
}

Tensor adapted_moe_backward(MoeLayer& moe, MoeAdapters* adapters, const AdaptedMoeCache& cache,
                            const Tensor& d_out, const AuxWeights& aux) {
  const bool adapted = adapters && adapts_moe(adapters->variant);
  if (!adapted) return moe_backward(moe, cache.base, d_out, aux);

  if (adapters->variant == Variant::embedded) {
    const auto& rt = cache.base.route;
    Tensor dh = Tensor::zeros(d_out.rows(), d_out.cols());
    Tensor d_gates = Tensor::zeros(rt.tokens(), rt.num_experts());
    for (std::size_t i = 0; i < moe.num_experts(); ++i) {
      const auto& rows = cache.base.dispatch[i];
      if (rows.empty()) continue;
      const Tensor& y = cache.base.expert_out[i];
      const Tensor& delta = cache.embedded_out[i];
      Tensor dy = Tensor::zeros(rows.size(), d_out.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::size_t t = rows[r];
        const double g = rt.gates(t, i);
        auto src = d_out.row(t);
        auto dst = dy.row(r);
        auto yr = y.row(r);
        auto dr = delta.row(r);
        double dot = 0.0;
        for (std::size_t j = 0; j < dst.size(); ++j) {
          dst[j] = g * src[j];
          dot += src[j] * (yr[j] + dr[j]);
        }
        d_gates(t, i) = dot;
      }
      Tensor dsub = ffn_backward(moe.experts[i], cache.base.experts[i], dy);
      dsub += peft_backward(adapters->experts[i], cache.embedded[i], dy);
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
    dh += router_backward(moe.router, cache.base.router, d_logits);
    return dh;
  }

  Tensor dh = moe_backward(moe, cache.base, d_out, aux);

  if (adapters->variant == Variant::routed) {
    const RouteResult& pr = *cache.peft_route;
    Tensor d_gates = Tensor::zeros(pr.tokens(), pr.num_experts());
    for (std::size_t j = 0; j < adapters->experts.size(); ++j) {
      const auto& rows = cache.peft_dispatch[j];
      if (rows.empty()) continue;
      const Tensor& delta = cache.peft_out[j];
      Tensor dd = Tensor::zeros(rows.size(), d_out.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::size_t t = rows[r];
        const double g = pr.gates(t, j);
        auto src = d_out.row(t);
        auto dst = dd.row(r);
        auto dr = delta.row(r);
        double dot = 0.0;
        for (std::size_t c = 0; c < dst.size(); ++c) {
          dst[c] = g * src[c];
          dot += src[c] * dr[c];
        }
        d_gates(t, j) = dot;
      }
      scatter_add_rows(dh, peft_backward(adapters->experts[j], cache.peft[j], dd), rows);
    }
    std::optional<Tensor> dp_extra;
    std::optional<Tensor> dz_extra;
    if (aux.peft_load_balance != 0.0) {
      dp_extra = load_balance_grad(pr);
      *dp_extra *= aux.peft_load_balance;
    }
    if (aux.peft_z_loss != 0.0) {
      dz_extra = z_loss_grad(pr.logits);
      *dz_extra *= aux.peft_z_loss;
    }
    Tensor d_logits = route_backward(pr, d_gates, dp_extra ? &*dp_extra : nullptr,
                                     dz_extra ? &*dz_extra : nullptr);
    dh += router_backward(*adapters->router, cache.peft_router, d_logits);
    return dh;
  }

  for (std::size_t j = 0; j < adapters->experts.size(); ++j) {
    dh += peft_backward(adapters->experts[j], cache.peft[j], d_out);
  }
  return dh;
}

namespace {

MoeAdapters borrowed(Variant v, std::span<const PeftExpert> experts) {
  MoeAdapters a;
  a.variant = v;
  a.experts.assign(experts.begin(), experts.end());
  return a;
}

}  // namespace

AdaptedMoeOutput perft_r_forward(const MoeLayer& moe, const PeftRouter& router,
                                 std::span<const PeftExpert> experts, const Tensor& h) {
  MoeAdapters a = borrowed(Variant::routed, experts);
  a.router = router;
  return adapted_moe_forward(moe, &a, h);
}

AdaptedMoeOutput perft_e_forward(const MoeLayer& moe, std::span<const PeftExpert> experts,
                                 const Tensor& h) {
  MoeAdapters a = borrowed(Variant::embedded, experts);
  return adapted_moe_forward(moe, &a, h);
}

AdaptedMoeOutput perft_d_forward(const MoeLayer& moe, std::span<const PeftExpert> experts,
                                 const Tensor& h) {
  MoeAdapters a = borrowed(Variant::dense, experts);
  return adapted_moe_forward(moe, &a, h);
}

MoeAdapters make_moe_adapters(const PerftConfig& cfg, std::size_t d_model, const std::string& prefix,
                              Rng& rng) {
  if (!adapts_moe(cfg.variant)) throw ConfigError("variant does not adapt the MoE layer");
  cfg.validate();
  MoeAdapters a;
  a.variant = cfg.variant;
  for (std::size_t j = 0; j < cfg.num_experts; ++j) {
    a.experts.push_back(make_peft_expert(prefix + ".expert" + std::to_string(j), d_model,
                                         cfg.bottleneck, d_model, cfg.act, cfg.alpha_value(), rng));
  }
  if (cfg.variant == Variant::routed) {
    Tensor w = Tensor::zeros(d_model, cfg.num_experts);
    for (auto& v : w.data()) v = rng.normal(0.0, kAdapterInitStd);
    PeftRouter r;
    r.weight = Parameter(prefix + ".router", std::move(w));
    r.top_k = cfg.top_k;
    r.renormalize = cfg.renormalize;
    a.router = std::move(r);
  }
  return a;
}

void attach_qv_lora(Attention& attn, std::size_t rank, double alpha, Rng& rng,
                    const std::string& prefix) {
  if (attn.q_delta || attn.v_delta) throw ConfigError("qv-LoRA already attached to " + prefix);
  const std::size_t d = attn.width();
  attn.q_delta = make_peft_expert(prefix + ".lora_q", d, rank, d, Activation::identity, alpha, rng);
  attn.v_delta = make_peft_expert(prefix + ".lora_v", d, rank, d, Activation::identity, alpha, rng);
}

void attach_gate_lora(Router& router, std::size_t rank, double alpha, Rng& rng,
                      const std::string& prefix) {
  if (router.delta) throw ConfigError("gate-LoRA already attached to " + prefix);
  router.delta = make_peft_expert(prefix + ".lora", router.weight.value.rows(), rank,
                                  router.num_experts(), Activation::identity, alpha, rng);
}

BackboneDims olmoe_1b_7b_dims() {
  BackboneDims d;
  d.d_model = 2048;
  d.layers = 16;
  d.experts = 64;
  d.top_k = 8;
  d.expert_width = 1024;
  const std::uint64_t vocab = 50304;
  const std::uint64_t D = d.d_model;
  const std::uint64_t per_layer = 4 * D * D          // q, k, v, o
                                  + 4 * D            // attention/MLP norms, q/k norms
                                  + D * d.experts    // router
                                  + d.top_k * 3 * D * d.expert_width;  // active SwiGLU experts
  d.activated_total_model = 2 * vocab * D + d.layers * per_layer + D;
  return d;
}

ParamAccount count_activated(const PerftConfig& cfg_in, const BackboneDims& dims) {
  if (dims.d_model == 0 || dims.layers == 0 || dims.experts == 0 || dims.top_k == 0 ||
      dims.activated_total_model == 0) {
    throw ConfigError("count_activated: backbone dims must be positive");
  }
  const PerftConfig cfg = cfg_in.resolved(dims.experts, dims.top_k);
  cfg.validate();
  const std::uint64_t D = dims.d_model;
  const std::uint64_t rank = cfg.bottleneck;
  const std::uint64_t pair = 2 * D * rank;  // one adapter: W_down + W_up
  std::uint64_t act = 0;
  std::uint64_t total = 0;
  switch (cfg.variant) {
    case Variant::qv_lora: act = total = 2 * pair; break;
    case Variant::gate_lora: act = total = rank * (D + dims.experts); break;
    case Variant::single: act = total = pair; break;
    case Variant::dense: act = total = cfg.num_experts * pair; break;
    case Variant::embedded:
      act = dims.top_k * pair;
      total = dims.experts * pair;
      break;
    case Variant::routed:
      act = cfg.top_k * pair + cfg.num_experts * D;
      total = cfg.num_experts * pair + cfg.num_experts * D;
      break;
  }
  ParamAccount a;
  a.activated_trainable = act * dims.layers;
  a.total_trainable = total * dims.layers;
  a.activated_total_model = dims.activated_total_model;
  a.ratio_percent = 100.0 * static_cast<double>(a.activated_trainable) /
                    static_cast<double>(a.activated_total_model);
  return a;
}

std::string format_millions(std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(n) / 1e6);
  return buf;
}

}  // namespace perft

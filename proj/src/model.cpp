#include "perft/model.hpp"

#include <cstring>

#include "perft/errors.hpp"

namespace perft {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("model.") + field + " must be positive");
  };
  positive(d_model, "d_model");
  positive(layers, "layers");
  positive(heads, "heads");
  positive(expert_width, "expert_width");
  positive(experts, "experts");
  positive(top_k, "top_k");
  positive(vocab, "vocab");
  positive(max_seq, "max_seq");
  if (d_model % heads != 0) throw ConfigError("model.d_model must be divisible by model.heads");
  if (top_k > experts) throw ConfigError("model.top_k must not exceed model.experts");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must be in [0, 1)");
  if (!(init_std > 0.0)) throw ConfigError("model.init_std must be positive");
}

std::uint64_t activated_backbone_params(const ModelConfig& c) {
  const std::uint64_t D = c.d_model;
  const std::uint64_t expert = (c.gated_experts ? 3 : 2) * D * c.expert_width;
  const std::uint64_t per_layer = 4 * D * D + 2 * D + D * c.experts + c.top_k * expert;
  return c.vocab * D + c.max_seq * D + c.layers * per_layer + D + D * c.vocab;
}

BackboneDims backbone_dims(const ModelConfig& c) {
  BackboneDims d;
  d.d_model = c.d_model;
  d.layers = c.layers;
  d.experts = c.experts;
  d.top_k = c.top_k;
  d.expert_width = c.expert_width;
  d.activated_total_model = activated_backbone_params(c);
  return d;
}

namespace {

Parameter random_param(const std::string& name, std::size_t r, std::size_t c, double std, Rng& rng) {
  Tensor t = Tensor::zeros(r, c);
  for (auto& v : t.data()) v = rng.normal(0.0, std);
  return Parameter(name, std::move(t));
}

Parameter ones_param(const std::string& name, std::size_t d) {
  return Parameter(name, Tensor::filled(1, d, 1.0));
}

}  // namespace

LanguageModel::LanguageModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t D = cfg_.d_model;
  const double s = cfg_.init_std;
  tok_embed = random_param("embed.tok", cfg_.vocab, D, s, rng);
  pos_embed = random_param("embed.pos", cfg_.max_seq, D, s, rng);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = "block" + std::to_string(l);
    TransformerBlock b;
    b.attn.norm = ones_param(p + ".attn.norm", D);
    b.attn.wq = random_param(p + ".attn.wq", D, D, s, rng);
    b.attn.wk = random_param(p + ".attn.wk", D, D, s, rng);
    b.attn.wv = random_param(p + ".attn.wv", D, D, s, rng);
    b.attn.wo = random_param(p + ".attn.wo", D, D, s, rng);
    b.attn.heads = cfg_.heads;
    b.moe_norm = ones_param(p + ".moe.norm", D);
    b.moe.router.weight = random_param(p + ".moe.router", D, cfg_.experts, s, rng);
    b.moe.router.top_k = cfg_.top_k;
    b.moe.router.renormalize = cfg_.renormalize_topk;
    for (std::size_t i = 0; i < cfg_.experts; ++i) {
      const std::string e = p + ".moe.expert" + std::to_string(i);
      FfnExpert fe;
      fe.w_up = random_param(e + ".w_up", D, cfg_.expert_width, s, rng);
      fe.w_down = random_param(e + ".w_down", cfg_.expert_width, D, s, rng);
      if (cfg_.gated_experts) fe.w_gate = random_param(e + ".w_gate", D, cfg_.expert_width, s, rng);
      fe.act = cfg_.expert_act;
      b.moe.experts.push_back(std::move(fe));
    }
    blocks.push_back(std::move(b));
  }
  final_norm = ones_param("final_norm", D);
  unembed = random_param("unembed", D, cfg_.vocab, s, rng);
}

void LanguageModel::attach(const PerftConfig& cfg_in, std::uint64_t seed) {
  if (perft_) throw ConfigError("a PERFT variant is already attached to this model");
  const PerftConfig cfg = cfg_in.resolved(cfg_.experts, cfg_.top_k);
  cfg.validate();
  Rng rng(seed);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto& b = blocks[l];
    const std::string p = "block" + std::to_string(l);
    switch (cfg.variant) {
      case Variant::qv_lora:
        attach_qv_lora(b.attn, cfg.bottleneck, cfg.alpha_value(), rng, p + ".attn");
        break;
      case Variant::gate_lora:
        attach_gate_lora(b.moe.router, cfg.bottleneck, cfg.alpha_value(), rng, p + ".moe.router");
        break;
      default:
        b.adapters = make_moe_adapters(cfg, cfg_.d_model, p + ".peft", rng);
        break;
    }
  }
  perft_ = cfg;
  apply_freeze_partition();
}

namespace {

template <typename Model, typename P>
void collect(Model& m, std::vector<P*>& out, bool backbone, bool adapters) {
  if (backbone) {
    out.push_back(&m.tok_embed);
    out.push_back(&m.pos_embed);
  }
  for (auto& b : m.blocks) {
    if (backbone) {
      for (auto* p : {&b.attn.norm, &b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo}) out.push_back(p);
    }
    if (adapters) {
      for (auto* d : {&b.attn.q_delta, &b.attn.v_delta}) {
        if (*d) {
          out.push_back(&(*d)->w_down);
          out.push_back(&(*d)->w_up);
        }
      }
    }
    if (backbone) {
      out.push_back(&b.moe_norm);
      out.push_back(&b.moe.router.weight);
    }
    if (adapters && b.moe.router.delta) {
      out.push_back(&b.moe.router.delta->w_down);
      out.push_back(&b.moe.router.delta->w_up);
    }
    if (backbone) {
      for (auto& e : b.moe.experts) {
        out.push_back(&e.w_up);
        out.push_back(&e.w_down);
        if (e.w_gate) out.push_back(&*e.w_gate);
      }
    }
    if (adapters && b.adapters) {
      if (b.adapters->router) out.push_back(&b.adapters->router->weight);
      for (auto& e : b.adapters->experts) {
        out.push_back(&e.w_down);
        out.push_back(&e.w_up);
      }
    }
  }
  if (backbone) {
    out.push_back(&m.final_norm);
    out.push_back(&m.unembed);
  }
}

}  // namespace

std::vector<Parameter*> LanguageModel::parameters() {
  std::vector<Parameter*> out;
  collect(*this, out, true, true);
  return out;
}

std::vector<const Parameter*> LanguageModel::parameters() const {
  std::vector<const Parameter*> out;
  collect(*this, out, true, true);
  return out;
}

std::vector<Parameter*> LanguageModel::backbone_parameters() {
  std::vector<Parameter*> out;
  collect(*this, out, true, false);
  return out;
}

std::vector<const Parameter*> LanguageModel::backbone_parameters() const {
  std::vector<const Parameter*> out;
  collect(*this, out, true, false);
  return out;
}

std::vector<Parameter*> LanguageModel::adapter_parameters() {
  std::vector<Parameter*> out;
  collect(*this, out, false, true);
  return out;
}

Parameter* LanguageModel::find(const std::string& name) {
  for (auto* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

void LanguageModel::apply_freeze_partition() {
  const bool pretraining = !perft_;
  for (auto* p : backbone_parameters()) p->trainable = pretraining;
  for (auto* p : adapter_parameters()) p->trainable = true;
}

std::vector<Parameter*> LanguageModel::trainable_parameters() {
  std::vector<Parameter*> out;
  for (auto* p : parameters()) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

void LanguageModel::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

BlockOutput block_forward(const TransformerBlock& block, const Tensor& x, std::size_t batch,
                          std::size_t seq, const Dropout& dropout, BlockCache* cache) {
  BlockOutput out;
  Tensor h = attention_forward(block.attn, x, batch, seq, dropout, cache ? &cache->attn : nullptr);
  Tensor normed = rms_norm(h, block.moe_norm.value, cache ? &cache->moe_norm : nullptr);
  const MoeAdapters* adapters = block.adapters ? &*block.adapters : nullptr;
  AdaptedMoeOutput moe = adapted_moe_forward(block.moe, adapters, normed, cache ? &cache->moe : nullptr);
  if (dropout.active()) {
    auto keep = dropout.mask(moe.output.size());
    for (std::size_t i = 0; i < keep.size(); ++i) moe.output[i] *= keep[i];
    if (cache) cache->keep = std::move(keep);
  } else if (cache) {
    cache->keep.clear();
  }
  h += moe.output;
  out.output = std::move(h);
  out.stats.load_balance = load_balance_loss(moe.route);
  out.stats.z_loss = z_loss(moe.route.logits);
  if (moe.peft_route) {
    out.stats.peft_load_balance = load_balance_loss(*moe.peft_route);
    out.stats.peft_z_loss = z_loss(moe.peft_route->logits);
  }
  out.stats.route = std::move(moe.route);
  out.stats.peft_route = std::move(moe.peft_route);
  return out;
}

Tensor block_backward(TransformerBlock& block, const BlockCache& cache, const Tensor& d_out,
                      const AuxWeights& aux) {
  Tensor d_moe = d_out;
  if (!cache.keep.empty()) {
    for (std::size_t i = 0; i < d_moe.size(); ++i) d_moe[i] *= cache.keep[i];
  }
  MoeAdapters* adapters = block.adapters ? &*block.adapters : nullptr;
  Tensor d_normed = adapted_moe_backward(block.moe, adapters, cache.moe, d_moe, aux);
  Tensor dh = rms_norm_backward(cache.moe_norm, block.moe_norm.value, d_normed,
                                block.moe_norm.trainable ? &block.moe_norm.grad : nullptr);
  dh += d_out;
  return attention_backward(block.attn, cache.attn, dh);
}

ForwardResult lm_forward(const LanguageModel& model, const TokenBatch& batch, Rng* dropout_rng,
                         ModelCache* cache) {
  const auto& cfg = model.config();
  if (batch.batch == 0 || batch.seq == 0 || batch.tokens.size() != batch.batch * batch.seq) {
    throw InputError("lm_forward: token grid does not match batch x seq");
  }
  if (batch.seq > cfg.max_seq) {
    throw InputError("lm_forward: sequence length " + std::to_string(batch.seq) +
                     " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  const std::size_t D = cfg.d_model;
  Tensor x = Tensor::zeros(batch.batch * batch.seq, D);
  for (std::size_t r = 0; r < batch.tokens.size(); ++r) {
    const int tok = batch.tokens[r];
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab) {
      throw InputError("lm_forward: token id " + std::to_string(tok) + " out of range for vocab " +
                       std::to_string(cfg.vocab));
    }
    const std::size_t pos = r % batch.seq;
    auto dst = x.row(r);
    auto te = model.tok_embed.value.row(static_cast<std::size_t>(tok));
    auto pe = model.pos_embed.value.row(pos);
    for (std::size_t j = 0; j < D; ++j) dst[j] = te[j] + pe[j];
  }

  const Dropout dropout{cfg.dropout, dropout_rng};
  ForwardResult result;
  if (cache) {
    cache->batch = batch;
    cache->blocks.assign(model.blocks.size(), {});
  }
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    BlockOutput bo = block_forward(model.blocks[l], x, batch.batch, batch.seq, dropout,
                                   cache ? &cache->blocks[l] : nullptr);
    x = std::move(bo.output);
    result.layers.push_back(std::move(bo.stats));
  }
  Tensor n = rms_norm(x, model.final_norm.value, cache ? &cache->final_norm : nullptr);
  result.logits = matmul(n, model.unembed.value);
  if (cache) cache->final_hidden = std::move(n);
  return result;
}

void lm_backward(LanguageModel& model, const ModelCache& cache, const Tensor& d_logits,
                 const AuxWeights& aux) {
  const std::size_t D = model.config().d_model;
  Tensor dn = Tensor::zeros(d_logits.rows(), D);
  matmul_backward(cache.final_hidden, model.unembed.value, d_logits, &dn,
                  model.unembed.trainable ? &model.unembed.grad : nullptr);
  Tensor dx = rms_norm_backward(cache.final_norm, model.final_norm.value, dn,
                                model.final_norm.trainable ? &model.final_norm.grad : nullptr);
  for (std::size_t l = model.blocks.size(); l-- > 0;) {
    dx = block_backward(model.blocks[l], cache.blocks[l], dx, aux);
  }
  const auto& batch = cache.batch;
  for (std::size_t r = 0; r < batch.tokens.size(); ++r) {
    auto g = dx.row(r);
    if (model.tok_embed.trainable) {
      auto dst = model.tok_embed.grad.row(static_cast<std::size_t>(batch.tokens[r]));
      for (std::size_t j = 0; j < D; ++j) dst[j] += g[j];
    }
    if (model.pos_embed.trainable) {
      auto dst = model.pos_embed.grad.row(r % batch.seq);
      for (std::size_t j = 0; j < D; ++j) dst[j] += g[j];
    }
  }
}

std::uint64_t backbone_checksum(const LanguageModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : model.backbone_parameters()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data().data());
    const std::size_t n = p->value.size() * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace perft

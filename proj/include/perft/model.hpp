#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "perft/attention.hpp"
#include "perft/moe.hpp"
#include "perft/perft.hpp"

namespace perft {

struct ModelConfig {
  std::size_t d_model = 64;       // D
  std::size_t layers = 4;         // L
  std::size_t heads = 4;          // H
  std::size_t expert_width = 64;  // D_a
  std::size_t experts = 8;        // N
  std::size_t top_k = 2;          // K
  std::size_t vocab = 260;
  std::size_t max_seq = 64;       // T_max
  double dropout = 0.05;
  bool renormalize_topk = false;
  Activation expert_act = Activation::relu;
  bool gated_experts = false;
  double init_std = 0.02;

  void validate() const;
};

// Parameters touched by one token; the denominator of the activated ratio.
std::uint64_t activated_backbone_params(const ModelConfig& cfg);
BackboneDims backbone_dims(const ModelConfig& cfg);

struct TransformerBlock {
  Attention attn;
  Parameter moe_norm;  // 1 x D RMS gain before the MoE sublayer
  MoeLayer moe;
  std::optional<MoeAdapters> adapters;
};

class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return cfg_; }
  const std::optional<PerftConfig>& perft() const noexcept { return perft_; }

  // Attaches adapters for `cfg` to every layer; throws ConfigError if any are
  // already attached. Backbone weights are left untouched.
  void attach(const PerftConfig& cfg, std::uint64_t seed);

  // Every parameter in a fixed order: embeddings, blocks, final norm, unembedding.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter* find(const std::string& name);

  // Marks adapters (and the PEFT router for R) trainable and everything else
  // frozen; with no attachment everything is trainable (pretraining).
  void apply_freeze_partition();
  std::vector<Parameter*> trainable_parameters();
  std::vector<Parameter*> backbone_parameters();
  std::vector<const Parameter*> backbone_parameters() const;
  std::vector<Parameter*> adapter_parameters();
  void zero_grad();

  Parameter tok_embed;  // vocab x D
  Parameter pos_embed;  // T_max x D
  std::vector<TransformerBlock> blocks;
  Parameter final_norm;  // 1 x D
  Parameter unembed;     // D x vocab

 private:
  ModelConfig cfg_;
  std::optional<PerftConfig> perft_;
};

// Row-major token grid [batch x seq].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> tokens;
};

struct LayerStats {
  RouteResult route;
  std::optional<RouteResult> peft_route;
  double load_balance = 0.0;
  double z_loss = 0.0;
  double peft_load_balance = 0.0;
  double peft_z_loss = 0.0;
};

struct BlockCache {
  AttentionCache attn;
  RmsNormCache moe_norm;
  AdaptedMoeCache moe;
  std::vector<double> keep;  // dropout on the MoE sublayer output
};

struct ModelCache {
  TokenBatch batch;
  std::vector<BlockCache> blocks;
  RmsNormCache final_norm;
  Tensor final_hidden;
};

struct ForwardResult {
  Tensor logits;  // (batch*seq) x vocab
  std::vector<LayerStats> layers;
};

// `dropout_rng` null = evaluation mode.
ForwardResult lm_forward(const LanguageModel& model, const TokenBatch& batch,
                         Rng* dropout_rng = nullptr, ModelCache* cache = nullptr);
void lm_backward(LanguageModel& model, const ModelCache& cache, const Tensor& d_logits,
                 const AuxWeights& aux = {});

// Single block: attention sublayer then (adapted) MoE sublayer, both residual.
struct BlockOutput {
  Tensor output;
  LayerStats stats;
};
BlockOutput block_forward(const TransformerBlock& block, const Tensor& x, std::size_t batch,
                          std::size_t seq, const Dropout& dropout = {}, BlockCache* cache = nullptr);
Tensor block_backward(TransformerBlock& block, const BlockCache& cache, const Tensor& d_out,
                      const AuxWeights& aux = {});

// FNV-1a over the bytes of every frozen backbone tensor, in parameter order.
std::uint64_t backbone_checksum(const LanguageModel& model);

}  // namespace perft

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "perft/data.hpp"
#include "perft/model.hpp"

namespace perft {

// AdamW with linear warmup and decay. The learning rate suits desk-scale
// models; OLMoE-sized runs use 1e-5.
struct TrainConfig {
  double lr = 1e-3;
  std::size_t warmup_steps = 100;
  std::size_t batch = 16;
  std::size_t epochs = 3;
  std::size_t steps = 0;  // > 0 overrides epochs; both zero is a no-op run
  double aux_coef = 0.01;
  bool z_loss = true;
  bool peft_balance = true;  // PEFT-router balance loss for PERFT-R
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t eval_every = 0;  // 0: evaluate only at the end
  std::uint64_t seed = 0;

  void validate() const;
};

struct CrossEntropy {
  double loss = 0.0;
  Tensor d_logits;  // gradient of the mean masked NLL
  std::size_t tokens = 0;
};

// Mean negative log-likelihood over positions with mask > 0. An empty mask
// means every position counts.
CrossEntropy cross_entropy(const Tensor& logits, std::span<const int> targets,
                           std::span<const double> mask = {});

struct LossBreakdown {
  double ce = 0.0;
  double lb_backbone = 0.0;
  double z_backbone = 0.0;
  double lb_peft = 0.0;
  double z_peft = 0.0;
  double total = 0.0;
};

// Aux terms are averaged over layers; the PEFT terms enter only when PEFT routes exist.
LossBreakdown total_loss(double ce, std::span<const LayerStats> layers, const TrainConfig& cfg,
                         bool peft_z_loss = false);
AuxWeights aux_weights(const TrainConfig& cfg, std::size_t layers, bool peft_routed,
                       bool peft_z_loss = false);

// Linear warmup from 0 to lr over warmup_steps, then linear decay to 0 at total_steps.
double lr_at(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

struct OptimizerState {
  struct Moments {
    Tensor m;
    Tensor v;
  };
  std::map<std::string, Moments> moments;  // keyed by parameter name
  std::size_t step = 0;
};

// Scales trainable gradients so their global L2 norm is at most max_norm;
// returns the pre-clip norm. Throws NumericError on a non-finite gradient.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

// One decoupled-weight-decay Adam update on every trainable parameter.
void adamw_step(OptimizerState& state, std::span<Parameter* const> params, const TrainConfig& cfg,
                double lr);

struct EvalMetrics {
  double token_accuracy = 0.0;
  double exact_match = 0.0;
  double ce = 0.0;
  std::size_t tokens = 0;
  std::size_t samples = 0;
};

EvalMetrics evaluate(const LanguageModel& model, std::span<const Sample> data,
                     std::size_t batch_size = 64);

struct StepRecord {
  std::size_t step = 0;
  LossBreakdown loss;
  double lr = 0.0;
  std::optional<double> eval_acc;
};

struct StepResult {
  LossBreakdown loss;
  double grad_norm = 0.0;
};

// Forward, backward and one optimizer commit on an encoded batch.
StepResult train_step(LanguageModel& model, OptimizerState& opt, const EncodedBatch& batch,
                      const TrainConfig& cfg, double lr, Rng& dropout_rng);

struct TrainResult {
  std::vector<StepRecord> history;
  EvalMetrics final_eval;
  std::size_t steps = 0;
};

struct TrainHooks {
  std::optional<std::filesystem::path> metrics_csv;
  // Called with the last good model when the loss diverges, before throwing.
  std::function<void(const LanguageModel&)> on_divergence;
};

std::size_t total_steps(const TrainConfig& cfg, std::size_t train_samples);

TrainResult train_loop(LanguageModel& model, std::span<const Sample> train,
                       std::span<const Sample> eval, const TrainConfig& cfg,
                       const TrainHooks& hooks = {});

void write_metrics_csv(const std::filesystem::path& path, std::span<const StepRecord> history);

}  // namespace perft

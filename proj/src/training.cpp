#include "perft/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "perft/errors.hpp"

namespace perft {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (!(aux_coef >= 0.0)) throw ConfigError("train.aux_coef must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.beta1/beta2 must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
}

CrossEntropy cross_entropy(const Tensor& logits, std::span<const int> targets,
                           std::span<const double> mask) {
  const std::size_t rows = logits.rows();
  const std::size_t vocab = logits.cols();
  if (targets.size() != rows) throw DimensionError("cross_entropy: target count mismatch");
  if (!mask.empty() && mask.size() != rows) throw DimensionError("cross_entropy: mask size mismatch");
  CrossEntropy ce;
  ce.d_logits = Tensor::zeros(rows, vocab);
  for (std::size_t r = 0; r < rows; ++r) {
    const bool counted = mask.empty() || mask[r] > 0.0;
    if (!counted) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw InputError("cross_entropy: target " + std::to_string(targets[r]) + " out of range");
    }
    ++ce.tokens;
  }
  if (ce.tokens == 0) return ce;
  const double inv = 1.0 / static_cast<double>(ce.tokens);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!(mask.empty() || mask[r] > 0.0)) continue;
    auto z = logits.row(r);
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - m);
    const double lse = m + std::log(sum);
    const auto t = static_cast<std::size_t>(targets[r]);
    ce.loss += (lse - z[t]) * inv;
    auto g = ce.d_logits.row(r);
    for (std::size_t j = 0; j < vocab; ++j) g[j] = std::exp(z[j] - lse) * inv;
    g[t] -= inv;
  }
  return ce;
}

LossBreakdown total_loss(double ce, std::span<const LayerStats> layers, const TrainConfig& cfg,
                         bool peft_z_loss) {
  LossBreakdown b;
  b.ce = ce;
  std::size_t peft_layers = 0;
  for (const auto& l : layers) {
    b.lb_backbone += l.load_balance;
    b.z_backbone += l.z_loss;
    if (l.peft_route) {
      b.lb_peft += l.peft_load_balance;
      b.z_peft += l.peft_z_loss;
      ++peft_layers;
    }
  }
  const double n = layers.empty() ? 1.0 : static_cast<double>(layers.size());
  b.lb_backbone /= n;
  b.z_backbone = cfg.z_loss ? b.z_backbone / n : 0.0;
  const double np = static_cast<double>(std::max<std::size_t>(peft_layers, 1));
  b.lb_peft = (cfg.peft_balance && peft_layers) ? b.lb_peft / np : 0.0;
  b.z_peft = (peft_z_loss && peft_layers) ? b.z_peft / np : 0.0;
  b.total = b.ce + cfg.aux_coef * (b.lb_backbone + b.z_backbone + b.lb_peft + b.z_peft);
  return b;
}

AuxWeights aux_weights(const TrainConfig& cfg, std::size_t layers, bool peft_routed,
                       bool peft_z_loss) {
  const double w = cfg.aux_coef / static_cast<double>(std::max<std::size_t>(layers, 1));
  AuxWeights a;
  a.load_balance = w;
  a.z_loss = cfg.z_loss ? w : 0.0;
  a.peft_load_balance = (peft_routed && cfg.peft_balance) ? w : 0.0;
  a.peft_z_loss = (peft_routed && peft_z_loss) ? w : 0.0;
  return a;
}

double lr_at(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (step >= total_steps) return 0.0;
  if (step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const double remaining = static_cast<double>(total_steps - step);
  const double span = static_cast<double>(std::max<std::size_t>(total_steps - cfg.warmup_steps, 1));
  return cfg.lr * remaining / span;
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double ss = 0.0;
  for (const auto* p : params) {
    if (!p->trainable) continue;
    for (double g : p->grad.data()) ss += g * g;
  }
  const double norm = std::sqrt(ss);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* p : params) {
      if (p->trainable) p->grad *= s;
    }
  }
  return norm;
}

void adamw_step(OptimizerState& state, std::span<Parameter* const> params, const TrainConfig& cfg,
                double lr) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto* p : params) {
    if (!p->trainable) continue;
    p->grad.require_finite("gradient of " + p->name);
    auto [it, inserted] = state.moments.try_emplace(p->name);
    auto& mom = it->second;
    if (inserted) {
      mom.m = Tensor(p->value.shape());
      mom.v = Tensor(p->value.shape());
    }
    auto w = p->value.data();
    auto g = p->grad.data();
    auto m = mom.m.data();
    auto v = mom.v.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] *= 1.0 - lr * cfg.weight_decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

EvalMetrics evaluate(const LanguageModel& model, std::span<const Sample> data,
                     std::size_t batch_size) {
  EvalMetrics em;
  if (data.empty()) return em;
  std::size_t correct = 0;
  std::size_t exact = 0;
  double nll = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    const EncodedBatch b = encode_batch(data.subspan(start, n));
    ForwardResult fr = lm_forward(model, {b.batch, b.seq, b.inputs});
    for (std::size_t i = 0; i < b.batch; ++i) {
      bool all = true;
      for (std::size_t t = 0; t < b.seq; ++t) {
        const std::size_t r = i * b.seq + t;
        if (b.loss_mask[r] <= 0.0) continue;
        auto z = fr.logits.row(r);
        const auto best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
        const auto target = static_cast<std::size_t>(b.targets[r]);
        const double m = z[best];
        double sum = 0.0;
        for (double v : z) sum += std::exp(v - m);
        nll += m + std::log(sum) - z[target];
        ++em.tokens;
        if (best == target) {
          ++correct;
        } else {
          all = false;
        }
      }
      if (all) ++exact;
    }
    em.samples += n;
  }
  em.token_accuracy = em.tokens ? static_cast<double>(correct) / static_cast<double>(em.tokens) : 0.0;
  em.exact_match = static_cast<double>(exact) / static_cast<double>(em.samples);
  em.ce = em.tokens ? nll / static_cast<double>(em.tokens) : 0.0;
  return em;
}

StepResult train_step(LanguageModel& model, OptimizerState& opt, const EncodedBatch& batch,
                      const TrainConfig& cfg, double lr, Rng& dropout_rng) {
  auto params = model.trainable_parameters();
  for (auto* p : params) p->zero_grad();
  ModelCache cache;
  ForwardResult fr = lm_forward(model, {batch.batch, batch.seq, batch.inputs}, &dropout_rng, &cache);
  CrossEntropy ce = cross_entropy(fr.logits, batch.targets, batch.loss_mask);
  StepResult sr;
  const auto& perft = model.perft();
  const bool routed = perft && perft->variant == Variant::routed;
  const bool peft_z = perft && perft->peft_z_loss;
  sr.loss = total_loss(ce.loss, fr.layers, cfg, peft_z);
  if (!std::isfinite(sr.loss.total)) throw NumericError("training loss is not finite");
  const AuxWeights aux = aux_weights(cfg, model.blocks.size(), routed, peft_z);
  lm_backward(model, cache, ce.d_logits, aux);
  sr.grad_norm = clip_grad_norm(params, cfg.grad_clip);
  adamw_step(opt, params, cfg, lr);
  return sr;
}

std::size_t total_steps(const TrainConfig& cfg, std::size_t train_samples) {
  if (cfg.steps > 0) return cfg.steps;
  const std::size_t per_epoch = (train_samples + cfg.batch - 1) / cfg.batch;
  return cfg.epochs * per_epoch;
}

TrainResult train_loop(LanguageModel& model, std::span<const Sample> train,
                       std::span<const Sample> eval, const TrainConfig& cfg,
                       const TrainHooks& hooks) {
  cfg.validate();
  if (train.empty()) throw InputError("train_loop: empty training set");
  TrainResult result;
  const std::size_t total = total_steps(cfg, train.size());
  Rng order_rng(cfg.seed);
  Rng dropout_rng = order_rng.fork(1);
  OptimizerState opt;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  LanguageModel last_good = model;

  std::vector<Sample> batch;
  for (std::size_t step = 0; step < total; ++step) {
    batch.clear();
    while (batch.size() < cfg.batch) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(train[order[cursor++]]);
      if (cursor == order.size() && cfg.steps == 0) break;  // epoch boundary ends the batch
    }
    const double lr = lr_at(cfg, step, total);
    StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    try {
      rec.loss = train_step(model, opt, encode_batch(batch), cfg, lr, dropout_rng).loss;
    } catch (const NumericError&) {
      if (hooks.on_divergence) hooks.on_divergence(last_good);
      model = last_good;
      result.steps = step;
      if (hooks.metrics_csv) write_metrics_csv(*hooks.metrics_csv, result.history);
      throw;
    }
    const bool last = step + 1 == total;
    if ((cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || last) {
      if (!eval.empty()) {
        result.final_eval = evaluate(model, eval);
        rec.eval_acc = result.final_eval.token_accuracy;
      }
      last_good = model;
    }
    result.history.push_back(rec);
  }
  result.steps = total;
  if (total == 0 && !eval.empty()) result.final_eval = evaluate(model, eval);
  if (hooks.metrics_csv) write_metrics_csv(*hooks.metrics_csv, result.history);
  return result;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const StepRecord> history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,ce,lb,z,lb_peft,total,lr,eval_acc\n";
  char buf[256];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,", r.step, r.loss.ce,
                  r.loss.lb_backbone, r.loss.z_backbone, r.loss.lb_peft, r.loss.total, r.lr);
    out << buf;
    if (r.eval_acc) {
      std::snprintf(buf, sizeof buf, "%.10g", *r.eval_acc);
      out << buf;
    }
    out << "\n";
  }
}

}  // namespace perft

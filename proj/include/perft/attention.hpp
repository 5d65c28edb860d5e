#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "perft/adapter.hpp"
#include "perft/numerics.hpp"
#include "perft/rng.hpp"
#include "perft/tensor.hpp"

namespace perft {

// Inverted dropout. Disabled when `rng` is null or `p` is zero.
struct Dropout {
  double p = 0.0;
  Rng* rng = nullptr;

  bool active() const noexcept { return rng != nullptr && p > 0.0; }
  // Fills a keep-mask of the given size with 0 or 1/(1-p).
  std::vector<double> mask(std::size_t n) const;
};

// Pre-norm causal multi-head self-attention with residual.
// Rows of the input are tokens laid out as batch-major [b * seq + t].
struct Attention {
  Parameter norm;  // 1 x D RMS gain
  Parameter wq, wk, wv, wo;
  std::size_t heads = 1;
  std::optional<PeftExpert> q_delta;  // qv-LoRA
  std::optional<PeftExpert> v_delta;

  std::size_t width() const noexcept { return wq.value.rows(); }
};

struct AttentionCache {
  std::size_t batch = 0;
  std::size_t seq = 0;
  RmsNormCache norm;
  Tensor normed;
  std::optional<PeftCache> q_delta;
  std::optional<PeftCache> v_delta;
  Tensor q, k, v;
  // Per (sequence, head): softmax probabilities (seq x seq, causal) and the
  // dropout keep-mask applied to them (empty when dropout is off).
  std::vector<std::vector<double>> probs;
  std::vector<std::vector<double>> keep;
  Tensor context;
};

Tensor attention_forward(const Attention& attn, const Tensor& x, std::size_t batch,
                         std::size_t seq, const Dropout& dropout = {},
                         AttentionCache* cache = nullptr);

// d_out is the gradient of the block output (attention + residual); the
// returned gradient includes the residual path.
Tensor attention_backward(Attention& attn, const AttentionCache& cache, const Tensor& d_out);

}  // namespace perft

#pragma once

#include <cstddef>
#include <string>

#include "perft/numerics.hpp"
#include "perft/rng.hpp"
#include "perft/tensor.hpp"

namespace perft {

// Bottleneck adapter: delta(h) = act(h * W_down) * W_up * (alpha / rank).
// Identity activation is LoRA, relu is the parallel adapter. The same type
// backs the low-rank deltas attached to attention and router matrices, in
// which case W_up may map to a width other than the input's.
struct PeftExpert {
  Parameter w_down;  // in x rank; columns are the adapter's key vectors
  Parameter w_up;    // rank x out, zero at initialization
  Activation act = Activation::identity;
  double alpha = 1.0;

  std::size_t rank() const noexcept { return w_down.value.cols(); }
  std::size_t in_dim() const noexcept { return w_down.value.rows(); }
  std::size_t out_dim() const noexcept { return w_up.value.cols(); }
  double scale() const noexcept { return alpha / static_cast<double>(rank()); }
};

inline constexpr double kAdapterInitStd = 0.02;

// W_down ~ N(0, 0.02^2), W_up = 0.
PeftExpert make_peft_expert(const std::string& name, std::size_t in_dim, std::size_t rank,
                            std::size_t out_dim, Activation act, double alpha, Rng& rng);

struct PeftCache {
  Tensor input;
  Tensor pre;     // h * W_down
  Tensor hidden;  // act(pre)
};

Tensor peft_forward(const PeftExpert& expert, const Tensor& h, PeftCache* cache = nullptr);
// Returns d_input. Weight gradients accumulate only when the weights are trainable.
Tensor peft_backward(PeftExpert& expert, const PeftCache& cache, const Tensor& d_out);

}  // namespace perft

#include "perft/adapter.hpp"

#include "perft/errors.hpp"

namespace perft {

PeftExpert make_peft_expert(const std::string& name, std::size_t in_dim, std::size_t rank,
                            std::size_t out_dim, Activation act, double alpha, Rng& rng) {
  if (rank == 0) throw ConfigError("adapter bottleneck must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("adapter alpha must be positive");
  Tensor down = Tensor::zeros(in_dim, rank);
  for (auto& v : down.data()) v = rng.normal(0.0, kAdapterInitStd);
  PeftExpert e;
  e.w_down = Parameter(name + ".w_down", std::move(down));
  e.w_up = Parameter(name + ".w_up", Tensor::zeros(rank, out_dim));
  e.act = act;
  e.alpha = alpha;
  return e;
}

Tensor peft_forward(const PeftExpert& expert, const Tensor& h, PeftCache* cache) {
  Tensor pre = matmul(h, expert.w_down.value);
  Tensor hidden = apply_activation(expert.act, pre);
  Tensor out = matmul(hidden, expert.w_up.value);
  out *= expert.scale();
  if (cache) {
    cache->input = h;
    cache->pre = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return out;
}

Tensor peft_backward(PeftExpert& expert, const PeftCache& cache, const Tensor& d_out) {
  const double s = expert.scale();
  if (expert.w_up.trainable) gemm_accumulate(expert.w_up.grad, cache.hidden, true, d_out, false, s);
  Tensor d_hidden = Tensor::zeros(cache.hidden.rows(), cache.hidden.cols());
  gemm_accumulate(d_hidden, d_out, false, expert.w_up.value, true, s);
  if (expert.act != Activation::identity) {
    for (std::size_t i = 0; i < d_hidden.size(); ++i) {
      d_hidden[i] *= activate_derivative(expert.act, cache.pre[i]);
    }
  }
  if (expert.w_down.trainable) gemm_accumulate(expert.w_down.grad, cache.input, true, d_hidden, false);
  Tensor d_in = Tensor::zeros(cache.input.rows(), cache.input.cols());
  gemm_accumulate(d_in, d_hidden, false, expert.w_down.value, true);
  return d_in;
}

}  // namespace perft

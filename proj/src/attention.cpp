#include "perft/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "perft/errors.hpp"

namespace perft {

std::vector<double> Dropout::mask(std::size_t n) const {
  std::vector<double> m(n, 1.0);
  if (!active()) return m;
  const double keep_scale = 1.0 / (1.0 - p);
  for (auto& v : m) v = rng->uniform() < p ? 0.0 : keep_scale;
  return m;
}

namespace {

Tensor project(const Tensor& a, const Parameter& w, const std::optional<PeftExpert>& delta,
               std::optional<PeftCache>* delta_cache) {
  Tensor out = matmul(a, w.value);
  if (delta) {
    PeftCache dc;
    out += peft_forward(*delta, a, delta_cache ? &dc : nullptr);
    if (delta_cache) *delta_cache = std::move(dc);
  }
  return out;
}

}  // namespace

Tensor attention_forward(const Attention& attn, const Tensor& x, std::size_t batch,
                         std::size_t seq, const Dropout& dropout, AttentionCache* cache) {
  const std::size_t d = attn.width();
  if (x.cols() != d || x.rows() != batch * seq) {
    throw DimensionError("attention_forward: input " + shape_string(x.shape()) +
                         " does not match batch*seq x D");
  }
  if (d % attn.heads != 0) throw ConfigError("attention: width not divisible by head count");
  const std::size_t dh = d / attn.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  AttentionCache local;
  AttentionCache& c = cache ? *cache : local;
  c.batch = batch;
  c.seq = seq;
  c.normed = rms_norm(x, attn.norm.value, &c.norm);
  c.q = project(c.normed, attn.wq, attn.q_delta, &c.q_delta);
  c.k = matmul(c.normed, attn.wk.value);
  c.v = project(c.normed, attn.wv, attn.v_delta, &c.v_delta);
  c.context = Tensor::zeros(x.rows(), d);
  c.probs.assign(batch * attn.heads, {});
  c.keep.assign(batch * attn.heads, {});

  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < attn.heads; ++h) {
      auto& p = c.probs[b * attn.heads + h];
      p.assign(seq * seq, 0.0);
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = c.q.row(b * seq + i).data() + off;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = c.k.row(b * seq + j).data() + off;
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        for (std::size_t j = 0; j <= i; ++j) p[i * seq + j] = scores[j] / sum;
      }
      if (dropout.active()) c.keep[b * attn.heads + h] = dropout.mask(seq * seq);
      const auto& keep = c.keep[b * attn.heads + h];
      for (std::size_t i = 0; i < seq; ++i) {
        double* ctx = &c.context(b * seq + i, off);
        for (std::size_t j = 0; j <= i; ++j) {
          double w = p[i * seq + j];
          if (!keep.empty()) w *= keep[i * seq + j];
          if (w == 0.0) continue;
          const double* vj = c.v.row(b * seq + j).data() + off;
          for (std::size_t e = 0; e < dh; ++e) ctx[e] += w * vj[e];
        }
      }
    }
  }
  Tensor out = x;
  gemm_accumulate(out, c.context, false, attn.wo.value, false);
  return out;
}

Tensor attention_backward(Attention& attn, const AttentionCache& c, const Tensor& d_out) {
  const std::size_t d = attn.width();
  const std::size_t dh = d / attn.heads;
  const std::size_t seq = c.seq;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor d_context = Tensor::zeros(c.context.rows(), d);
  matmul_backward(c.context, attn.wo.value, d_out, &d_context,
                  attn.wo.trainable ? &attn.wo.grad : nullptr);

  Tensor dq = Tensor::zeros(c.q.rows(), d);
  Tensor dk = Tensor::zeros(c.k.rows(), d);
  Tensor dv = Tensor::zeros(c.v.rows(), d);
  std::vector<double> dp(seq);
  for (std::size_t b = 0; b < c.batch; ++b) {
    for (std::size_t h = 0; h < attn.heads; ++h) {
      const auto& p = c.probs[b * attn.heads + h];
      const auto& keep = c.keep[b * attn.heads + h];
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* dctx = &d_context(b * seq + i, off);
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double m = keep.empty() ? 1.0 : keep[i * seq + j];
          const double* vj = c.v.row(b * seq + j).data() + off;
          double g = 0.0;
          for (std::size_t e = 0; e < dh; ++e) g += dctx[e] * vj[e];
          dp[j] = g * m;
          const double w = p[i * seq + j] * m;
          if (w != 0.0) {
            double* dvj = &dv(b * seq + j, off);
            for (std::size_t e = 0; e < dh; ++e) dvj[e] += w * dctx[e];
          }
          dot += p[i * seq + j] * dp[j];
        }
        const double* qi = c.q.row(b * seq + i).data() + off;
        double* dqi = &dq(b * seq + i, off);
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = p[i * seq + j] * (dp[j] - dot) * inv_sqrt;
          if (ds == 0.0) continue;
          const double* kj = c.k.row(b * seq + j).data() + off;
          double* dkj = &dk(b * seq + j, off);
          for (std::size_t e = 0; e < dh; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }
  }

  Tensor d_normed = Tensor::zeros(c.normed.rows(), d);
  matmul_backward(c.normed, attn.wq.value, dq, &d_normed, attn.wq.trainable ? &attn.wq.grad : nullptr);
  matmul_backward(c.normed, attn.wk.value, dk, &d_normed, attn.wk.trainable ? &attn.wk.grad : nullptr);
  matmul_backward(c.normed, attn.wv.value, dv, &d_normed, attn.wv.trainable ? &attn.wv.grad : nullptr);
  if (attn.q_delta && c.q_delta) d_normed += peft_backward(*attn.q_delta, *c.q_delta, dq);
  if (attn.v_delta && c.v_delta) d_normed += peft_backward(*attn.v_delta, *c.v_delta, dv);

  Tensor dx = rms_norm_backward(c.norm, attn.norm.value, d_normed,
                                attn.norm.trainable ? &attn.norm.grad : nullptr);
  dx += d_out;
  return dx;
}

}  // namespace perft

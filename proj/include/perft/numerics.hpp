#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "perft/tensor.hpp"

namespace perft {

// ---------------------------------------------------------------- products

Tensor matmul(const Tensor& a, const Tensor& b);     // a * b
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T * b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T

// c += scale * op(a) * op(b). The primitive behind every forward and backward
// matrix product; shapes are checked, c must already have the result shape.
void gemm_accumulate(Tensor& c, const Tensor& a, bool transpose_a, const Tensor& b,
                     bool transpose_b, double scale = 1.0);

// Backward of c = a * b: da += dc * b^T, db += a^T * dc (null targets skipped).
void matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dc, Tensor* da, Tensor* db);

Tensor transpose(const Tensor& a);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
// out[rows[i]] += scale * src[i]
void scatter_add_rows(Tensor& out, const Tensor& src, std::span<const std::size_t> rows,
                      double scale = 1.0);
Tensor column(const Tensor& a, std::size_t c);

// ---------------------------------------------------------------- softmax

Tensor softmax_rows(const Tensor& z);
std::vector<double> logsumexp_rows(const Tensor& z);
// dz = p * (dp - <dp, p>) row-wise, for p = softmax_rows(z).
Tensor softmax_rows_backward(const Tensor& probs, const Tensor& d_probs);

// ---------------------------------------------------------------- activations

enum class Activation { identity, relu, silu };

std::string_view activation_name(Activation a);
Activation parse_activation(std::string_view name);
double activate(Activation a, double x);
double activate_derivative(Activation a, double x);
Tensor apply_activation(Activation a, const Tensor& x);

// ---------------------------------------------------------------- normalization

struct RmsNormCache {
  Tensor input;
  std::vector<double> inv_rms;
};

inline constexpr double kRmsEps = 1e-6;

// y = x / sqrt(mean(x^2) + eps) * gain, gain is 1 x D.
Tensor rms_norm(const Tensor& x, const Tensor& gain, RmsNormCache* cache = nullptr);
// Returns dx; accumulates into d_gain when non-null.
Tensor rms_norm_backward(const RmsNormCache& cache, const Tensor& gain, const Tensor& dy,
                         Tensor* d_gain);

// ---------------------------------------------------------------- gradient oracle

inline constexpr double kFiniteDiffEps = 1e-5;

// Central differences of f with respect to every coordinate of every listed
// parameter. Parameter values are perturbed in place and restored.
std::vector<Tensor> finite_diff_grad(const std::function<double()>& f,
                                     std::span<Parameter* const> params,
                                     double eps = kFiniteDiffEps);

// max over coordinates of |a - b| / max(1, |a|, |b|)
double max_relative_error(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------- special functions

// Chi-square CDF with k degrees of freedom: P(k/2, x/2).
double chi2_cdf(double x, int k);

// ---------------------------------------------------------------- PCA

struct PcaModel {
  Tensor mean;        // 1 x d
  Tensor components;  // dims x d, orthonormal rows
  std::vector<double> explained_variance;
  double total_variance = 0.0;

  double explained_ratio() const;
};

// Components are the top eigenvectors of the mean-centred covariance, from a
// symmetric eigensolver; each is signed so its first nonzero coordinate is
// positive.
PcaModel pca_fit(const Tensor& x, std::size_t dims);
Tensor pca_project(const PcaModel& model, const Tensor& x);

struct PcaResult {
  PcaModel model;
  Tensor projected;
};

PcaResult pca_fit_project(const Tensor& x, std::size_t dims);

}  // namespace perft

#include "perft/numerics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <limits>

#include "perft/errors.hpp"

namespace perft {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMatrix>;
using View = Eigen::Map<RowMatrix>;

ConstView view(const Tensor& t) { return ConstView(t.data().data(), t.rows(), t.cols()); }
View view(Tensor& t) { return View(t.data().data(), t.rows(), t.cols()); }

void require_shape(bool ok, std::string_view op, const Tensor& a, const Tensor& b) {
  if (!ok) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_shape(a.cols() == b.rows(), "matmul", a, b);
  Tensor c = Tensor::zeros(a.rows(), b.cols());
  view(c).noalias() = view(a) * view(b);
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_shape(a.rows() == b.rows(), "matmul_tn", a, b);
  Tensor c = Tensor::zeros(a.cols(), b.cols());
  view(c).noalias() = view(a).transpose() * view(b);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_shape(a.cols() == b.cols(), "matmul_nt", a, b);
  Tensor c = Tensor::zeros(a.rows(), b.rows());
  view(c).noalias() = view(a) * view(b).transpose();
  return c;
}

void gemm_accumulate(Tensor& c, const Tensor& a, bool transpose_a, const Tensor& b,
                     bool transpose_b, double scale) {
  const std::size_t m = transpose_a ? a.cols() : a.rows();
  const std::size_t k = transpose_a ? a.rows() : a.cols();
  const std::size_t kb = transpose_b ? b.cols() : b.rows();
  const std::size_t n = transpose_b ? b.rows() : b.cols();
  require_shape(k == kb, "gemm", a, b);
  if (c.rows() != m || c.cols() != n) {
    throw DimensionError("gemm: output shape " + shape_string(c.shape()) + " expected [" +
                         std::to_string(m) + "x" + std::to_string(n) + "]");
  }
  auto out = view(c);
  if (!transpose_a && !transpose_b) out.noalias() += scale * (view(a) * view(b));
  if (transpose_a && !transpose_b) out.noalias() += scale * (view(a).transpose() * view(b));
  if (!transpose_a && transpose_b) out.noalias() += scale * (view(a) * view(b).transpose());
  if (transpose_a && transpose_b)
    out.noalias() += scale * (view(a).transpose() * view(b).transpose());
}

void matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dc, Tensor* da, Tensor* db) {
  if (da) gemm_accumulate(*da, dc, false, b, true);
  if (db) gemm_accumulate(*db, a, true, dc, false);
}

Tensor transpose(const Tensor& a) {
  Tensor t = Tensor::zeros(a.cols(), a.rows());
  view(t) = view(a).transpose();
  return t;
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (rows.empty()) return {};
  Tensor out = Tensor::zeros(rows.size(), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = a.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void scatter_add_rows(Tensor& out, const Tensor& src, std::span<const std::size_t> rows,
                      double scale) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto dst = out.row(rows[i]);
    auto s = src.row(i);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += scale * s[j];
  }
}

Tensor column(const Tensor& a, std::size_t c) {
  Tensor out({a.rows()});
  for (std::size_t r = 0; r < a.rows(); ++r) out[r] = a(r, c);
  return out;
}

Tensor softmax_rows(const Tensor& z) {
  Tensor p = z;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    auto row = p.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (auto& v : row) {
      v = std::exp(v - m);
      sum += v;
    }
    for (auto& v : row) v /= sum;
  }
  return p;
}

std::vector<double> logsumexp_rows(const Tensor& z) {
  std::vector<double> out(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - m);
    out[r] = m + std::log(sum);
  }
  return out;
}

Tensor softmax_rows_backward(const Tensor& probs, const Tensor& d_probs) {
  Tensor dz = Tensor::zeros(probs.rows(), probs.cols());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    auto p = probs.row(r);
    auto dp = d_probs.row(r);
    double dot = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) dot += p[j] * dp[j];
    auto out = dz.row(r);
    for (std::size_t j = 0; j < p.size(); ++j) out[j] = p[j] * (dp[j] - dot);
  }
  return dz;
}

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::silu: return "silu";
  }
  return "identity";
}

Activation parse_activation(std::string_view name) {
  if (name == "identity" || name == "lora") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "silu") return Activation::silu;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

double activate(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::silu: return x / (1.0 + std::exp(-x));
  }
  return x;
}

double activate_derivative(Activation a, double x) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::silu: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    }
  }
  return 1.0;
}

Tensor apply_activation(Activation a, const Tensor& x) {
  if (a == Activation::identity) return x;
  Tensor y = x;
  for (auto& v : y.data()) v = activate(a, v);
  return y;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, RmsNormCache* cache) {
  const std::size_t d = x.cols();
  if (gain.size() != d) throw DimensionError("rms_norm: gain width mismatch");
  Tensor y = x;
  std::vector<double> inv(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = y.row(r);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
    for (std::size_t j = 0; j < d; ++j) row[j] = row[j] * inv[r] * gain[j];
  }
  if (cache) {
    cache->input = x;
    cache->inv_rms = std::move(inv);
  }
  return y;
}

Tensor rms_norm_backward(const RmsNormCache& cache, const Tensor& gain, const Tensor& dy,
                         Tensor* d_gain) {
  const Tensor& x = cache.input;
  const std::size_t d = x.cols();
  Tensor dx = Tensor::zeros(x.rows(), d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double inv = cache.inv_rms[r];
    auto xr = x.row(r);
    auto dyr = dy.row(r);
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += gain[j] * dyr[j] * xr[j];
    auto out = dx.row(r);
    const double c = inv * inv * inv * dot / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) out[j] = inv * gain[j] * dyr[j] - c * xr[j];
    if (d_gain) {
      for (std::size_t j = 0; j < d; ++j) (*d_gain)[j] += dyr[j] * xr[j] * inv;
    }
  }
  return dx;
}

std::vector<Tensor> finite_diff_grad(const std::function<double()>& f,
                                     std::span<Parameter* const> params, double eps) {
  if (!(eps > 0.0)) throw DomainError("finite_diff_grad: eps must be positive");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Parameter* p : params) {
    Tensor g(p->value.shape());
    auto values = p->value.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = f();
      values[i] = saved - eps;
      const double down = f();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite_diff_grad: objective is not finite at " + p->name + "[" +
                           std::to_string(i) + "]");
      }
      g[i] = (up - down) / (2.0 * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double max_relative_error(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("max_relative_error: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

double chi2_cdf(double x, int k) {
  if (k < 1) throw DomainError("chi2_cdf: degrees of freedom must be >= 1");
  if (std::isnan(x) || x < 0.0) throw DomainError("chi2_cdf: x must be >= 0");
  if (x == 0.0) return 0.0;
  if (std::isinf(x)) return 1.0;
  return boost::math::gamma_p(0.5 * k, 0.5 * x);
}

double PcaModel::explained_ratio() const {
  double s = 0.0;
  for (double v : explained_variance) s += v;
  return total_variance > 0.0 ? s / total_variance : 0.0;
}

PcaModel pca_fit(const Tensor& x, std::size_t dims) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (n < 2) throw DegenerateInputError("pca_fit: need at least two samples");
  if (dims == 0 || dims > std::min(n, d)) {
    throw DimensionError("pca_fit: dims must be in [1, min(n, d)]");
  }
  PcaModel model;
  model.mean = Tensor::zeros(1, d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) model.mean[j] += x(r, j);
  }
  model.mean *= 1.0 / static_cast<double>(n);

  RowMatrix centred = view(x);
  centred.rowwise() -= view(model.mean).row(0);
  const RowMatrix cov = (centred.transpose() * centred) / static_cast<double>(n - 1);
  model.total_variance = cov.trace();
  const double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
  if (model.total_variance <= 1e-14 * scale) {
    throw DegenerateInputError("pca_fit: input has zero variance");
  }

  Eigen::SelfAdjointEigenSolver<RowMatrix> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("pca_fit: eigensolver failed");
  // Eigenvalues ascend; take the top `dims` from the back.
  model.components = Tensor::zeros(dims, d);
  for (std::size_t c = 0; c < dims; ++c) {
    const auto idx = static_cast<Eigen::Index>(d - 1 - c);
    Eigen::VectorXd v = solver.eigenvectors().col(idx);
    for (std::size_t j = 0; j < d; ++j) {
      if (std::abs(v(static_cast<Eigen::Index>(j))) > 1e-12) {
        if (v(static_cast<Eigen::Index>(j)) < 0.0) v = -v;
        break;
      }
    }
    for (std::size_t j = 0; j < d; ++j) model.components(c, j) = v(static_cast<Eigen::Index>(j));
    model.explained_variance.push_back(std::max(0.0, solver.eigenvalues()(idx)));
  }
  return model;
}

Tensor pca_project(const PcaModel& model, const Tensor& x) {
  if (x.cols() != model.mean.cols()) throw DimensionError("pca_project: width mismatch");
  RowMatrix centred = view(x);
  centred.rowwise() -= view(model.mean).row(0);
  Tensor out = Tensor::zeros(x.rows(), model.components.rows());
  view(out).noalias() = centred * view(model.components).transpose();
  return out;
}

PcaResult pca_fit_project(const Tensor& x, std::size_t dims) {
  PcaResult result{pca_fit(x, dims), {}};
  result.projected = pca_project(result.model, x);
  return result;
}

}  // namespace perft

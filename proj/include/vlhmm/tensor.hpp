#pragma once

// Minimal dense tensor core: the forward operations needed by the model and
// their vector-Jacobian products, plus a central finite-difference oracle.
// No computation graph; callers chain VJPs by hand. All reductions run in a
// fixed sequential order so results are bit-reproducible.

#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vlhmm {

template <typename Real>
inline constexpr Real neg_inf = -std::numeric_limits<Real>::infinity();

template <typename Real>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, Real fill = Real(0))
      : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (std::size_t d : shape_) n *= d;
    data_.assign(n, fill);
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<Real> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    std::size_t n = 1;
    for (std::size_t d : t.shape_) n *= d;
    if (n != data.size()) throw std::invalid_argument("Tensor::from: data length does not match shape");
    t.data_ = std::move(data);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { assert(rank() == 2); return shape_[0]; }
  std::size_t cols() const { assert(rank() == 2); return shape_[1]; }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  Real at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<Real> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
  std::span<const Real> row(std::size_t r) const { return {data_.data() + r * shape_[1], shape_[1]}; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(Real v) { data_.assign(data_.size(), v); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) t[i] = static_cast<Other>(data_[i]);
    return t;
  }

private:
  std::vector<std::size_t> shape_;
  std::vector<Real> data_;
};

template <typename Real>
void add_inplace(Tensor<Real>& dst, const Tensor<Real>& src) {
  if (!dst.same_shape(src)) throw std::invalid_argument("add_inplace: shape mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename Real>
void scale_inplace(Tensor<Real>& t, Real s) {
  for (std::size_t i = 0; i < t.size(); ++i) t[i] *= s;
}

// ---------------------------------------------------------------------------
// matmul

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw std::invalid_argument("matmul: shape mismatch");
  const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
  Tensor<Real> c({m, p});
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c.data() + i * p;
    const Real* arow = a.data() + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const Real aik = arow[k];
      const Real* brow = b.data() + k * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

// B^T on the fly: returns a * b^T without materializing the transpose.
template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
    throw std::invalid_argument("matmul_nt: shape mismatch");
  const std::size_t m = a.rows(), n = a.cols(), p = b.rows();
  Tensor<Real> c({m, p});
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a.data() + i * n;
    Real* crow = c.data() + i * p;
    for (std::size_t j = 0; j < p; ++j) {
      const Real* brow = b.data() + j * n;
      Real acc = 0;
      for (std::size_t k = 0; k < n; ++k) acc += arow[k] * brow[k];
      crow[j] = acc;
    }
  }
  return c;
}

// A^T on the fly: returns a^T * b.
template <typename Real>
Tensor<Real> matmul_tn(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
    throw std::invalid_argument("matmul_tn: shape mismatch");
  const std::size_t m = a.cols(), n = a.rows(), p = b.cols();
  Tensor<Real> c({m, p});
  for (std::size_t k = 0; k < n; ++k) {
    const Real* arow = a.data() + k * m;
    const Real* brow = b.data() + k * p;
    for (std::size_t i = 0; i < m; ++i) {
      const Real aki = arow[i];
      Real* crow = c.data() + i * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

// dC -> (dA, dB) for C = A * B.
template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> matmul_vjp(const Tensor<Real>& a, const Tensor<Real>& b,
                                                 const Tensor<Real>& dc) {
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

// ---------------------------------------------------------------------------
// relu

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  Tensor<Real> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > Real(0) ? x[i] : Real(0);
  return y;
}

template <typename Real>
Tensor<Real> relu_vjp(const Tensor<Real>& x, const Tensor<Real>& dy) {
  Tensor<Real> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > Real(0) ? dy[i] : Real(0);
  return dx;
}

// ---------------------------------------------------------------------------
// layer norm (row-wise, learnable gain and bias)

inline constexpr double kLayerNormEps = 1e-5;

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias) {
  const std::size_t r = x.rows(), h = x.cols();
  if (gain.size() != h || bias.size() != h) throw std::invalid_argument("layer_norm: gain/bias size");
  Tensor<Real> y({r, h});
  for (std::size_t i = 0; i < r; ++i) {
    const Real* xr = x.data() + i * h;
    Real* yr = y.data() + i * h;
    Real mu = 0;
    for (std::size_t j = 0; j < h; ++j) mu += xr[j];
    mu /= Real(h);
    Real var = 0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= Real(h);
    const Real inv = Real(1) / std::sqrt(var + Real(kLayerNormEps));
    for (std::size_t j = 0; j < h; ++j) yr[j] = gain[j] * (xr[j] - mu) * inv + bias[j];
  }
  return y;
}

template <typename Real>
struct LayerNormGrads {
  Tensor<Real> dx, dgain, dbias;
};

template <typename Real>
LayerNormGrads<Real> layer_norm_vjp(const Tensor<Real>& x, const Tensor<Real>& gain,
                                    const Tensor<Real>& dy) {
  const std::size_t r = x.rows(), h = x.cols();
  LayerNormGrads<Real> g{Tensor<Real>({r, h}), Tensor<Real>({h}), Tensor<Real>({h})};
  for (std::size_t i = 0; i < r; ++i) {
    const Real* xr = x.data() + i * h;
    const Real* dyr = dy.data() + i * h;
    Real* dxr = g.dx.data() + i * h;
    Real mu = 0;
    for (std::size_t j = 0; j < h; ++j) mu += xr[j];
    mu /= Real(h);
    Real var = 0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= Real(h);
    const Real inv = Real(1) / std::sqrt(var + Real(kLayerNormEps));
    // dxhat_j = dy_j * gain_j; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat))
    Real mean_dxh = 0, mean_dxh_xh = 0;
    for (std::size_t j = 0; j < h; ++j) {
      const Real xh = (xr[j] - mu) * inv;
      const Real dxh = dyr[j] * gain[j];
      mean_dxh += dxh;
      mean_dxh_xh += dxh * xh;
      g.dgain[j] += dyr[j] * xh;
      g.dbias[j] += dyr[j];
    }
    mean_dxh /= Real(h);
    mean_dxh_xh /= Real(h);
    for (std::size_t j = 0; j < h; ++j) {
      const Real xh = (xr[j] - mu) * inv;
      dxr[j] = inv * (dyr[j] * gain[j] - mean_dxh - xh * mean_dxh_xh);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// logsumexp / masked log-softmax

template <typename Real>
Real logsumexp(std::span<const Real> v) {
  if (v.empty()) throw std::invalid_argument("logsumexp: empty input");
  Real mx = neg_inf<Real>;
  for (Real x : v) mx = std::max(mx, x);
  if (mx == neg_inf<Real>) return neg_inf<Real>;
  Real s = 0;
  for (Real x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

// Inactive entries come out as -inf; active entries are normalized so that
// exp of them sums to one. An empty mask is a contract violation.
template <typename Real>
void masked_log_softmax_inplace(std::span<Real> logits, std::span<const std::uint8_t> mask) {
  if (logits.size() != mask.size()) throw std::invalid_argument("masked_log_softmax: mask size");
  Real mx = neg_inf<Real>;
  bool any = false;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i]) {
      any = true;
      mx = std::max(mx, logits[i]);
    }
  }
  if (!any) throw std::invalid_argument("masked_log_softmax: empty support");
  if (mx == neg_inf<Real>) throw std::domain_error("masked_log_softmax: active logits are all -inf");
  Real s = 0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (mask[i]) s += std::exp(logits[i] - mx);
  const Real lse = mx + std::log(s);
  for (std::size_t i = 0; i < logits.size(); ++i)
    logits[i] = mask[i] ? logits[i] - lse : neg_inf<Real>;
}

template <typename Real>
std::vector<Real> masked_log_softmax(std::span<const Real> logits, std::span<const std::uint8_t> mask) {
  std::vector<Real> out(logits.begin(), logits.end());
  masked_log_softmax_inplace<Real>(out, mask);
  return out;
}

// VJP from the log-space output: dx_j = dy_j - exp(y_j) * sum(dy over active).
template <typename Real>
std::vector<Real> masked_log_softmax_vjp(std::span<const Real> y_log, std::span<const Real> dy,
                                         std::span<const std::uint8_t> mask) {
  Real s = 0;
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (mask[i]) s += dy[i];
  std::vector<Real> dx(dy.size(), Real(0));
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (mask[i]) dx[i] = dy[i] - std::exp(y_log[i]) * s;
  return dx;
}

// All-active row-wise log-softmax over a 2-D tensor, in place.
template <typename Real>
void log_softmax_rows_inplace(Tensor<Real>& x) {
  const std::size_t h = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    const Real lse = logsumexp<Real>({r.data(), h});
    for (std::size_t j = 0; j < h; ++j) r[j] -= lse;
  }
}

// Row-wise VJP for all-active log-softmax: dX = dY - exp(Y) * rowsum(dY).
template <typename Real>
Tensor<Real> log_softmax_rows_vjp(const Tensor<Real>& y_log, const Tensor<Real>& dy) {
  Tensor<Real> dx(y_log.shape());
  const std::size_t h = y_log.cols();
  for (std::size_t i = 0; i < y_log.rows(); ++i) {
    const Real* yr = y_log.data() + i * h;
    const Real* dyr = dy.data() + i * h;
    Real* dxr = dx.data() + i * h;
    Real s = 0;
    for (std::size_t j = 0; j < h; ++j) s += dyr[j];
    for (std::size_t j = 0; j < h; ++j) dxr[j] = dyr[j] - std::exp(yr[j]) * s;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// embedding gather / scatter

template <typename Real>
Tensor<Real> embedding_gather(const Tensor<Real>& table, std::span<const std::int32_t> ids) {
  const std::size_t h = table.cols();
  Tensor<Real> out({ids.size(), h});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int32_t id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows())
      throw std::out_of_range("embedding_gather: id out of range");
    const Real* src = table.data() + static_cast<std::size_t>(id) * h;
    Real* dst = out.data() + i * h;
    for (std::size_t j = 0; j < h; ++j) dst[j] = src[j];
  }
  return out;
}

// Accumulates dY rows into the table gradient; duplicate ids add.
template <typename Real>
void embedding_scatter_add(Tensor<Real>& dtable, std::span<const std::int32_t> ids,
                           const Tensor<Real>& dy) {
  const std::size_t h = dtable.cols();
  if (dy.rows() != ids.size() || dy.cols() != h)
    throw std::invalid_argument("embedding_scatter_add: shape mismatch");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Real* dst = dtable.data() + static_cast<std::size_t>(ids[i]) * h;
    const Real* src = dy.data() + i * h;
    for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
  }
}

// ---------------------------------------------------------------------------
// gradients container

template <typename Real>
struct Gradients {
  std::map<std::string, Tensor<Real>> by_name;

  Tensor<Real>& ensure(const std::string& name, const std::vector<std::size_t>& shape) {
    auto it = by_name.find(name);
    if (it == by_name.end()) it = by_name.emplace(name, Tensor<Real>(shape)).first;
    return it->second;
  }

  void add(const std::string& name, const Tensor<Real>& g) {
    add_inplace(ensure(name, g.shape()), g);
  }

  const Tensor<Real>* find(const std::string& name) const {
    auto it = by_name.find(name);
    return it == by_name.end() ? nullptr : &it->second;
  }
};

using NamedParams = std::vector<std::pair<std::string, Tensor<double>*>>;

// Central differences; `f` must be a deterministic function of the referenced
// tensors. 64-bit only by construction.
template <typename F>
Gradients<double> finite_diff_grad(const NamedParams& params, F&& f, double eps) {
  Gradients<double> g;
  for (const auto& [name, tensor] : params) {
    Tensor<double>& grad = g.ensure(name, tensor->shape());
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      const double saved = (*tensor)[i];
      (*tensor)[i] = saved + eps;
      const double fp = f();
      (*tensor)[i] = saved - eps;
      const double fm = f();
      (*tensor)[i] = saved;
      grad[i] = (fp - fm) / (2.0 * eps);
    }
  }
  return g;
}

}  // namespace vlhmm

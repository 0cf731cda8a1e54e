#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ambert/common.hpp"

namespace ambert {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

/// Dense row-major tensor. T is float for training and double for
/// gradient checks.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    for (std::size_t d : shape_)
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
    data_.assign(numel(shape_), fill);
  }
  Tensor(std::size_t rows, std::size_t cols, T fill = T(0)) : Tensor(Shape{rows, cols}, fill) {}

  static std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : data_.size() / shape_[0]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  T* row(std::size_t r) { return data_.data() + r * cols(); }
  const T* row(std::size_t r) const { return data_.data() + r * cols(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  Tensor rows_slice(std::size_t begin, std::size_t end) const {
    Tensor out(end - begin, cols());
    std::copy(row(begin), row(begin) + (end - begin) * cols(), out.data());
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape());
}

namespace nn {

/// Multiply-add count of every matmul-like kernel run on this thread
/// (2 flops per multiply-add). Used by the inference cost census.
inline std::uint64_t& flop_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(str_cat(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                             shape_str(b.shape())));
}

// ---- matmul: C[m,n] = A[m,k] B[k,n] -----------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw ShapeError(str_cat("matmul: incompatible shapes ", shape_str(a.shape()), " x ",
                             shape_str(b.shape())));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c.row(i);
    const T* ai = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b.row(p);
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  flop_counter() += 2ULL * m * k * n;
  return c;
}

/// Accumulates dA += dC B^T and dB += A^T dC (either may be null).
template <typename T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc,
                     Tensor<T>* da, Tensor<T>* db) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (dc.rows() != m || dc.cols() != n)
    throw ShapeError(str_cat("matmul_backward: upstream ", shape_str(dc.shape()),
                             " does not match output [", m, ",", n, "]"));
  if (da) {
    require_same(*da, a, "matmul_backward(dA)");
    for (std::size_t i = 0; i < m; ++i) {
      const T* dci = dc.row(i);
      T* dai = da->row(i);
      for (std::size_t p = 0; p < k; ++p) {
        const T* bp = b.row(p);
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += dci[j] * bp[j];
        dai[p] += s;
      }
    }
  }
  if (db) {
    require_same(*db, b, "matmul_backward(dB)");
    for (std::size_t i = 0; i < m; ++i) {
      const T* ai = a.row(i);
      const T* dci = dc.row(i);
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ai[p];
        T* dbp = db->row(p);
        for (std::size_t j = 0; j < n; ++j) dbp[j] += av * dci[j];
      }
    }
  }
  flop_counter() += (da ? 2ULL : 0ULL) * m * k * n + (db ? 2ULL : 0ULL) * m * k * n;
}

// ---- C[m,n] = A[m,k] B[n,k]^T, used by the tied output projections ------------

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
    throw ShapeError(str_cat("matmul_nt: incompatible shapes ", shape_str(a.shape()), " x ",
                             shape_str(b.shape()), "^T"));
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor<T> c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a.row(i);
    T* ci = c.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b.row(j);
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = s;
    }
  }
  flop_counter() += 2ULL * m * k * n;
  return c;
}

template <typename T>
void matmul_nt_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc,
                        Tensor<T>* da, Tensor<T>* db) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const T* dci = dc.row(i);
    const T* ai = a.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const T g = dci[j];
      if (g == T(0)) continue;
      const T* bj = b.row(j);
      if (da) {
        T* dai = da->row(i);
        for (std::size_t p = 0; p < k; ++p) dai[p] += g * bj[p];
      }
      if (db) {
        T* dbj = db->row(j);
        for (std::size_t p = 0; p < k; ++p) dbj[p] += g * ai[p];
      }
    }
  }
}

// ---- linear: y = x W + b -----------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (b.size() != w.cols())
    throw ShapeError(str_cat("linear: bias ", shape_str(b.shape()), " vs weight ",
                             shape_str(w.shape())));
  Tensor<T> y = matmul(x, w);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    T* yi = y.row(i);
    for (std::size_t j = 0; j < y.cols(); ++j) yi[j] += b[j];
  }
  return y;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                     Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
  matmul_backward(x, w, dy, dx, dw);
  if (db) {
    for (std::size_t i = 0; i < dy.rows(); ++i) {
      const T* di = dy.row(i);
      for (std::size_t j = 0; j < dy.cols(); ++j) (*db)[j] += di[j];
    }
  }
}

// ---- elementwise add -----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  Tensor<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

/// d(a+b)/da = d(a+b)/db = identity; accumulates into both.
template <typename T>
void add_backward(const Tensor<T>& dc, Tensor<T>* da, Tensor<T>* db) {
  for (Tensor<T>* d : {da, db}) {
    if (!d) continue;
    require_same(*d, dc, "add_backward");
    for (std::size_t i = 0; i < dc.size(); ++i) (*d)[i] += dc[i];
  }
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  require_same(dst, src, "accumulate");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// ---- layer norm over the last dimension -------------------------------------

inline constexpr double kLayerNormEps = 1e-12;

template <typename T>
struct LayerNormCache {
  Tensor<T> xhat;          // normalized input, pre-affine
  std::vector<T> rstd;     // 1 / sqrt(var + eps) per row
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     LayerNormCache<T>* cache = nullptr) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.size() != d || beta.size() != d)
    throw ShapeError(str_cat("layer_norm: input ", shape_str(x.shape()), " vs gamma ",
                             shape_str(gamma.shape())));
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* xi = x.row(i);
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<T>(d);
    const T r = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[i] = r;
    T* hi = xhat.row(i);
    T* yi = y.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      hi[j] = (xi[j] - mean) * r;
      yi[j] = hi[j] * gamma[j] + beta[j];
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

/// Returns dx; accumulates dgamma/dbeta.
template <typename T>
Tensor<T> layer_norm_backward(const LayerNormCache<T>& cache, const Tensor<T>& gamma,
                              const Tensor<T>& dy, Tensor<T>* dgamma, Tensor<T>* dbeta) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Tensor<T> dx(dy.shape());
  std::vector<T> g(d);
  for (std::size_t i = 0; i < n; ++i) {
    const T* dyi = dy.row(i);
    const T* hi = cache.xhat.row(i);
    T sum_g = 0, sum_gh = 0;
    for (std::size_t j = 0; j < d; ++j) {
      g[j] = dyi[j] * gamma[j];
      sum_g += g[j];
      sum_gh += g[j] * hi[j];
      if (dgamma) (*dgamma)[j] += dyi[j] * hi[j];
      if (dbeta) (*dbeta)[j] += dyi[j];
    }
    const T inv_d = T(1) / static_cast<T>(d);
    T* dxi = dx.row(i);
    for (std::size_t j = 0; j < d; ++j)
      dxi[j] = cache.rstd[i] * (g[j] - inv_d * sum_g - hi[j] * inv_d * sum_gh);
  }
  return dx;
}

// ---- GELU (exact, erf form) --------------------------------------------------

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = static_cast<T>(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  require_same(x, dy, "gelu_backward");
  Tensor<T> dx(x.shape());
  const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  const T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
    const T pdf = inv_sqrt2pi * std::exp(static_cast<T>(-0.5) * x[i] * x[i]);
    dx[i] = dy[i] * (cdf + x[i] * pdf);
  }
  return dx;
}

// ---- row softmax -------------------------------------------------------------

template <typename T>
void softmax_row_inplace(T* row, std::size_t n) {
  T mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T s = 0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    s += row[j];
  }
  for (std::size_t j = 0; j < n; ++j) row[j] /= s;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (std::size_t i = 0; i < y.rows(); ++i) softmax_row_inplace(y.row(i), y.cols());
  return y;
}

/// dx = y * (dy - <dy, y>) row-wise.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  require_same(y, dy, "softmax_backward");
  Tensor<T> dx(y.shape());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const T* yi = y.row(i);
    const T* di = dy.row(i);
    T dot = 0;
    for (std::size_t j = 0; j < y.cols(); ++j) dot += yi[j] * di[j];
    T* xi = dx.row(i);
    for (std::size_t j = 0; j < y.cols(); ++j) xi[j] = yi[j] * (di[j] - dot);
  }
  return dx;
}

// ---- embedding lookup --------------------------------------------------------

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  Tensor<T> out(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows())
      throw ShapeError(str_cat("embedding_lookup: id ", ids[i], " at position ", i,
                               " outside table ", shape_str(table.shape())));
    std::copy(table.row(ids[i]), table.row(ids[i]) + table.cols(), out.row(i));
  }
  return out;
}

/// Scatter-add of row gradients into the table gradient.
template <typename T>
void embedding_backward(std::span<const int> ids, const Tensor<T>& dy, Tensor<T>& dtable) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    T* dst = dtable.row(static_cast<std::size_t>(ids[i]));
    const T* src = dy.row(i);
    for (std::size_t j = 0; j < dy.cols(); ++j) dst[j] += src[j];
  }
}

// ---- inverted dropout --------------------------------------------------------

/// Scales kept units by 1/(1-rate); `mask` receives the per-element scale
/// (0 or 1/(1-rate)). rate == 0 is the identity and consumes no draws.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, std::vector<T>* mask) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0,1)");
  if (rate == 0.0) {
    if (mask) mask->clear();
    return x;
  }
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> m(x.size());
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    m[i] = rng.uniform() < rate ? T(0) : scale;
    y[i] = x[i] * m[i];
  }
  if (mask) *mask = std::move(m);
  return y;
}

template <typename T>
Tensor<T> dropout_backward(const std::vector<T>& mask, const Tensor<T>& dy) {
  if (mask.empty()) return dy;
  Tensor<T> dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask[i];
  return dx;
}

// ---- multi-head scaled dot-product attention ----------------------------------
// q, k, v: [L, heads*hs]; heads are contiguous column blocks.

template <typename T>
struct AttentionCache {
  std::vector<Tensor<T>> probs;          // per head, pre-dropout
  std::vector<std::vector<T>> masks;     // per head dropout masks (empty = none)
};

/// Keys flagged in `key_masked` receive zero probability.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const std::vector<bool>& key_masked, double dropout_rate, Rng& rng,
                    AttentionCache<T>* cache) {
  require_same(q, k, "attention(k)");
  require_same(q, v, "attention(v)");
  const std::size_t len = q.rows();
  if (heads == 0 || q.cols() % heads != 0)
    throw ShapeError(str_cat("attention: width ", q.cols(), " not divisible by ", heads, " heads"));
  if (key_masked.size() != len) throw ShapeError("attention: key mask length mismatch");
  const std::size_t hs = q.cols() / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hs)));
  Tensor<T> ctx(q.shape());
  AttentionCache<T> c;
  c.probs.resize(heads);
  c.masks.resize(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hs;
    Tensor<T> s(len, len);
    for (std::size_t i = 0; i < len; ++i) {
      const T* qi = q.row(i) + off;
      for (std::size_t j = 0; j < len; ++j) {
        if (key_masked[j]) {
          s(i, j) = -std::numeric_limits<T>::infinity();
          continue;
        }
        const T* kj = k.row(j) + off;
        T acc = 0;
        for (std::size_t t = 0; t < hs; ++t) acc += qi[t] * kj[t];
        s(i, j) = acc * scale;
      }
    }
    Tensor<T> prob = softmax(s);
    Tensor<T> pd = dropout(prob, dropout_rate, rng, &c.masks[h]);
    for (std::size_t i = 0; i < len; ++i) {
      T* ci = ctx.row(i) + off;
      for (std::size_t j = 0; j < len; ++j) {
        const T pij = pd(i, j);
        if (pij == T(0)) continue;
        const T* vj = v.row(j) + off;
        for (std::size_t t = 0; t < hs; ++t) ci[t] += pij * vj[t];
      }
    }
    c.probs[h] = std::move(prob);
  }
  flop_counter() += 2ULL * 2ULL * len * len * q.cols();
  if (cache) *cache = std::move(c);
  return ctx;
}

/// Accumulates into dq, dk, dv.
template <typename T>
void attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                        std::size_t heads, const AttentionCache<T>& c, const Tensor<T>& dctx,
                        Tensor<T>& dq, Tensor<T>& dk, Tensor<T>& dv) {
  const std::size_t len = q.rows();
  const std::size_t hs = q.cols() / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hs)));
  Tensor<T> dp(len, len);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hs;
    const Tensor<T>& prob = c.probs[h];
    const std::vector<T>& mask = c.masks[h];
    for (std::size_t i = 0; i < len; ++i) {
      const T* dci = dctx.row(i) + off;
      for (std::size_t j = 0; j < len; ++j) {
        const T* vj = v.row(j) + off;
        T acc = 0;
        for (std::size_t t = 0; t < hs; ++t) acc += dci[t] * vj[t];
        const T keep = mask.empty() ? T(1) : mask[i * len + j];
        dp(i, j) = acc * keep;
        const T pd = prob(i, j) * keep;
        if (pd != T(0)) {
          T* dvj = dv.row(j) + off;
          for (std::size_t t = 0; t < hs; ++t) dvj[t] += pd * dci[t];
        }
      }
    }
    Tensor<T> ds = softmax_backward(prob, dp);
    for (std::size_t i = 0; i < len; ++i) {
      const T* qi = q.row(i) + off;
      T* dqi = dq.row(i) + off;
      for (std::size_t j = 0; j < len; ++j) {
        const T sij = ds(i, j) * scale;
        if (sij == T(0)) continue;
        const T* kj = k.row(j) + off;
        T* dkj = dk.row(j) + off;
        for (std::size_t t = 0; t < hs; ++t) {
          dqi[t] += sij * kj[t];
          dkj[t] += sij * qi[t];
        }
      }
    }
  }
}

// ---- losses on logit rows ----------------------------------------------------

/// Cross-entropy of one logit row against `target`; writes softmax - onehot
/// into grad (if non-null) and returns the loss in double.
template <typename T>
double cross_entropy_row(const T* logits, std::size_t n, int target, T* grad) {
  double mx = logits[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(logits[j]));
  double s = 0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(static_cast<double>(logits[j]) - mx);
  const double lse = mx + std::log(s);
  if (grad) {
    for (std::size_t j = 0; j < n; ++j)
      grad[j] = static_cast<T>(std::exp(static_cast<double>(logits[j]) - lse));
    grad[target] -= T(1);
  }
  return lse - static_cast<double>(logits[target]);
}

}  // namespace nn
}  // namespace ambert

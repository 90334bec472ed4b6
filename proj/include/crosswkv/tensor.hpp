#pragma once

// Dense row-major tensor with the small set of operations the WKV kernels,
// the cross-attention layer and the toy diffusion model need. Everything is
// templated on the scalar type (float or double); no broadcasting beyond what
// those call sites require.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cwkv {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

class shape_error : public std::runtime_error {
 public:
  explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr Dtype dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensor scalar type must be float or double");
  return std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
}

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

// Process-wide scalar accounting; the benchmark reports peak_scalars as a
// cheap allocation proxy. Counts scalars held by live Tensor buffers.
struct AllocStats {
  static std::atomic<i64>& live() {
    static std::atomic<i64> v{0};
    return v;
  }
  static std::atomic<i64>& peak() {
    static std::atomic<i64> v{0};
    return v;
  }
  static void add(i64 n) {
    i64 now = live().fetch_add(n, std::memory_order_relaxed) + n;
    i64 p = peak().load(std::memory_order_relaxed);
    while (now > p && !peak().compare_exchange_weak(p, now, std::memory_order_relaxed)) {
    }
  }
  static void sub(i64 n) { live().fetch_sub(n, std::memory_order_relaxed); }
  static void reset_peak() { peak().store(live().load(std::memory_order_relaxed)); }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(compute_numel(shape_)), T(0));
    account(static_cast<i64>(data_.size()));
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<i64>(data_.size()) != compute_numel(shape_))
      throw shape_error("tensor: data size " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
    account(static_cast<i64>(data_.size()));
  }

  Tensor(Shape shape, std::initializer_list<T> data)
      : Tensor(std::move(shape), std::vector<T>(data)) {}

  Tensor(const Tensor& o) : shape_(o.shape_), data_(o.data_) {
    account(static_cast<i64>(data_.size()));
  }

  Tensor(Tensor&& o) noexcept
      : shape_(std::move(o.shape_)), data_(std::move(o.data_)), counted_(o.counted_) {
    o.counted_ = 0;
    o.shape_.clear();
  }

  Tensor& operator=(const Tensor& o) {
    if (this != &o) {
      release();
      shape_ = o.shape_;
      data_ = o.data_;
      account(static_cast<i64>(data_.size()));
    }
    return *this;
  }

  Tensor& operator=(Tensor&& o) noexcept {
    if (this != &o) {
      release();
      shape_ = std::move(o.shape_);
      data_ = std::move(o.data_);
      counted_ = o.counted_;
      o.counted_ = 0;
      o.shape_.clear();
    }
    return *this;
  }

  ~Tensor() { release(); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = value;
    return t;
  }

  const Shape& shape() const { return shape_; }
  i64 rank() const { return static_cast<i64>(shape_.size()); }
  i64 dim(i64 i) const { return shape_.at(static_cast<std::size_t>(i)); }
  i64 numel() const { return static_cast<i64>(data_.size()); }
  bool empty() const { return data_.empty(); }
  Dtype dtype() const { return dtype_of<T>(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](i64 i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](i64 i) const { return data_[static_cast<std::size_t>(i)]; }

  template <class... Ix>
  T& operator()(Ix... ix) {
    return data_[offset(ix...)];
  }
  template <class... Ix>
  const T& operator()(Ix... ix) const {
    return data_[offset(ix...)];
  }

  // Metadata-only reshape; element order is untouched.
  Tensor reshaped(Shape shape) const {
    if (compute_numel(shape) != numel())
      throw shape_error("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    Tensor out(*this);
    out.shape_ = std::move(shape);
    return out;
  }

  bool all_finite() const {
    for (const T& x : data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

 private:
  static i64 compute_numel(const Shape& s) {
    i64 n = 1;
    for (i64 d : s) {
      if (d < 0) throw shape_error("tensor: negative dimension in " + shape_str(s));
      n *= d;
    }
    return n;
  }

  template <class... Ix>
  std::size_t offset(Ix... ix) const {
    constexpr std::size_t k = sizeof...(Ix);
    const i64 idx[k] = {static_cast<i64>(ix)...};
    std::size_t off = 0;
    for (std::size_t d = 0; d < k; ++d) off = off * static_cast<std::size_t>(shape_[d]) + static_cast<std::size_t>(idx[d]);
    return off;
  }

  void account(i64 n) {
    counted_ = n;
    if (n) AllocStats::add(n);
  }

  void release() {
    if (counted_) AllocStats::sub(counted_);
    counted_ = 0;
  }

  Shape shape_;
  std::vector<T> data_;
  i64 counted_ = 0;
};

namespace detail {

template <class T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

template <class T>
inline void check_channel_vec(const Tensor<T>& x, const Tensor<T>& v, const char* op) {
  i64 c = v.numel();
  if (x.rank() < 1 || x.dim(x.rank() - 1) != c)
    throw shape_error(std::string(op) + ": trailing axis of " + shape_str(x.shape()) +
                      " does not match vector " + shape_str(v.shape()));
}

}  // namespace detail

template <class T, class F>
Tensor<T> unary_map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  for (i64 i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}

template <class T, class F>
Tensor<T> binary_map(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f) {
  detail::check_same_shape(a, b, op);
  Tensor<T> out(a.shape());
  for (i64 i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_map(a, b, "add", [](T x, T y) { return x + y; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_map(a, b, "sub", [](T x, T y) { return x - y; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_map(a, b, "mul", [](T x, T y) { return x * y; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return unary_map(a, [c](T x) { return x * c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_map(a, [c](T x) { return x + c; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_map(a, [](T x) { return T(1) / (T(1) + std::exp(-x)); });
}

template <class T>
Tensor<T> exp_elem(const Tensor<T>& a) {
  return unary_map(a, [](T x) { return std::exp(x); });
}

// x[..., C] * v[C], broadcast over leading axes.
template <class T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& v) {
  detail::check_channel_vec(x, v, "mul_channel");
  i64 c = v.numel();
  Tensor<T> out(x.shape());
  for (i64 i = 0; i < x.numel(); ++i) out[i] = x[i] * v[i % c];
  return out;
}

// x[..., C] + v[C], broadcast over leading axes.
template <class T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& v) {
  detail::check_channel_vec(x, v, "add_channel");
  i64 c = v.numel();
  Tensor<T> out(x.shape());
  for (i64 i = 0; i < x.numel(); ++i) out[i] = x[i] + v[i % c];
  return out;
}

// a + (b - a) * t, elementwise; t either matches the full shape or is a
// trailing-axis vector.
template <class T>
Tensor<T> lerp(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& t) {
  detail::check_same_shape(a, b, "lerp");
  Tensor<T> out(a.shape());
  if (t.shape() == a.shape()) {
    for (i64 i = 0; i < a.numel(); ++i) out[i] = a[i] + (b[i] - a[i]) * t[i];
  } else {
    detail::check_channel_vec(a, t, "lerp");
    i64 c = t.numel();
    for (i64 i = 0; i < a.numel(); ++i) out[i] = a[i] + (b[i] - a[i]) * t[i % c];
  }
  return out;
}

// a[..., M, K] . b[K, P] (b broadcast over a's batch axes), or both with
// identical leading batch axes.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw shape_error("matmul: need rank >= 2, got " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  i64 m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  i64 kb = b.dim(b.rank() - 2), p = b.dim(b.rank() - 1);
  if (k != kb)
    throw shape_error("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  bool batched_b = b.rank() > 2;
  if (batched_b &&
      Shape(a.shape().begin(), a.shape().end() - 2) != Shape(b.shape().begin(), b.shape().end() - 2))
    throw shape_error("matmul: batch dimensions disagree, " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  i64 batch = a.numel() / (m * k == 0 ? 1 : m * k);
  if (m * k == 0) batch = 0;
  Shape out_shape(a.shape());
  out_shape[out_shape.size() - 1] = p;
  Tensor<T> out(out_shape);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (i64 n = 0; n < batch; ++n) {
    const T* an = pa + n * m * k;
    const T* bn = batched_b ? pb + n * k * p : pb;
    T* on = po + n * m * p;
    for (i64 i = 0; i < m; ++i) {
      for (i64 kk = 0; kk < k; ++kk) {
        T av = an[i * k + kk];
        const T* brow = bn + kk * p;
        T* orow = on + i * p;
        for (i64 j = 0; j < p; ++j) orow[j] += av * brow[j];
      }
    }
  }
  return out;
}

// Each trailing-axis vector divided by max(||v||_2, eps).
template <class T>
Tensor<T> l2_normalize_last(const Tensor<T>& x, T eps) {
  if (x.rank() < 1) throw shape_error("l2_normalize_last: rank-0 input");
  i64 n = x.dim(x.rank() - 1);
  i64 rows = n == 0 ? 0 : x.numel() / n;
  Tensor<T> out(x.shape());
  for (i64 r = 0; r < rows; ++r) {
    const T* v = x.data() + r * n;
    T* o = out.data() + r * n;
    T ss = 0;
    for (i64 i = 0; i < n; ++i) ss += v[i] * v[i];
    T norm = std::sqrt(ss);
    T denom = norm > eps ? norm : eps;
    for (i64 i = 0; i < n; ++i) o[i] = v[i] / denom;
  }
  return out;
}

// Group normalization over the trailing channel axis of x[..., C] split into
// `groups` equal groups; biased variance; optional affine (gamma/beta sized C).
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, i64 groups, T eps, const Tensor<T>* gamma,
                     const Tensor<T>* beta) {
  if (x.rank() < 1) throw shape_error("group_norm: rank-0 input");
  i64 c = x.dim(x.rank() - 1);
  if (groups <= 0 || c % groups != 0)
    throw shape_error("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                      std::to_string(groups));
  if (gamma) detail::check_channel_vec(x, *gamma, "group_norm gamma");
  if (beta) detail::check_channel_vec(x, *beta, "group_norm beta");
  i64 gsz = c / groups;
  i64 rows = c == 0 ? 0 : x.numel() / c;
  Tensor<T> out(x.shape());
  for (i64 r = 0; r < rows; ++r) {
    const T* v = x.data() + r * c;
    T* o = out.data() + r * c;
    for (i64 g = 0; g < groups; ++g) {
      const T* vg = v + g * gsz;
      T* og = o + g * gsz;
      T mean = 0;
      for (i64 i = 0; i < gsz; ++i) mean += vg[i];
      mean /= T(gsz);
      T var = 0;
      for (i64 i = 0; i < gsz; ++i) {
        T d = vg[i] - mean;
        var += d * d;
      }
      var /= T(gsz);
      T inv = T(1) / std::sqrt(var + eps);
      for (i64 i = 0; i < gsz; ++i) {
        T y = (vg[i] - mean) * inv;
        if (gamma) y *= (*gamma)[g * gsz + i];
        if (beta) y += (*beta)[g * gsz + i];
        og[i] = y;
      }
    }
  }
  return out;
}

// out[:, t, :] = x[:, t-1, :], first position zero. x is [B, T, C].
template <class T>
Tensor<T> time_shift(const Tensor<T>& x) {
  if (x.rank() != 3) throw shape_error("time_shift: expected [B,T,C], got " + shape_str(x.shape()));
  i64 b = x.dim(0), t = x.dim(1), c = x.dim(2);
  Tensor<T> out(x.shape());
  for (i64 bi = 0; bi < b; ++bi)
    for (i64 ti = 1; ti < t; ++ti)
      for (i64 ci = 0; ci < c; ++ci) out(bi, ti, ci) = x(bi, ti - 1, ci);
  return out;
}

// Zero-pad x[B, L, C] along the sequence axis to [B, T, C]; positions >= L are
// zero. Errors if L > T.
template <class T>
Tensor<T> pad_seq(const Tensor<T>& x, i64 target_t) {
  if (x.rank() != 3) throw shape_error("pad_seq: expected [B,L,C], got " + shape_str(x.shape()));
  i64 b = x.dim(0), l = x.dim(1), c = x.dim(2);
  if (l > target_t)
    throw shape_error("pad_seq: sequence length " + std::to_string(l) +
                      " exceeds target length " + std::to_string(target_t));
  Tensor<T> out(Shape{b, target_t, c});
  for (i64 bi = 0; bi < b; ++bi)
    for (i64 ti = 0; ti < l; ++ti)
      for (i64 ci = 0; ci < c; ++ci) out(bi, ti, ci) = x(bi, ti, ci);
  return out;
}

// x[B, T, H*N] summed over each head's N channels -> [B, T, H].
template <class T>
Tensor<T> sum_heads(const Tensor<T>& x, i64 heads) {
  if (x.rank() != 3 || heads <= 0 || x.dim(2) % heads != 0)
    throw shape_error("sum_heads: cannot split " + shape_str(x.shape()) + " into " +
                      std::to_string(heads) + " heads");
  i64 b = x.dim(0), t = x.dim(1), n = x.dim(2) / heads;
  Tensor<T> out(Shape{b, t, heads});
  for (i64 bi = 0; bi < b; ++bi)
    for (i64 ti = 0; ti < t; ++ti)
      for (i64 h = 0; h < heads; ++h) {
        T s = 0;
        for (i64 i = 0; i < n; ++i) s += x(bi, ti, h * n + i);
        out(bi, ti, h) = s;
      }
  return out;
}

// v[B, T, H*Nv] scaled per head by s[B, T, H].
template <class T>
Tensor<T> scale_heads(const Tensor<T>& v, const Tensor<T>& s) {
  if (v.rank() != 3 || s.rank() != 3 || v.dim(0) != s.dim(0) || v.dim(1) != s.dim(1) ||
      s.dim(2) <= 0 || v.dim(2) % s.dim(2) != 0)
    throw shape_error("scale_heads: shapes " + shape_str(v.shape()) + " and " +
                      shape_str(s.shape()) + " do not align");
  i64 b = v.dim(0), t = v.dim(1), h = s.dim(2), nv = v.dim(2) / h;
  Tensor<T> out(v.shape());
  for (i64 bi = 0; bi < b; ++bi)
    for (i64 ti = 0; ti < t; ++ti)
      for (i64 hi = 0; hi < h; ++hi) {
        T c = s(bi, ti, hi);
        for (i64 i = 0; i < nv; ++i) out(bi, ti, hi * nv + i) = v(bi, ti, hi * nv + i) * c;
      }
  return out;
}

// x[B, T, C] + e[T, C], the table broadcast over the batch.
template <class T>
Tensor<T> add_seq_table(const Tensor<T>& x, const Tensor<T>& e) {
  if (x.rank() != 3 || e.rank() != 2 || x.dim(1) != e.dim(0) || x.dim(2) != e.dim(1))
    throw shape_error("add_seq_table: shapes " + shape_str(x.shape()) + " and " +
                      shape_str(e.shape()) + " do not align");
  i64 b = x.dim(0), tc = x.dim(1) * x.dim(2);
  Tensor<T> y(x.shape());
  for (i64 bi = 0; bi < b; ++bi)
    for (i64 i = 0; i < tc; ++i) y[bi * tc + i] = x[bi * tc + i] + e[i];
  return y;
}

// x[B, T, C] + u[B, C], u broadcast over positions.
template <class T>
Tensor<T> add_batch_vec(const Tensor<T>& x, const Tensor<T>& u) {
  if (x.rank() != 3 || u.rank() != 2 || x.dim(0) != u.dim(0) || x.dim(2) != u.dim(1))
    throw shape_error("add_batch_vec: shapes " + shape_str(x.shape()) + " and " +
                      shape_str(u.shape()) + " do not align");
  i64 b = x.dim(0), t = x.dim(1), c = x.dim(2);
  Tensor<T> y(x.shape());
  for (i64 bi = 0; bi < b; ++bi)
    for (i64 ti = 0; ti < t; ++ti)
      for (i64 ci = 0; ci < c; ++ci) y(bi, ti, ci) = x(bi, ti, ci) + u(bi, ci);
  return y;
}

// One pass over x/delta producing x + delta * mix_i for each mix vector.
template <class T>
std::vector<Tensor<T>> fused_addcmul(const Tensor<T>& x, const Tensor<T>& delta,
                                     const std::vector<const Tensor<T>*>& mixes) {
  detail::check_same_shape(x, delta, "fused_addcmul");
  if (x.rank() < 1) throw shape_error("fused_addcmul: rank-0 input");
  i64 c = x.dim(x.rank() - 1);
  std::vector<Tensor<T>> outs;
  outs.reserve(mixes.size());
  for (const Tensor<T>* m : mixes) {
    detail::check_channel_vec(x, *m, "fused_addcmul");
    outs.emplace_back(x.shape());
  }
  i64 rows = c == 0 ? 0 : x.numel() / c;
  for (i64 r = 0; r < rows; ++r) {
    const T* px = x.data() + r * c;
    const T* pd = delta.data() + r * c;
    for (i64 i = 0; i < c; ++i) {
      T xv = px[i], dv = pd[i];
      for (std::size_t s = 0; s < mixes.size(); ++s)
        outs[s].data()[r * c + i] = xv + dv * mixes[s]->data()[i];
    }
  }
  return outs;
}

template <class T>
T sum_all(const Tensor<T>& a) {
  T s = 0;
  for (i64 i = 0; i < a.numel(); ++i) s += a[i];
  return s;
}

template <class T>
T mean_all(const Tensor<T>& a) {
  if (a.numel() == 0) throw shape_error("mean_all: empty tensor");
  return sum_all(a) / T(a.numel());
}

template <class T>
double max_abs(const Tensor<T>& a) {
  double m = 0;
  for (i64 i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i])));
  return m;
}

// Max elementwise |a-b| scaled by the largest magnitude present in either
// tensor; the equivalence tolerances are stated against this.
template <class T>
double max_rel_err(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "max_rel_err");
  double diff = 0;
  for (i64 i = 0; i < a.numel(); ++i)
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  double denom = std::max({max_abs(a), max_abs(b), 1e-300});
  return diff / denom;
}

template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (i64 i = 0; i < a.numel(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(T)) != 0) return false;
  return true;
}

template <class T>
void check_finite(const Tensor<T>& x, const std::string& where) {
  if (!x.all_finite()) throw numeric_error("non-finite values at " + where);
}

}  // namespace cwkv

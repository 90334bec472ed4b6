#pragma once

// Weighted key-value recurrence kernels. State S is [N_v, N] per (batch,
// head); one step applies the structured transition
//
//   S_t = S_{t-1} (diag(d_t) + a_hat_t^T b_hat_t) + v_t^T k_t,   d_t = exp(w_t)
//
// i.e. per value row i: S[i,:] = S[i,:].d + (S[i,:].a_hat) b_hat + v[i] k,
// with readout y_t = S_t r_t plus an optional bonus (r_t.(p.k_t)) v_t.
//
// Three implementations of the same map:
//   wkv_recurrent    - step by step, O(T N_v N) per head; checks for NaN per
//                      step and reports the step index.
//   wkv_chunked      - block processing; materializes cumulative transition
//                      products per block and carries state across blocks.
//                      Linear in T, numerically different association.
//   wkv_naive_oracle - unrolled form with explicitly materialized transition
//                      matrix products; O(T^2 N^3) per head; test reference.

#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "crosswkv/tensor.hpp"
#include "crosswkv/rng.hpp"

namespace cwkv {

enum class Mode : std::uint8_t { auto_select = 0, recurrent = 1, chunked = 2 };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::auto_select: return "auto";
    case Mode::recurrent: return "recurrent";
    case Mode::chunked: return "chunked";
  }
  return "?";
}

// Recurrent mode is the fused fast path for short inference sequences; the
// cutoff mirrors the usual fused-kernel sequence limit.
inline constexpr i64 kRecurrentMaxT = 64;
inline constexpr i64 kDefaultChunk = 16;

// Decay pre-scale -exp(-1/2); sigmoid-bounded log decay w = kDecayScale *
// sigmoid(z) keeps the effective per-channel decay exp(w) inside
// (exp(-exp(-1/2)), 1) ~= (0.5452, 1).
inline constexpr double kDecayScale = -0.6065306597126334;

inline Mode resolve_mode(Mode requested, bool training, i64 t_len) {
  if (requested != Mode::auto_select) return requested;
  return (!training && t_len <= kRecurrentMaxT) ? Mode::recurrent : Mode::chunked;
}

template <class T>
struct WkvState {
  Tensor<T> s;  // [B, H, N_v, N]
};

// Per-step kernel inputs, already split into heads.
//   r, w, k, a_hat, b_hat : [B, T, H, N]   (w is log-space decay, entries <= 0)
//   v                     : [B, T, H, N_v]
//   s0                    : empty (zero state) or [B, H, N_v, N]
template <class T>
struct KernelInputs {
  Tensor<T> r, w, k, v, a_hat, b_hat;
  Tensor<T> s0;
};

template <class T>
struct KernelOutput {
  Tensor<T> y;      // [B, T, H, N_v]
  Tensor<T> state;  // [B, H, N_v, N]
  Mode mode_used = Mode::recurrent;
};

struct KernelDims {
  i64 b, t, h, n, nv;
};

template <class T>
inline KernelDims validate_inputs(const KernelInputs<T>& in) {
  if (in.r.rank() != 4)
    throw shape_error("wkv: r must be [B,T,H,N], got " + shape_str(in.r.shape()));
  KernelDims d{in.r.dim(0), in.r.dim(1), in.r.dim(2), in.r.dim(3), 0};
  if (in.v.rank() != 4 || in.v.dim(0) != d.b || in.v.dim(1) != d.t || in.v.dim(2) != d.h)
    throw shape_error("wkv: v shape " + shape_str(in.v.shape()) + " does not match r " +
                      shape_str(in.r.shape()));
  d.nv = in.v.dim(3);
  auto check_rn = [&](const Tensor<T>& x, const char* name) {
    if (x.shape() != in.r.shape())
      throw shape_error(std::string("wkv: ") + name + " shape " + shape_str(x.shape()) +
                        " does not match r " + shape_str(in.r.shape()));
  };
  check_rn(in.w, "w");
  check_rn(in.k, "k");
  check_rn(in.a_hat, "a_hat");
  check_rn(in.b_hat, "b_hat");
  if (!in.s0.empty() && in.s0.shape() != Shape{d.b, d.h, d.nv, d.n})
    throw shape_error("wkv: s0 shape " + shape_str(in.s0.shape()) + " must be " +
                      shape_str({d.b, d.h, d.nv, d.n}));
  for (i64 i = 0; i < in.w.numel(); ++i)
    if (in.w[i] > T(0))
      throw numeric_error("wkv: w must be log-space decay (<= 0), found " +
                          std::to_string(static_cast<double>(in.w[i])));
  return d;
}

// Bonus strength p: empty (no bonus), [H] (scalar per head) or [H, N].
template <class T>
inline void validate_bonus(const Tensor<T>& p, const KernelDims& d) {
  if (p.empty()) return;
  if (p.shape() != Shape{d.h} && p.shape() != Shape{d.h, d.n})
    throw shape_error("wkv: bonus must be empty, [H] or [H,N], got " + shape_str(p.shape()));
}

namespace detail {

template <class T>
inline T bonus_dot(const Tensor<T>& p, const T* r, const T* k, i64 h, i64 n) {
  if (p.empty()) return T(0);
  T acc = 0;
  if (p.rank() == 1) {
    for (i64 i = 0; i < n; ++i) acc += r[i] * k[i];
    return acc * p[h];
  }
  const T* ph = p.data() + h * n;
  for (i64 i = 0; i < n; ++i) acc += r[i] * ph[i] * k[i];
  return acc;
}

// Runs fn(b, h) for every (batch, head) pair, optionally across threads.
// Pairs are partitioned disjointly so results do not depend on thread count.
template <class F>
inline void for_each_bh(i64 b, i64 h, int threads, F fn) {
  i64 total = b * h;
  if (threads <= 1 || total <= 1) {
    for (i64 i = 0; i < total; ++i) fn(i / h, i % h);
    return;
  }
  i64 nthreads = std::min<i64>(threads, total);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errs(static_cast<std::size_t>(nthreads));
  for (i64 ti = 0; ti < nthreads; ++ti) {
    i64 lo = total * ti / nthreads;
    i64 hi = total * (ti + 1) / nthreads;
    pool.emplace_back([&, lo, hi, ti] {
      try {
        for (i64 i = lo; i < hi; ++i) fn(i / h, i % h);
      } catch (...) {
        errs[static_cast<std::size_t>(ti)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

// Dense transition matrix M with S_t = S_{t-1} M_t:
// M[m][n] = (m == n ? d[m] : 0) + a_hat[m] * b_hat[n].
template <class T>
Tensor<T> transition_matrix(const Tensor<T>& d, const Tensor<T>& a_hat, const Tensor<T>& b_hat) {
  if (d.rank() != 1 || d.shape() != a_hat.shape() || d.shape() != b_hat.shape())
    throw shape_error("transition_matrix: d/a_hat/b_hat must be equal-length vectors, got " +
                      shape_str(d.shape()) + ", " + shape_str(a_hat.shape()) + ", " +
                      shape_str(b_hat.shape()));
  i64 n = d.numel();
  Tensor<T> m(Shape{n, n});
  for (i64 i = 0; i < n; ++i) {
    for (i64 j = 0; j < n; ++j) m(i, j) = a_hat[i] * b_hat[j];
    m(i, i) += d[i];
  }
  return m;
}

// Step-by-step evaluation. If all_states is non-null it receives
// [B, H, T+1, N_v, N] with slot t holding the state *before* step t (slot 0 is
// s0, slot T the final state); the tape backward replays from it.
template <class T>
KernelOutput<T> wkv_recurrent(const KernelInputs<T>& in, const Tensor<T>& bonus_p = {},
                              int threads = 1, Tensor<T>* all_states = nullptr) {
  KernelDims dm = validate_inputs(in);
  validate_bonus(bonus_p, dm);
  KernelOutput<T> out;
  out.y = Tensor<T>(Shape{dm.b, dm.t, dm.h, dm.nv});
  out.state = Tensor<T>(Shape{dm.b, dm.h, dm.nv, dm.n});
  out.mode_used = Mode::recurrent;
  if (all_states) *all_states = Tensor<T>(Shape{dm.b, dm.h, dm.t + 1, dm.nv, dm.n});
  const i64 n = dm.n, nv = dm.nv;
  detail::for_each_bh(dm.b, dm.h, threads, [&](i64 b, i64 h) {
    Tensor<T> s(Shape{nv, n});
    if (!in.s0.empty())
      for (i64 i = 0; i < nv * n; ++i) s[i] = in.s0[((b * dm.h + h) * nv * n) + i];
    std::vector<T> sa(static_cast<std::size_t>(nv));
    auto in_off = [&](i64 t) { return ((b * dm.t + t) * dm.h + h) * n; };
    for (i64 t = 0; t < dm.t; ++t) {
      if (all_states) {
        T* dst = all_states->data() + (((b * dm.h + h) * (dm.t + 1) + t) * nv * n);
        for (i64 i = 0; i < nv * n; ++i) dst[i] = s[i];
      }
      const T* r = in.r.data() + in_off(t);
      const T* w = in.w.data() + in_off(t);
      const T* k = in.k.data() + in_off(t);
      const T* ah = in.a_hat.data() + in_off(t);
      const T* bh = in.b_hat.data() + in_off(t);
      const T* v = in.v.data() + ((b * dm.t + t) * dm.h + h) * nv;
      T* y = out.y.data() + ((b * dm.t + t) * dm.h + h) * nv;
      T bonus = detail::bonus_dot(bonus_p, r, k, h, n);
      bool ok = true;
      for (i64 i = 0; i < nv; ++i) {
        T* srow = s.data() + i * n;
        T acc_sa = 0;
        for (i64 j = 0; j < n; ++j) acc_sa += srow[j] * ah[j];
        sa[static_cast<std::size_t>(i)] = acc_sa;
        T acc_y = 0;
        for (i64 j = 0; j < n; ++j) {
          T sv = srow[j] * std::exp(w[j]) + acc_sa * bh[j] + v[i] * k[j];
          srow[j] = sv;
          acc_y += sv * r[j];
          ok &= std::isfinite(static_cast<double>(sv));
        }
        y[i] = acc_y + bonus * v[i];
      }
      if (!ok)
        throw numeric_error("wkv_recurrent: non-finite state at step " + std::to_string(t) +
                            " (batch " + std::to_string(b) + ", head " + std::to_string(h) + ")");
    }
    T* sout = out.state.data() + (b * dm.h + h) * nv * n;
    for (i64 i = 0; i < nv * n; ++i) sout[i] = s[i];
    if (all_states) {
      T* dst = all_states->data() + (((b * dm.h + h) * (dm.t + 1) + dm.t) * nv * n);
      for (i64 i = 0; i < nv * n; ++i) dst[i] = s[i];
    }
  });
  return out;
}

// Unrolled reference: y_t = s0 (M_0...M_t) r_t + sum_i v_i (k_i (M_{i+1}...M_t) r_t)
// plus bonus, with every transition-matrix product explicitly materialized.
template <class T>
KernelOutput<T> wkv_naive_oracle(const KernelInputs<T>& in, const Tensor<T>& bonus_p = {}) {
  KernelDims dm = validate_inputs(in);
  validate_bonus(bonus_p, dm);
  KernelOutput<T> out;
  out.y = Tensor<T>(Shape{dm.b, dm.t, dm.h, dm.nv});
  out.state = Tensor<T>(Shape{dm.b, dm.h, dm.nv, dm.n});
  out.mode_used = Mode::recurrent;
  const i64 n = dm.n, nv = dm.nv;
  for (i64 b = 0; b < dm.b; ++b) {
    for (i64 h = 0; h < dm.h; ++h) {
      auto in_off = [&](i64 t) { return ((b * dm.t + t) * dm.h + h) * n; };
      // Materialize every step's transition matrix once.
      std::vector<Tensor<T>> ms;
      ms.reserve(static_cast<std::size_t>(dm.t));
      for (i64 t = 0; t < dm.t; ++t) {
        Tensor<T> d(Shape{n}), ah(Shape{n}), bh(Shape{n});
        for (i64 j = 0; j < n; ++j) {
          d[j] = std::exp(in.w[in_off(t) + j]);
          ah[j] = in.a_hat[in_off(t) + j];
          bh[j] = in.b_hat[in_off(t) + j];
        }
        ms.push_back(transition_matrix(d, ah, bh));
      }
      Tensor<T> s0(Shape{nv, n});
      if (!in.s0.empty())
        for (i64 i = 0; i < nv * n; ++i) s0[i] = in.s0[(b * dm.h + h) * nv * n + i];
      for (i64 t = 0; t < dm.t; ++t) {
        const T* r = in.r.data() + in_off(t);
        T* y = out.y.data() + ((b * dm.t + t) * dm.h + h) * nv;
        // g = M_{i+1}...M_t, built by explicit left-multiplication while i
        // walks from t down to 0.
        Tensor<T> g(Shape{n, n});
        for (i64 i = 0; i < n; ++i) g(i, i) = T(1);
        std::vector<T> yacc(static_cast<std::size_t>(nv), T(0));
        for (i64 i = t; i >= 0; --i) {
          // c_i = k_i . (g r_t)
          T c = 0;
          for (i64 m = 0; m < n; ++m) {
            T gr = 0;
            for (i64 j = 0; j < n; ++j) gr += g(m, j) * r[j];
            c += in.k[in_off(i) + m] * gr;
          }
          const T* v = in.v.data() + ((b * dm.t + i) * dm.h + h) * nv;
          for (i64 q = 0; q < nv; ++q) yacc[static_cast<std::size_t>(q)] += c * v[q];
          g = matmul(ms[static_cast<std::size_t>(i)], g);
        }
        // After the loop g = M_0...M_t, the carry propagator for s0.
        for (i64 q = 0; q < nv; ++q) {
          T carry = 0;
          for (i64 m = 0; m < n; ++m) {
            T gr = 0;
            for (i64 j = 0; j < n; ++j) gr += g(m, j) * r[j];
            carry += s0(q, m) * gr;
          }
          const T* kt = in.k.data() + in_off(t);
          T bonus = detail::bonus_dot(bonus_p, r, kt, h, n);
          const T* vt = in.v.data() + ((b * dm.t + t) * dm.h + h) * nv;
          y[q] = yacc[static_cast<std::size_t>(q)] + carry + bonus * vt[q];
        }
      }
      // Final state via the recurrence written as explicit matrix products:
      // S_T = s0 P_{-1} + sum_i outer(v_i, k_i) P_i with P_i = M_{i+1}...M_T.
      Tensor<T> p(Shape{n, n});
      for (i64 i = 0; i < n; ++i) p(i, i) = T(1);
      Tensor<T> acc(Shape{nv, n});
      for (i64 i = dm.t - 1; i >= 0; --i) {
        const T* k = in.k.data() + in_off(i);
        const T* v = in.v.data() + ((b * dm.t + i) * dm.h + h) * nv;
        for (i64 q = 0; q < nv; ++q)
          for (i64 j = 0; j < n; ++j) {
            T kp = 0;
            for (i64 m = 0; m < n; ++m) kp += k[m] * p(m, j);
            acc(q, j) += v[q] * kp;
          }
        p = matmul(ms[static_cast<std::size_t>(i)], p);
      }
      T* sout = out.state.data() + (b * dm.h + h) * nv * n;
      for (i64 q = 0; q < nv; ++q)
        for (i64 j = 0; j < n; ++j) {
          T carry = 0;
          for (i64 m = 0; m < n; ++m) carry += s0(q, m) * p(m, j);
          sout[q * n + j] = acc(q, j) + carry;
        }
    }
  }
  return out;
}

// Block processing: per block of size c it materializes the cumulative
// transition product Q and forward-propagated key rows Ktil, emits outputs
// from (carried state, Q, Ktil), then advances the carried state with
// block-level matrix operations S <- S Q + V^T Ktil.
template <class T>
KernelOutput<T> wkv_chunked(const KernelInputs<T>& in, const Tensor<T>& bonus_p = {},
                            i64 chunk = kDefaultChunk, int threads = 1) {
  if (chunk <= 0) throw config_error("wkv_chunked: chunk size must be positive, got " +
                                     std::to_string(chunk));
  KernelDims dm = validate_inputs(in);
  validate_bonus(bonus_p, dm);
  KernelOutput<T> out;
  out.y = Tensor<T>(Shape{dm.b, dm.t, dm.h, dm.nv});
  out.state = Tensor<T>(Shape{dm.b, dm.h, dm.nv, dm.n});
  out.mode_used = Mode::chunked;
  const i64 n = dm.n, nv = dm.nv, c = std::min(chunk, std::max<i64>(dm.t, 1));
  detail::for_each_bh(dm.b, dm.h, threads, [&](i64 b, i64 h) {
    Tensor<T> s(Shape{nv, n});
    if (!in.s0.empty())
      for (i64 i = 0; i < nv * n; ++i) s[i] = in.s0[(b * dm.h + h) * nv * n + i];
    Tensor<T> q(Shape{n, n});
    Tensor<T> ktil(Shape{c, n});
    Tensor<T> d(Shape{n});
    Tensor<T> u(Shape{n});
    Tensor<T> snew(Shape{nv, n});
    auto in_off = [&](i64 t) { return ((b * dm.t + t) * dm.h + h) * n; };
    for (i64 t0 = 0; t0 < dm.t; t0 += c) {
      i64 cact = std::min(c, dm.t - t0);
      for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < n; ++j) q(i, j) = (i == j) ? T(1) : T(0);
      for (i64 j = 0; j < cact; ++j) {
        i64 t = t0 + j;
        const T* r = in.r.data() + in_off(t);
        const T* w = in.w.data() + in_off(t);
        const T* k = in.k.data() + in_off(t);
        const T* ah = in.a_hat.data() + in_off(t);
        const T* bh = in.b_hat.data() + in_off(t);
        const T* v = in.v.data() + ((b * dm.t + t) * dm.h + h) * nv;
        T* y = out.y.data() + ((b * dm.t + t) * dm.h + h) * nv;
        for (i64 m = 0; m < n; ++m) d[m] = std::exp(w[m]);
        // Advance Q and the propagated key rows by this step's transition:
        // row <- row.d + (row.a_hat) b_hat.
        auto advance_row = [&](T* row) {
          T dot = 0;
          for (i64 m = 0; m < n; ++m) dot += row[m] * ah[m];
          for (i64 m = 0; m < n; ++m) row[m] = row[m] * d[m] + dot * bh[m];
        };
        for (i64 m = 0; m < n; ++m) advance_row(q.data() + m * n);
        for (i64 p = 0; p < j; ++p) advance_row(ktil.data() + p * n);
        for (i64 m = 0; m < n; ++m) ktil(j, m) = k[m];
        // y_t = S_carry (Q r_t) + sum_{m<=j} (Ktil[m].r_t) v_m + bonus v_t.
        for (i64 m = 0; m < n; ++m) {
          T acc = 0;
          for (i64 p = 0; p < n; ++p) acc += q(m, p) * r[p];
          u[m] = acc;
        }
        T bonus = detail::bonus_dot(bonus_p, r, k, h, n);
        for (i64 i = 0; i < nv; ++i) {
          T acc = 0;
          const T* srow = s.data() + i * n;
          for (i64 m = 0; m < n; ++m) acc += srow[m] * u[m];
          y[i] = acc + bonus * v[i];
        }
        for (i64 p = 0; p <= j; ++p) {
          T score = 0;
          const T* krow = ktil.data() + p * n;
          for (i64 m = 0; m < n; ++m) score += krow[m] * r[m];
          const T* vp = in.v.data() + ((b * dm.t + t0 + p) * dm.h + h) * nv;
          for (i64 i = 0; i < nv; ++i) y[i] += score * vp[i];
        }
      }
      // Block-level state advance: S <- S Q + V^T Ktil.
      for (i64 i = 0; i < nv; ++i) {
        const T* srow = s.data() + i * n;
        T* orow = snew.data() + i * n;
        for (i64 jn = 0; jn < n; ++jn) orow[jn] = T(0);
        for (i64 m = 0; m < n; ++m) {
          T sv = srow[m];
          const T* qrow = q.data() + m * n;
          for (i64 jn = 0; jn < n; ++jn) orow[jn] += sv * qrow[jn];
        }
      }
      for (i64 p = 0; p < cact; ++p) {
        const T* vp = in.v.data() + ((b * dm.t + t0 + p) * dm.h + h) * nv;
        const T* krow = ktil.data() + p * n;
        for (i64 i = 0; i < nv; ++i) {
          T vv = vp[i];
          T* orow = snew.data() + i * n;
          for (i64 jn = 0; jn < n; ++jn) orow[jn] += vv * krow[jn];
        }
      }
      s = snew;
    }
    T* sout = out.state.data() + (b * dm.h + h) * nv * n;
    for (i64 i = 0; i < nv * n; ++i) sout[i] = s[i];
  });
  return out;
}

// Mode selection + execution. `training` only matters for auto mode.
template <class T>
KernelOutput<T> wkv_dispatch(const KernelInputs<T>& in, const Tensor<T>& bonus_p = {},
                             Mode mode = Mode::auto_select, bool training = false,
                             i64 chunk = kDefaultChunk, int threads = 1) {
  if (in.r.rank() != 4)
    throw shape_error("wkv: r must be [B,T,H,N], got " + shape_str(in.r.shape()));
  Mode m = resolve_mode(mode, training, in.r.dim(1));
  if (m == Mode::recurrent) return wkv_recurrent(in, bonus_p, threads);
  return wkv_chunked(in, bonus_p, chunk, threads);
}

// ---------------------------------------------------------------------------
// Permutation tracking demo. With d = 1, a_hat = -kk, b_hat = 2 kk and
// kk = (e_i - e_j)/sqrt(2), the transition is the Householder reflection that
// swaps coordinates i and j; with v = 0 and s0 = I the final state is exactly
// the permutation matrix of the composed transpositions.

struct SnDemoResult {
  std::vector<i64> tracked;  // sigma(m) read from the final state rows
  std::vector<i64> brute;    // sigma(m) from sequential value swaps
  double max_entry_err = 0;  // distance of state entries from exact {0,1}
  bool match = false;
  Tensor<double> state;      // final [n,n] state for entrywise comparison
};

template <class T = double>
SnDemoResult s_n_demo_run(i64 n, const std::vector<std::pair<i64, i64>>& swaps) {
  if (n <= 1) throw config_error("s_n_demo: need n >= 2");
  i64 t_len = static_cast<i64>(swaps.size());
  KernelInputs<T> in;
  i64 t_alloc = std::max<i64>(t_len, 1);
  in.r = Tensor<T>(Shape{1, t_alloc, 1, n});
  in.w = Tensor<T>(Shape{1, t_alloc, 1, n});
  in.k = Tensor<T>(Shape{1, t_alloc, 1, n});
  in.v = Tensor<T>(Shape{1, t_alloc, 1, n});
  in.a_hat = Tensor<T>(Shape{1, t_alloc, 1, n});
  in.b_hat = Tensor<T>(Shape{1, t_alloc, 1, n});
  in.s0 = Tensor<T>(Shape{1, 1, n, n});
  for (i64 i = 0; i < n; ++i) in.s0(0, 0, i, i) = T(1);
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (i64 t = 0; t < t_len; ++t) {
    auto [i, j] = swaps[static_cast<std::size_t>(t)];
    if (i < 0 || j < 0 || i >= n || j >= n || i == j)
      throw config_error("s_n_demo: invalid transposition (" + std::to_string(i) + "," +
                         std::to_string(j) + ") for n=" + std::to_string(n));
    in.a_hat(0, t, 0, i) = -inv_sqrt2;
    in.a_hat(0, t, 0, j) = inv_sqrt2;
    in.b_hat(0, t, 0, i) = T(2) * inv_sqrt2;
    in.b_hat(0, t, 0, j) = T(-2) * inv_sqrt2;
  }
  SnDemoResult res;
  Tensor<T> state;
  if (t_len == 0) {
    state = in.s0.reshaped(Shape{1, 1, n, n});
  } else {
    state = wkv_recurrent(in).state;
  }
  res.state = Tensor<double>(Shape{n, n});
  for (i64 m = 0; m < n; ++m)
    for (i64 jn = 0; jn < n; ++jn)
      res.state(m, jn) = static_cast<double>(state(0, 0, m, jn));
  res.tracked.assign(static_cast<std::size_t>(n), -1);
  for (i64 m = 0; m < n; ++m) {
    i64 arg = 0;
    double best = -1;
    for (i64 jn = 0; jn < n; ++jn) {
      double e = std::abs(static_cast<double>(state(0, 0, m, jn)));
      double err = std::min(e, std::abs(e - 1.0));
      res.max_entry_err = std::max(res.max_entry_err, err);
      if (e > best) {
        best = e;
        arg = jn;
      }
    }
    res.tracked[static_cast<std::size_t>(m)] = arg;
  }
  res.brute.resize(static_cast<std::size_t>(n));
  for (i64 m = 0; m < n; ++m) res.brute[static_cast<std::size_t>(m)] = m;
  for (auto [i, j] : swaps)
    for (auto& x : res.brute) x = (x == i) ? j : (x == j) ? i : x;
  res.match = res.tracked == res.brute;
  return res;
}

inline SnDemoResult s_n_tracking_demo(i64 n, i64 num_steps, std::uint64_t seed) {
  if (num_steps < 0) throw config_error("s_n_demo: num_steps must be >= 0");
  Rng rng(seed);
  std::vector<std::pair<i64, i64>> swaps;
  swaps.reserve(static_cast<std::size_t>(num_steps));
  for (i64 t = 0; t < num_steps; ++t) {
    i64 i = static_cast<i64>(rng.next_below(static_cast<std::uint64_t>(n)));
    i64 j = static_cast<i64>(rng.next_below(static_cast<std::uint64_t>(n - 1)));
    if (j >= i) ++j;
    swaps.emplace_back(i, j);
  }
  return s_n_demo_run<double>(n, swaps);
}

}  // namespace cwkv

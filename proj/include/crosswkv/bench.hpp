#pragma once

// Benchmark support: monotonic timing with median-of-runs, the O(T^2) masked
// softmax cross-attention baseline, CSV records with a stable schema, and a
// generator producing kernel inputs with layer-realistic statistics (decays
// from the bounded-decay formula, unit-norm removal keys).

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "crosswkv/rng.hpp"
#include "crosswkv/tensor.hpp"
#include "crosswkv/wkv.hpp"

namespace cwkv {

template <class F>
double time_median_ms(F fn, int runs = 5, int warmup = 1) {
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> samples;
  samples.reserve(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) {
    auto t0 = clock::now();
    fn();
    auto t1 = clock::now();
    samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(samples.begin(), samples.end());
  std::size_t mid = samples.size() / 2;
  if (samples.size() % 2 == 1) return samples[mid];
  return 0.5 * (samples[mid - 1] + samples[mid]);
}

struct BenchRecord {
  std::string mode;
  i64 t = 0;
  double wall_ms = 0;
  i64 state_bytes = 0;
  i64 peak_alloc_proxy = 0;
  int threads = 1;
  std::string dtype;
};

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 6);
  return std::string(buf, res.ptr);
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRecord>& records) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open " + path + " for writing");
  out << "mode,T,wall_ms,state_bytes,peak_alloc_proxy,threads,dtype\n";
  for (const auto& r : records)
    out << r.mode << ',' << r.t << ',' << format_double(r.wall_ms) << ',' << r.state_bytes << ','
        << r.peak_alloc_proxy << ',' << r.threads << ',' << r.dtype << '\n';
  if (!out) throw io_error("failed writing " + path);
}

// Causal masked softmax cross-attention with the same head layout as the WKV
// kernel: y_t = sum_{i<=t} softmax(r_t.k_i / sqrt(N)) v_i. Quadratic in T by
// construction; the scaling benchmark contrasts it with the kernel.
template <class T>
Tensor<T> softmax_attention_baseline(const Tensor<T>& r, const Tensor<T>& k, const Tensor<T>& v) {
  if (r.rank() != 4 || k.shape() != r.shape() || v.rank() != 4)
    throw shape_error("softmax_attention_baseline: bad shapes " + shape_str(r.shape()) + ", " +
                      shape_str(k.shape()) + ", " + shape_str(v.shape()));
  i64 b = r.dim(0), tt = r.dim(1), h = r.dim(2), n = r.dim(3), nv = v.dim(3);
  Tensor<T> y(Shape{b, tt, h, nv});
  std::vector<T> scores;
  T inv_sqrt_n = T(1) / std::sqrt(T(n));
  for (i64 bi = 0; bi < b; ++bi)
    for (i64 hi = 0; hi < h; ++hi)
      for (i64 t = 0; t < tt; ++t) {
        scores.assign(static_cast<std::size_t>(t) + 1, T(0));
        const T* rt = r.data() + ((bi * tt + t) * h + hi) * n;
        T maxs = -std::numeric_limits<T>::infinity();
        for (i64 i = 0; i <= t; ++i) {
          const T* ki = k.data() + ((bi * tt + i) * h + hi) * n;
          T s = 0;
          for (i64 j = 0; j < n; ++j) s += rt[j] * ki[j];
          s *= inv_sqrt_n;
          scores[static_cast<std::size_t>(i)] = s;
          maxs = std::max(maxs, s);
        }
        T z = 0;
        for (i64 i = 0; i <= t; ++i) {
          T e = std::exp(scores[static_cast<std::size_t>(i)] - maxs);
          scores[static_cast<std::size_t>(i)] = e;
          z += e;
        }
        T* yt = y.data() + ((bi * tt + t) * h + hi) * nv;
        for (i64 i = 0; i <= t; ++i) {
          T wgt = scores[static_cast<std::size_t>(i)] / z;
          const T* vi = v.data() + ((bi * tt + i) * h + hi) * nv;
          for (i64 j = 0; j < nv; ++j) yt[j] += wgt * vi[j];
        }
      }
  return y;
}

// Kernel inputs with the statistics the layer produces: decay from the
// bounded formula (exp(w) in (0.545, 1)), a_hat = -kk with unit-norm kk,
// b_hat = kk * a for a in (0, 1).
template <class T>
KernelInputs<T> random_kernel_inputs(i64 b, i64 t, i64 h, i64 n, i64 nv, Rng& rng,
                                     bool with_state = true) {
  KernelInputs<T> in;
  in.r = Tensor<T>(Shape{b, t, h, n});
  in.w = Tensor<T>(Shape{b, t, h, n});
  in.k = Tensor<T>(Shape{b, t, h, n});
  in.v = Tensor<T>(Shape{b, t, h, nv});
  in.a_hat = Tensor<T>(Shape{b, t, h, n});
  in.b_hat = Tensor<T>(Shape{b, t, h, n});
  double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(n));
  rng.fill_normal(in.r, 0.0, inv_sqrt_n * 2.0);
  rng.fill_normal(in.k, 0.0, inv_sqrt_n);
  rng.fill_normal(in.v, 0.0, 1.0);
  for (i64 i = 0; i < in.w.numel(); ++i) {
    double z = rng.normal() * 2.0;
    in.w[i] = static_cast<T>(kDecayScale / (1.0 + std::exp(-z)));
  }
  Tensor<T> kk(Shape{b, t, h, n});
  rng.fill_normal(kk, 0.0, 1.0);
  kk = l2_normalize_last(kk, static_cast<T>(1e-12));
  for (i64 i = 0; i < kk.numel(); ++i) {
    double a = 1.0 / (1.0 + std::exp(-rng.normal()));
    in.a_hat[i] = -kk[i];
    in.b_hat[i] = kk[i] * static_cast<T>(a);
  }
  if (with_state) {
    in.s0 = Tensor<T>(Shape{b, h, nv, n});
    rng.fill_normal(in.s0, 0.0, 0.5);
  }
  return in;
}

template <class T>
i64 state_bytes_of(const KernelOutput<T>& out) {
  return out.state.numel() * static_cast<i64>(sizeof(T));
}

}  // namespace cwkv

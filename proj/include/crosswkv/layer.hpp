#pragma once

// Cross-attention layer around the WKV kernel. One token stream x feeds keys,
// values, decay, in-context learning rate and gate; a second (usually shorter)
// stream q feeds receptance only, zero-padded to the x length. The forward
// pass is written once, generic over an execution context: EagerCtx computes
// plain tensors (inference, benchmarks, sampling), TapeCtx records the same
// arithmetic on an autodiff tape (training, gradient checks).

#include <cmath>
#include <functional>
#include <string>

#include "crosswkv/autodiff.hpp"
#include "crosswkv/rng.hpp"
#include "crosswkv/tensor.hpp"
#include "crosswkv/wkv.hpp"

namespace cwkv {

// Xavier gain 2^(-2.5) used for every projection and low-rank factor.
inline const double kInitGain = std::exp2(-2.5);

// Uniform access to the concrete tensor behind a context value.
template <class T>
const Tensor<T>& value_of(const Tensor<T>& t) {
  return t;
}
template <class T>
const Tensor<T>& value_of(const Var<T>& v) {
  return v.val();
}

struct LayerConfig {
  i64 d = 1024;    // x width; key head dim is d / h
  i64 d_q = 1024;  // q width
  i64 d_v = 1024;  // value width; value head dim is d_v / h
  i64 h = 16;      // heads
  i64 rank_w = 64, rank_a = 64, rank_v = 16, rank_g = 128;
  bool is_first_layer = true;
  bool gn_affine = true;
  bool check_finite = true;
  Mode mode = Mode::auto_select;
  i64 chunk = kDefaultChunk;

  i64 n() const { return d / h; }
  i64 n_v() const { return d_v / h; }
  double eps_gn() const { return static_cast<double>(n()) * 1e-5; }

  void validate() const {
    if (d <= 0 || d_q <= 0 || d_v <= 0 || h <= 0)
      throw config_error("layer config: dimensions must be positive");
    if (d % h != 0 || d_v % h != 0)
      throw config_error("layer config: d=" + std::to_string(d) + " and d_v=" +
                         std::to_string(d_v) + " must be divisible by h=" + std::to_string(h));
    auto check_rank = [](const char* name, i64 r, i64 din, i64 dout) {
      if (r <= 0 || r > std::min(din, dout))
        throw config_error(std::string("layer config: ") + name + " rank " + std::to_string(r) +
                           " outside [1, min(" + std::to_string(din) + "," +
                           std::to_string(dout) + ")]");
    };
    check_rank("lora_w", rank_w, d, d);
    check_rank("lora_a", rank_a, d, d);
    check_rank("lora_v", rank_v, d, d_v);
    check_rank("lora_g", rank_g, d, d_v);
    if (chunk <= 0) throw config_error("layer config: chunk must be positive");
  }
};

template <class T>
struct LoRAParams {
  Tensor<T> down;  // [D_in, rank]
  Tensor<T> up;    // [rank, D_out]
  Tensor<T> bias;  // [D_out]
};

template <class T>
struct CrossWKVParams {
  Tensor<T> mix_w, mix_k, mix_v, mix_a, mix_g;  // [D]
  Tensor<T> w_r;                                // [D_q, D]
  Tensor<T> w_k;                                // [D, D]
  Tensor<T> w_v;                                // [D, D_v]
  Tensor<T> w_o;                                // [D_v, D]
  LoRAParams<T> lora_w;                         // D -> D
  LoRAParams<T> lora_a;                         // D -> D
  LoRAParams<T> lora_v;                         // D -> D_v
  LoRAParams<T> lora_g;                         // D -> D_v
  Tensor<T> k_k, k_a, r_k;                      // [D]
  Tensor<T> gn_gamma, gn_beta;                  // [D_v]
};

// Single enumeration order shared by init, checkpoints, the optimizer and the
// gradient checker.
template <class T, class F>
void for_each_param(CrossWKVParams<T>& p, F fn) {
  fn("mix_w", p.mix_w);
  fn("mix_k", p.mix_k);
  fn("mix_v", p.mix_v);
  fn("mix_a", p.mix_a);
  fn("mix_g", p.mix_g);
  fn("w_r", p.w_r);
  fn("w_k", p.w_k);
  fn("w_v", p.w_v);
  fn("w_o", p.w_o);
  fn("lora_w.down", p.lora_w.down);
  fn("lora_w.up", p.lora_w.up);
  fn("lora_w.bias", p.lora_w.bias);
  fn("lora_a.down", p.lora_a.down);
  fn("lora_a.up", p.lora_a.up);
  fn("lora_a.bias", p.lora_a.bias);
  fn("lora_v.down", p.lora_v.down);
  fn("lora_v.up", p.lora_v.up);
  fn("lora_v.bias", p.lora_v.bias);
  fn("lora_g.down", p.lora_g.down);
  fn("lora_g.up", p.lora_g.up);
  fn("lora_g.bias", p.lora_g.bias);
  fn("k_k", p.k_k);
  fn("k_a", p.k_a);
  fn("r_k", p.r_k);
  fn("gn_gamma", p.gn_gamma);
  fn("gn_beta", p.gn_beta);
}

template <class T, class F>
void for_each_param(const CrossWKVParams<T>& p, F fn) {
  for_each_param(const_cast<CrossWKVParams<T>&>(p),
                 [&](const char* name, Tensor<T>& t) { fn(name, static_cast<const Tensor<T>&>(t)); });
}

// Projections and low-rank factors: Xavier uniform with gain 2^(-2.5).
// Mix vectors, r_k, biases and gn_beta start at zero; k_k, k_a and gn_gamma at
// one. With zero LoRA bias the decay starts at kDecayScale * sigmoid(~0), an
// effective decay of ~0.74 per step.
template <class T>
CrossWKVParams<T> init_params(const LayerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  CrossWKVParams<T> p;
  p.mix_w = Tensor<T>(Shape{cfg.d});
  p.mix_k = Tensor<T>(Shape{cfg.d});
  p.mix_v = Tensor<T>(Shape{cfg.d});
  p.mix_a = Tensor<T>(Shape{cfg.d});
  p.mix_g = Tensor<T>(Shape{cfg.d});
  p.w_r = xavier_uniform<T>(cfg.d_q, cfg.d, kInitGain, rng);
  p.w_k = xavier_uniform<T>(cfg.d, cfg.d, kInitGain, rng);
  p.w_v = xavier_uniform<T>(cfg.d, cfg.d_v, kInitGain, rng);
  p.w_o = xavier_uniform<T>(cfg.d_v, cfg.d, kInitGain, rng);
  auto init_lora = [&](LoRAParams<T>& l, i64 din, i64 rank, i64 dout) {
    l.down = xavier_uniform<T>(din, rank, kInitGain, rng);
    l.up = xavier_uniform<T>(rank, dout, kInitGain, rng);
    l.bias = Tensor<T>(Shape{dout});
  };
  init_lora(p.lora_w, cfg.d, cfg.rank_w, cfg.d);
  init_lora(p.lora_a, cfg.d, cfg.rank_a, cfg.d);
  init_lora(p.lora_v, cfg.d, cfg.rank_v, cfg.d_v);
  init_lora(p.lora_g, cfg.d, cfg.rank_g, cfg.d_v);
  p.k_k = Tensor<T>::full(Shape{cfg.d}, T(1));
  p.k_a = Tensor<T>::full(Shape{cfg.d}, T(1));
  p.r_k = Tensor<T>(Shape{cfg.d});
  p.gn_gamma = Tensor<T>::full(Shape{cfg.d_v}, T(1));
  p.gn_beta = Tensor<T>(Shape{cfg.d_v});
  return p;
}

// Expected shape for each named parameter under a config.
inline Shape param_shape(const LayerConfig& cfg, const std::string& name) {
  auto lora_shape = [&](i64 rank, i64 dout, const std::string& part) -> Shape {
    if (part == "down") return {cfg.d, rank};
    if (part == "up") return {rank, dout};
    return {dout};
  };
  if (name.rfind("mix_", 0) == 0 || name == "k_k" || name == "k_a" || name == "r_k")
    return {cfg.d};
  if (name == "w_r") return {cfg.d_q, cfg.d};
  if (name == "w_k") return {cfg.d, cfg.d};
  if (name == "w_v") return {cfg.d, cfg.d_v};
  if (name == "w_o") return {cfg.d_v, cfg.d};
  if (name == "gn_gamma" || name == "gn_beta") return {cfg.d_v};
  auto dot = name.find('.');
  if (dot != std::string::npos && name.rfind("lora_", 0) == 0) {
    std::string part = name.substr(dot + 1);
    switch (name[5]) {
      case 'w': return lora_shape(cfg.rank_w, cfg.d, part);
      case 'a': return lora_shape(cfg.rank_a, cfg.d, part);
      case 'v': return lora_shape(cfg.rank_v, cfg.d_v, part);
      case 'g': return lora_shape(cfg.rank_g, cfg.d_v, part);
    }
  }
  throw config_error("layer params: unknown parameter '" + name + "'");
}

template <class T>
void validate_params(const LayerConfig& cfg, const CrossWKVParams<T>& p) {
  cfg.validate();
  for_each_param(p, [&](const char* name, const Tensor<T>& t) {
    Shape want = param_shape(cfg, name);
    if (t.shape() != want)
      throw shape_error(std::string("layer params: ") + name + " has shape " +
                        shape_str(t.shape()) + ", expected " + shape_str(want));
  });
}

// Parameter handles in context-value form (Tensor for eager, Var for taped).
template <class V>
struct LayerParamRefs {
  V mix_w, mix_k, mix_v, mix_a, mix_g;
  V w_r, w_k, w_v, w_o;
  V lw_down, lw_up, lw_bias;
  V la_down, la_up, la_bias;
  V lv_down, lv_up, lv_bias;
  V lg_down, lg_up, lg_bias;
  V k_k, k_a, r_k, gn_gamma, gn_beta;
};

// Mirrors for_each_param's order.
template <class V, class F>
void for_each_ref(LayerParamRefs<V>& r, F fn) {
  fn("mix_w", r.mix_w);
  fn("mix_k", r.mix_k);
  fn("mix_v", r.mix_v);
  fn("mix_a", r.mix_a);
  fn("mix_g", r.mix_g);
  fn("w_r", r.w_r);
  fn("w_k", r.w_k);
  fn("w_v", r.w_v);
  fn("w_o", r.w_o);
  fn("lora_w.down", r.lw_down);
  fn("lora_w.up", r.lw_up);
  fn("lora_w.bias", r.lw_bias);
  fn("lora_a.down", r.la_down);
  fn("lora_a.up", r.la_up);
  fn("lora_a.bias", r.la_bias);
  fn("lora_v.down", r.lv_down);
  fn("lora_v.up", r.lv_up);
  fn("lora_v.bias", r.lv_bias);
  fn("lora_g.down", r.lg_down);
  fn("lora_g.up", r.lg_up);
  fn("lora_g.bias", r.lg_bias);
  fn("k_k", r.k_k);
  fn("k_a", r.k_a);
  fn("r_k", r.r_k);
  fn("gn_gamma", r.gn_gamma);
  fn("gn_beta", r.gn_beta);
}

// ---------------------------------------------------------------------------
// Execution contexts.

template <class T>
struct EagerCtx {
  using Scalar = T;
  using V = Tensor<T>;
  bool training = false;
  int threads = 1;

  V add(const V& a, const V& b) { return cwkv::add(a, b); }
  V sub(const V& a, const V& b) { return cwkv::sub(a, b); }
  V mul(const V& a, const V& b) { return cwkv::mul(a, b); }
  V scale(const V& a, T c) { return cwkv::scale(a, c); }
  V add_scalar(const V& a, T c) { return cwkv::add_scalar(a, c); }
  V sigmoid(const V& a) { return cwkv::sigmoid(a); }
  V mul_channel(const V& x, const V& v) { return cwkv::mul_channel(x, v); }
  V add_channel(const V& x, const V& v) { return cwkv::add_channel(x, v); }
  V lerp(const V& a, const V& b, const V& t) { return cwkv::lerp(a, b, t); }
  V matmul(const V& x, const V& w) { return cwkv::matmul(x, w); }
  V reshape(const V& x, Shape s) { return x.reshaped(std::move(s)); }
  V time_shift(const V& x) { return cwkv::time_shift(x); }
  V pad_seq(const V& x, i64 t) { return cwkv::pad_seq(x, t); }
  V l2_normalize_last(const V& x, T eps) { return cwkv::l2_normalize_last(x, eps); }
  V sum_heads(const V& x, i64 h) { return cwkv::sum_heads(x, h); }
  V scale_heads(const V& v, const V& s) { return cwkv::scale_heads(v, s); }
  V add_seq_table(const V& x, const V& e) { return cwkv::add_seq_table(x, e); }
  V add_batch_vec(const V& x, const V& u) { return cwkv::add_batch_vec(x, u); }
  V group_norm(const V& x, i64 groups, T eps, const V& gamma, const V& beta) {
    return cwkv::group_norm(x, groups, eps, &gamma, &beta);
  }
  V group_norm_plain(const V& x, i64 groups, T eps) {
    return cwkv::group_norm<T>(x, groups, eps, nullptr, nullptr);
  }
  V zeros(Shape s) { return Tensor<T>(std::move(s)); }

  std::pair<V, V> wkv(const V& r, const V& w, const V& k, const V& v, const V& ah, const V& bh,
                      const V& s0, const LayerConfig& cfg) {
    KernelInputs<T> in;
    in.r = r;
    in.w = w;
    in.k = k;
    in.v = v;
    in.a_hat = ah;
    in.b_hat = bh;
    in.s0 = s0;
    KernelOutput<T> out = wkv_dispatch(in, Tensor<T>{}, cfg.mode, training, cfg.chunk, threads);
    return {std::move(out.y), std::move(out.state)};
  }

  void check(const V& x, const char* stage, bool enabled) {
    if (enabled) check_finite(x, std::string("layer stage '") + stage + "'");
  }
};

template <class T>
struct TapeCtx {
  using Scalar = T;
  using V = Var<T>;
  Tape<T>* tape;

  explicit TapeCtx(Tape<T>& t) : tape(&t) {}

  V add(V a, V b) { return cwkv::add(a, b); }
  V sub(V a, V b) { return cwkv::sub(a, b); }
  V mul(V a, V b) { return cwkv::mul(a, b); }
  V scale(V a, T c) { return cwkv::scale(a, c); }
  V add_scalar(V a, T c) { return cwkv::add_scalar(a, c); }
  V sigmoid(V a) { return cwkv::sigmoid(a); }
  V mul_channel(V x, V v) { return cwkv::mul_channel(x, v); }
  V add_channel(V x, V v) { return cwkv::add_channel(x, v); }
  V lerp(V a, V b, V t) { return cwkv::lerp(a, b, t); }
  V matmul(V x, V w) { return cwkv::matmul(x, w); }
  V reshape(V x, Shape s) { return cwkv::reshape(x, std::move(s)); }
  V time_shift(V x) { return cwkv::time_shift(x); }
  V pad_seq(V x, i64 t) { return cwkv::pad_seq(x, t); }
  V l2_normalize_last(V x, T eps) { return cwkv::l2_normalize_last(x, eps); }
  V sum_heads(V x, i64 h) { return cwkv::sum_heads(x, h); }
  V scale_heads(V v, V s) { return cwkv::scale_heads(v, s); }
  V add_seq_table(V x, V e) { return cwkv::add_seq_table(x, e); }
  V add_batch_vec(V x, V u) { return cwkv::add_batch_vec(x, u); }
  V group_norm(V x, i64 groups, T eps, V gamma, V beta) {
    return cwkv::group_norm(x, groups, eps, gamma, beta);
  }
  V group_norm_plain(V x, i64 groups, T eps) {
    Tensor<T> c = x.val();
    V gamma = tape->constant(Tensor<T>::full(Shape{c.dim(c.rank() - 1)}, T(1)));
    V beta = tape->constant(Tensor<T>(Shape{c.dim(c.rank() - 1)}));
    return cwkv::group_norm(x, groups, eps, gamma, beta);
  }
  V zeros(Shape s) { return tape->constant(Tensor<T>(std::move(s))); }

  // The tape path always differentiates through the stepped recurrence; the
  // chunked/recurrent switch is an inference-speed concern only.
  std::pair<V, V> wkv(V r, V w, V k, V v, V ah, V bh, V s0, const LayerConfig&) {
    std::shared_ptr<WkvSeqSaved<T>> saved;
    V y = wkv_seq(r, w, k, v, ah, bh, s0, &saved);
    V tail = wkv_state_tail(y, saved);
    return {y, tail};
  }

  void check(V x, const char* stage, bool enabled) {
    if (enabled) check_finite(x.val(), std::string("layer stage '") + stage + "'");
  }
};

template <class T>
LayerParamRefs<Tensor<T>> eager_param_refs(const CrossWKVParams<T>& p) {
  LayerParamRefs<Tensor<T>> r;
  auto src = [&](const char* name) -> const Tensor<T>* {
    const Tensor<T>* found = nullptr;
    for_each_param(p, [&](const char* n, const Tensor<T>& t) {
      if (std::string(n) == name) found = &t;
    });
    return found;
  };
  for_each_ref(r, [&](const char* name, Tensor<T>& slot) { slot = *src(name); });
  return r;
}

// Registers every parameter as a trainable leaf on the tape, in enumeration
// order; fn (if given) observes (name, Var) for grad bookkeeping.
template <class T>
LayerParamRefs<Var<T>> tape_param_leaves(
    Tape<T>& tape, const CrossWKVParams<T>& p,
    const std::function<void(const char*, Var<T>)>& fn = {}) {
  LayerParamRefs<Var<T>> r;
  std::size_t idx = 0;
  std::vector<const Tensor<T>*> tensors;
  for_each_param(p, [&](const char*, const Tensor<T>& t) { tensors.push_back(&t); });
  for_each_ref(r, [&](const char* name, Var<T>& slot) {
    slot = tape.leaf(*tensors[idx++]);
    if (fn) fn(name, slot);
  });
  return r;
}

// ---------------------------------------------------------------------------
// The layer forward.

template <class V>
struct LayerOut {
  V o;      // [B, T, D]
  V v_out;  // [B, T, D_v]; first layer emits its raw values for later layers
  V state;  // [B, H, N_v, N]
};

// x: [B, T, D] key/value/decay/gate stream; q: [B, L, D_q] receptance stream
// with L <= T (zero-padded); v_first: first layer's values (required when
// cfg.is_first_layer is false); s0: [B, H, N_v, N] carried kernel state.
template <class Ctx, class V = typename Ctx::V>
LayerOut<V> crosswkv_forward(Ctx& cx, const LayerConfig& cfg, const LayerParamRefs<V>& p, V x, V q,
                             const V* v_first, const V* s0 = nullptr) {
  using T = typename Ctx::Scalar;
  cfg.validate();
  const bool fin = cfg.check_finite;
  const i64 t_len = value_of(x).dim(1);
  const i64 b = value_of(x).dim(0);
  if (value_of(x).rank() != 3 || value_of(x).dim(2) != cfg.d)
    throw shape_error("layer: x must be [B,T," + std::to_string(cfg.d) + "], got " +
                      shape_str(value_of(x).shape()));
  if (value_of(q).rank() != 3 || value_of(q).dim(2) != cfg.d_q ||
      value_of(q).dim(0) != b)
    throw shape_error("layer: q must be [B,L," + std::to_string(cfg.d_q) + "], got " +
                      shape_str(value_of(q).shape()));
  if (!cfg.is_first_layer && v_first == nullptr)
    throw config_error("layer: v_first required when is_first_layer is false");
  cx.check(x, "input", fin);

  // Mix each stream toward its shifted neighbor.
  V delta = cx.sub(cx.time_shift(x), x);
  V xw = cx.add(x, cx.mul_channel(delta, p.mix_w));
  V xk = cx.add(x, cx.mul_channel(delta, p.mix_k));
  V xv = cx.add(x, cx.mul_channel(delta, p.mix_v));
  V xa = cx.add(x, cx.mul_channel(delta, p.mix_a));
  V xg = cx.add(x, cx.mul_channel(delta, p.mix_g));
  cx.check(xw, "stream mixing", fin);

  // Projections; the conditioning stream is zero-padded to the x length, so
  // positions past its end read with zero receptance.
  V r = cx.matmul(cx.pad_seq(q, t_len), p.w_r);
  V k = cx.matmul(xk, p.w_k);
  V v = cx.matmul(xv, p.w_v);
  cx.check(r, "projections", fin);

  auto lora = [&](V in, const V& down, const V& up, const V& bias) {
    return cx.add_channel(cx.matmul(cx.matmul(in, down), up), bias);
  };

  // Bounded log-space decay.
  V w = cx.scale(cx.sigmoid(lora(xw, p.lw_down, p.lw_up, p.lw_bias)), T(kDecayScale));
  cx.check(w, "decay", fin);

  // In-context learning rate and gate (gate has no activation).
  V a = cx.sigmoid(lora(xa, p.la_down, p.la_up, p.la_bias));
  V g = lora(xg, p.lg_down, p.lg_up, p.lg_bias);

  // Later layers blend their values toward the first layer's.
  V v_out = v;
  if (!cfg.is_first_layer) {
    V blend = cx.sigmoid(lora(xv, p.lv_down, p.lv_up, p.lv_bias));
    v = cx.lerp(v, *v_first, blend);
    v_out = v;
  }
  cx.check(v, "value blend", fin);

  // Unit-norm removal key per head, and the learned key adjustment.
  V kk = cx.reshape(
      cx.l2_normalize_last(cx.reshape(cx.mul_channel(k, p.k_k), Shape{b, t_len, cfg.h, cfg.n()}),
                           T(1e-12)),
      Shape{b, t_len, cfg.d});
  V k2 = cx.add(k, cx.mul_channel(cx.mul(k, cx.add_scalar(a, T(-1))), p.k_a));
  cx.check(k2, "key adjustment", fin);

  // Kernel dispatch on head-split tensors.
  V s0_v = s0 ? *s0 : cx.zeros(Shape{b, cfg.h, cfg.n_v(), cfg.n()});
  auto split = [&](V z, i64 width) { return cx.reshape(z, Shape{b, t_len, cfg.h, width}); };
  auto [y4, state] = cx.wkv(split(r, cfg.n()), split(w, cfg.n()), split(k2, cfg.n()),
                            split(v, cfg.n_v()), split(cx.scale(kk, T(-1)), cfg.n()),
                            split(cx.mul(kk, a), cfg.n()), s0_v, cfg);
  V y = cx.reshape(y4, Shape{b, t_len, cfg.d_v});
  cx.check(y, "kernel", fin);

  // Per-head normalization plus the direct read bonus.
  V gn = cfg.gn_affine ? cx.group_norm(y, cfg.h, T(cfg.eps_gn()), p.gn_gamma, p.gn_beta)
                       : cx.group_norm_plain(y, cfg.h, T(cfg.eps_gn()));
  V rk = cx.sum_heads(cx.mul_channel(cx.mul(r, k2), p.r_k), cfg.h);
  V o = cx.add(gn, cx.scale_heads(v, rk));
  cx.check(o, "normalization", fin);

  // Gate and project out.
  V out = cx.matmul(cx.mul(o, g), p.w_o);
  cx.check(out, "output projection", fin);
  return LayerOut<V>{out, v_out, state};
}

template <class T>
Tensor<T> make_zero_state(const LayerConfig& cfg, i64 batch) {
  return Tensor<T>(Shape{batch, cfg.h, cfg.n_v(), cfg.n()});
}

// Eager single-call convenience: plain tensors in, plain tensors out.
template <class T>
LayerOut<Tensor<T>> crosswkv_apply(const LayerConfig& cfg, const CrossWKVParams<T>& params,
                                   const Tensor<T>& x, const Tensor<T>& q,
                                   const Tensor<T>* v_first = nullptr,
                                   const Tensor<T>* s0 = nullptr, int threads = 1) {
  validate_params(cfg, params);
  EagerCtx<T> cx;
  cx.threads = threads;
  LayerParamRefs<Tensor<T>> refs = eager_param_refs(params);
  return crosswkv_forward(cx, cfg, refs, x, q, v_first, s0);
}

}  // namespace cwkv

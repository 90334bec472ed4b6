#pragma once

// Desk-scale conditional denoising-diffusion trainer and sampler. A two-layer
// cross-attention denoiser learns to predict the noise added to 8x8 synthetic
// glyphs, conditioned on a class token stream; ancestral sampling runs over a
// strided sub-schedule.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "crosswkv/autodiff.hpp"
#include "crosswkv/checkpoint.hpp"
#include "crosswkv/layer.hpp"
#include "crosswkv/rng.hpp"
#include "crosswkv/tensor.hpp"

namespace cwkv {

// ---------------------------------------------------------------------------
// Noise schedule.

struct NoiseSchedule {
  i64 t_steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas_cumprod;

  static NoiseSchedule linear(double beta_start, double beta_end, i64 steps) {
    if (steps < 2 || beta_start <= 0 || beta_end >= 1 || beta_start > beta_end)
      throw config_error("noise schedule: need 0 < beta_start <= beta_end < 1 and steps >= 2");
    NoiseSchedule s;
    s.t_steps = steps;
    s.betas.resize(steps);
    s.alphas_cumprod.resize(steps);
    double prod = 1.0;
    for (i64 t = 0; t < steps; ++t) {
      s.betas[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                    static_cast<double>(steps - 1);
      prod *= 1.0 - s.betas[t];
      s.alphas_cumprod[t] = prod;
    }
    return s;
  }

  double alpha_bar(i64 t) const {
    if (t < 0 || t >= t_steps)
      throw config_error("noise schedule: t=" + std::to_string(t) + " outside [0," +
                         std::to_string(t_steps) + ")");
    return alphas_cumprod[t];
  }
};

// The stock schedule: compressed linear betas so that 200 steps end in
// near-pure noise (final cumulative alpha ~ 4e-5).
inline NoiseSchedule default_schedule() { return NoiseSchedule::linear(5e-4, 0.1, 200); }

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, with a per-sample timestep.
template <class T>
Tensor<T> q_sample(const NoiseSchedule& s, const Tensor<T>& x0, const std::vector<i64>& t,
                   const Tensor<T>& noise) {
  if (x0.shape() != noise.shape())
    throw shape_error("q_sample: x0 " + shape_str(x0.shape()) + " vs noise " +
                      shape_str(noise.shape()));
  if (x0.rank() != 3 || static_cast<std::size_t>(x0.dim(0)) != t.size())
    throw shape_error("q_sample: x0 must be [B,T,C] with one timestep per sample");
  Tensor<T> out(x0.shape());
  i64 per = x0.numel() / x0.dim(0);
  for (i64 b = 0; b < x0.dim(0); ++b) {
    double ab = s.alpha_bar(t[static_cast<std::size_t>(b)]);
    T c0 = static_cast<T>(std::sqrt(ab)), c1 = static_cast<T>(std::sqrt(1.0 - ab));
    for (i64 i = 0; i < per; ++i)
      out[b * per + i] = c0 * x0[b * per + i] + c1 * noise[b * per + i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Glyph dataset: four 8x8 classes in [-1,1], flattened to 64-token sequences.

inline constexpr i64 kGlyphSide = 8;
inline constexpr i64 kGlyphLen = kGlyphSide * kGlyphSide;
inline constexpr int kGlyphClasses = 4;

template <class T>
Tensor<T> glyph_template(int cls) {
  Tensor<T> g(Shape{kGlyphLen, 1});
  for (i64 r = 0; r < kGlyphSide; ++r) {
    for (i64 c = 0; c < kGlyphSide; ++c) {
      bool on = false;
      switch (cls) {
        case 0: on = r == 3 || r == 4; break;                      // bar
        case 1: on = r == 3 || r == 4 || c == 3 || c == 4; break;  // cross
        case 2: {                                                  // disk
          double dr = static_cast<double>(r) - 3.5, dc = static_cast<double>(c) - 3.5;
          on = dr * dr + dc * dc <= 8.0;
          break;
        }
        case 3: on = ((r / 2) + (c / 2)) % 2 == 0; break;  // checker
        default: throw config_error("glyph class must be in [0,4)");
      }
      g[r * kGlyphSide + c] = on ? T(1) : T(-1);
    }
  }
  return g;
}

template <class T>
void make_glyph_batch(i64 batch, Rng& rng, Tensor<T>& x0, std::vector<int>& labels) {
  x0 = Tensor<T>(Shape{batch, kGlyphLen, 1});
  labels.resize(static_cast<std::size_t>(batch));
  for (i64 b = 0; b < batch; ++b) {
    int cls = static_cast<int>(rng.next_below(kGlyphClasses));
    labels[static_cast<std::size_t>(b)] = cls;
    Tensor<T> g = glyph_template<T>(cls);
    for (i64 i = 0; i < kGlyphLen; ++i) {
      double v = static_cast<double>(g[i]) + rng.uniform(-0.15, 0.15);
      x0[b * kGlyphLen + i] = static_cast<T>(std::clamp(v, -1.0, 1.0));
    }
  }
}

template <class T>
int nearest_centroid(const Tensor<T>& img) {
  if (img.numel() != kGlyphLen) throw shape_error("nearest_centroid: expected 64 pixels");
  int best = -1;
  double best_d = 0;
  for (int cls = 0; cls < kGlyphClasses; ++cls) {
    Tensor<T> g = glyph_template<T>(cls);
    double d = 0;
    for (i64 i = 0; i < kGlyphLen; ++i) {
      double diff = static_cast<double>(img[i]) - static_cast<double>(g[i]);
      d += diff * diff;
    }
    if (best < 0 || d < best_d) {
      best = cls;
      best_d = d;
    }
  }
  return best;
}

// Conditioning stream: row 0 is a reserved BOS one-hot, every later row the
// class one-hot, repeated so conditioning reaches every output position.
// Label -1 gives an all-zero (unconditional) stream.
template <class T>
Tensor<T> class_cond(const std::vector<int>& labels, i64 t_len, i64 d_q) {
  if (d_q < 1 + kGlyphClasses)
    throw config_error("class_cond: d_q must fit BOS plus " + std::to_string(kGlyphClasses) +
                       " classes");
  Tensor<T> cond(Shape{static_cast<i64>(labels.size()), t_len, d_q});
  for (std::size_t b = 0; b < labels.size(); ++b) {
    int cls = labels[b];
    if (cls < -1 || cls >= kGlyphClasses)
      throw config_error("class_cond: label " + std::to_string(cls) + " outside [-1," +
                         std::to_string(kGlyphClasses) + ")");
    if (cls < 0) continue;
    cond(static_cast<i64>(b), 0, 0) = T(1);
    for (i64 t = 1; t < t_len; ++t) cond(static_cast<i64>(b), t, 1 + cls) = T(1);
  }
  return cond;
}

// ---------------------------------------------------------------------------
// Toy denoiser: input projection + positional table + timestep features, two
// cross-attention layers in residual, zero-initialized output head.

inline constexpr i64 kToyTimeFeat = 16;

struct ToyConfig {
  i64 d = 32, h = 2, d_q = 8, d_v = 32, channels = 1;
  i64 t_len = kGlyphLen;

  LayerConfig layer_cfg(bool first) const {
    LayerConfig c;
    c.d = d;
    c.d_q = d_q;
    c.d_v = d_v;
    c.h = h;
    c.rank_w = 16;
    c.rank_a = 16;
    c.rank_v = 8;
    c.rank_g = 16;
    c.is_first_layer = first;
    c.mode = Mode::auto_select;
    return c;
  }
};

template <class T>
struct ToyDenoiserParams {
  Tensor<T> in_w, in_b;    // [C,D], [D]
  Tensor<T> pos_emb;       // [T,D]
  Tensor<T> time_w;        // [16,D]
  CrossWKVParams<T> layer1, layer2;
  Tensor<T> out_w, out_b;  // [D,C], [C]
};

template <class T, class F>
void for_each_toy_param(ToyDenoiserParams<T>& p, F fn) {
  fn("in_proj.w", p.in_w);
  fn("in_proj.b", p.in_b);
  fn("pos_emb", p.pos_emb);
  fn("time_w", p.time_w);
  for_each_param(p.layer1, [&](const char* n, Tensor<T>& t) {
    fn((std::string("layer1.") + n).c_str(), t);
  });
  for_each_param(p.layer2, [&](const char* n, Tensor<T>& t) {
    fn((std::string("layer2.") + n).c_str(), t);
  });
  fn("out_proj.w", p.out_w);
  fn("out_proj.b", p.out_b);
}

template <class T, class F>
void for_each_toy_param(const ToyDenoiserParams<T>& p, F fn) {
  for_each_toy_param(const_cast<ToyDenoiserParams<T>&>(p), [&](const char* name, Tensor<T>& t) {
    fn(name, static_cast<const Tensor<T>&>(t));
  });
}

// Zero output head makes the fresh model an exact zero predictor, so the
// step-0 loss doubles as the baseline.
template <class T>
ToyDenoiserParams<T> toy_init(const ToyConfig& cfg, std::uint64_t seed) {
  ToyDenoiserParams<T> p;
  Rng rng(seed);
  p.in_w = xavier_uniform<T>(cfg.channels, cfg.d, 1.0, rng);
  p.in_b = Tensor<T>(Shape{cfg.d});
  p.pos_emb = Tensor<T>(Shape{cfg.t_len, cfg.d});
  rng.fill_normal(p.pos_emb, 0.0, 0.02);
  p.time_w = xavier_uniform<T>(kToyTimeFeat, cfg.d, 1.0, rng);
  p.layer1 = init_params<T>(cfg.layer_cfg(true), rng.next_u64());
  p.layer2 = init_params<T>(cfg.layer_cfg(false), rng.next_u64());
  p.out_w = Tensor<T>(Shape{cfg.d, cfg.channels});
  p.out_b = Tensor<T>(Shape{cfg.channels});
  return p;
}

// Sinusoidal timestep features, one row per sample.
template <class T>
Tensor<T> time_features(const std::vector<i64>& ts) {
  Tensor<T> f(Shape{static_cast<i64>(ts.size()), kToyTimeFeat});
  for (std::size_t b = 0; b < ts.size(); ++b) {
    for (i64 k = 0; k < kToyTimeFeat / 2; ++k) {
      double freq = std::pow(10000.0, -static_cast<double>(k) / (kToyTimeFeat / 2.0));
      double ang = static_cast<double>(ts[b]) * freq;
      f(static_cast<i64>(b), 2 * k) = static_cast<T>(std::sin(ang));
      f(static_cast<i64>(b), 2 * k + 1) = static_cast<T>(std::cos(ang));
    }
  }
  return f;
}

template <class V>
struct ToyRefs {
  V in_w, in_b, pos_emb, time_w, out_w, out_b;
  LayerParamRefs<V> layer1, layer2;
};

template <class V, class F>
void for_each_toy_ref(ToyRefs<V>& r, F fn) {
  fn("in_proj.w", r.in_w);
  fn("in_proj.b", r.in_b);
  fn("pos_emb", r.pos_emb);
  fn("time_w", r.time_w);
  for_each_ref(r.layer1,
               [&](const char* n, V& v) { fn((std::string("layer1.") + n).c_str(), v); });
  for_each_ref(r.layer2,
               [&](const char* n, V& v) { fn((std::string("layer2.") + n).c_str(), v); });
  fn("out_proj.w", r.out_w);
  fn("out_proj.b", r.out_b);
}

template <class T>
ToyRefs<Tensor<T>> toy_eager_refs(const ToyDenoiserParams<T>& p) {
  ToyRefs<Tensor<T>> r;
  std::vector<const Tensor<T>*> ts;
  for_each_toy_param(p, [&](const char*, const Tensor<T>& t) { ts.push_back(&t); });
  std::size_t i = 0;
  for_each_toy_ref(r, [&](const char*, Tensor<T>& slot) { slot = *ts[i++]; });
  return r;
}

template <class T>
ToyRefs<Var<T>> toy_tape_leaves(Tape<T>& tape, const ToyDenoiserParams<T>& p) {
  ToyRefs<Var<T>> r;
  std::vector<const Tensor<T>*> ts;
  for_each_toy_param(p, [&](const char*, const Tensor<T>& t) { ts.push_back(&t); });
  std::size_t i = 0;
  for_each_toy_ref(r, [&](const char*, Var<T>& slot) { slot = tape.leaf(*ts[i++]); });
  return r;
}

// eps_hat = head(x_t features + position + timestep, two residual layers).
template <class Ctx, class V = typename Ctx::V>
V toy_forward(Ctx& cx, const ToyConfig& cfg, const ToyRefs<V>& p, V x_t, V cond, V t_feat) {
  V h = cx.add_channel(cx.matmul(x_t, p.in_w), p.in_b);
  h = cx.add_seq_table(h, p.pos_emb);
  h = cx.add_batch_vec(h, cx.matmul(t_feat, p.time_w));
  LayerOut<V> l1 =
      crosswkv_forward(cx, cfg.layer_cfg(true), p.layer1, h, cond, static_cast<const V*>(nullptr));
  h = cx.add(h, l1.o);
  LayerOut<V> l2 = crosswkv_forward(cx, cfg.layer_cfg(false), p.layer2, h, cond, &l1.v_out);
  h = cx.add(h, l2.o);
  return cx.add_channel(cx.matmul(h, p.out_w), p.out_b);
}

// Per-element mean squared error between predicted and true noise.
template <class T>
T toy_mse(const Tensor<T>& eps_hat, const Tensor<T>& eps) {
  Tensor<T> d = sub(eps_hat, eps);
  return mean_all(mul(d, d));
}

// Eager prediction with plain tensors.
template <class T>
Tensor<T> toy_predict(const ToyConfig& cfg, const ToyDenoiserParams<T>& params,
                      const Tensor<T>& x_t, const Tensor<T>& cond, const std::vector<i64>& ts) {
  EagerCtx<T> cx;
  ToyRefs<Tensor<T>> refs = toy_eager_refs(params);
  return toy_forward(cx, cfg, refs, x_t, cond, time_features<T>(ts));
}

// ---------------------------------------------------------------------------
// AdamW, decoupled weight decay, bias-corrected moments.

template <class T>
struct AdamW {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
  std::vector<Tensor<T>> m, v;
  i64 step_count = 0;

  void step(std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads) {
    if (params.size() != grads.size())
      throw config_error("adamw: parameter/gradient count mismatch");
    if (m.empty()) {
      for (auto* p : params) {
        m.emplace_back(p->shape());
        v.emplace_back(p->shape());
      }
    }
    ++step_count;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      const Tensor<T>& g = grads[i];
      if (g.shape() != p.shape())
        throw shape_error("adamw: grad shape " + shape_str(g.shape()) + " vs param " +
                          shape_str(p.shape()));
      for (i64 j = 0; j < p.numel(); ++j) {
        double gj = static_cast<double>(g[j]);
        double mj = beta1 * static_cast<double>(m[i][j]) + (1.0 - beta1) * gj;
        double vj = beta2 * static_cast<double>(v[i][j]) + (1.0 - beta2) * gj * gj;
        m[i][j] = static_cast<T>(mj);
        v[i][j] = static_cast<T>(vj);
        double mh = mj / bc1, vh = vj / bc2;
        double upd = lr * (mh / (std::sqrt(vh) + eps) + weight_decay * static_cast<double>(p[j]));
        p[j] = static_cast<T>(static_cast<double>(p[j]) - upd);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Training.

struct TrainLogRow {
  i64 step;
  double loss;
  double wallclock_ms;
};

struct TrainOptions {
  i64 steps = 2000;
  i64 batch = 16;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  i64 log_every = 50;
};

template <class T>
struct TrainResult {
  ToyDenoiserParams<T> params;
  std::vector<TrainLogRow> log;
  double first_loss = 0, last_loss = 0;
};

// steps == 0 is a no-op run that still yields the (deterministic) init params.
template <class T>
TrainResult<T> train_toy(const ToyConfig& cfg, const TrainOptions& opt) {
  if (opt.steps < 0 || opt.batch < 1)
    throw config_error("train: steps must be >= 0 and batch >= 1");
  NoiseSchedule sched = default_schedule();
  TrainResult<T> res;
  res.params = toy_init<T>(cfg, opt.seed);
  AdamW<T> adam;
  adam.lr = opt.lr;
  Rng rng(opt.seed + 0x9e3779b97f4a7c15ull);
  auto start = std::chrono::steady_clock::now();

  std::vector<Tensor<T>*> master;
  for_each_toy_param(res.params, [&](const char*, Tensor<T>& t) { master.push_back(&t); });

  for (i64 step = 0; step < opt.steps; ++step) {
    Tensor<T> x0;
    std::vector<int> labels;
    make_glyph_batch(opt.batch, rng, x0, labels);
    std::vector<i64> ts(static_cast<std::size_t>(opt.batch));
    for (auto& t : ts) t = static_cast<i64>(rng.next_below(static_cast<std::uint64_t>(sched.t_steps)));
    Tensor<T> noise(x0.shape());
    rng.fill_normal(noise, 0.0, 1.0);
    Tensor<T> x_t = q_sample(sched, x0, ts, noise);
    Tensor<T> cond = class_cond<T>(labels, cfg.t_len, cfg.d_q);

    Tape<T> tape;
    TapeCtx<T> cx(tape);
    ToyRefs<Var<T>> refs = toy_tape_leaves(tape, res.params);
    double loss_v;
    Var<T> loss;
    try {
      Var<T> pred = toy_forward(cx, cfg, refs, tape.constant(x_t), tape.constant(cond),
                                tape.constant(time_features<T>(ts)));
      Var<T> d = sub(pred, tape.constant(noise));
      loss = mean_all(mul(d, d));
      loss_v = static_cast<double>(loss.val()[0]);
    } catch (const numeric_error& e) {
      throw numeric_error("toy training diverged at step " + std::to_string(step) + ": " +
                          e.what());
    }
    if (!std::isfinite(loss_v))
      throw numeric_error("toy training diverged at step " + std::to_string(step));
    if (step == 0) res.first_loss = loss_v;
    res.last_loss = loss_v;
    if (step % opt.log_every == 0 || step == opt.steps - 1) {
      double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                            start)
                      .count();
      res.log.push_back(TrainLogRow{step, loss_v, ms});
    }

    tape.backward(loss);
    std::vector<Tensor<T>> grads;
    grads.reserve(master.size());
    for_each_toy_ref(refs, [&](const char*, Var<T>& v) { grads.push_back(tape.grad(v)); });
    adam.step(master, grads);
  }
  return res;
}

inline void write_train_log_csv(const std::string& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw io_error("train log: cannot open '" + path + "'");
  os << "step,loss,wallclock_ms\n";
  for (const auto& r : rows)
    os << r.step << "," << r.loss << "," << r.wallclock_ms << "\n";
}

// ---------------------------------------------------------------------------
// Sampling: 50 evenly strided ancestral steps from the top of the schedule,
// with the x0 estimate clipped each step.

template <class T>
Tensor<T> sample_toy(const ToyConfig& cfg, const ToyDenoiserParams<T>& params,
                     const std::vector<int>& labels, std::uint64_t seed, i64 num_steps = 50) {
  NoiseSchedule sched = default_schedule();
  if (num_steps < 1 || num_steps > sched.t_steps)
    throw config_error("sample: step count outside [1," + std::to_string(sched.t_steps) + "]");
  i64 stride = sched.t_steps / num_steps;
  const i64 n = static_cast<i64>(labels.size());
  Rng rng(seed);
  Tensor<T> x(Shape{n, cfg.t_len, cfg.channels});
  rng.fill_normal(x, 0.0, 1.0);
  Tensor<T> cond = class_cond<T>(labels, cfg.t_len, cfg.d_q);

  for (i64 i = 0; i < num_steps; ++i) {
    i64 t_cur = sched.t_steps - 1 - i * stride;
    std::vector<i64> ts(static_cast<std::size_t>(n), t_cur);
    Tensor<T> eps_hat = toy_predict(cfg, params, x, cond, ts);
    double ab = sched.alpha_bar(t_cur);
    double s_ab = std::sqrt(ab), s_1mab = std::sqrt(1.0 - ab);
    Tensor<T> x0_hat(x.shape());
    for (i64 j = 0; j < x.numel(); ++j) {
      double v = (static_cast<double>(x[j]) - s_1mab * static_cast<double>(eps_hat[j])) / s_ab;
      x0_hat[j] = static_cast<T>(std::clamp(v, -1.0, 1.0));
    }
    if (i == num_steps - 1) {
      x = x0_hat;
      break;
    }
    double ab_prev = sched.alpha_bar(t_cur - stride);
    double var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
    double dir = std::sqrt(std::max(1.0 - ab_prev - var, 0.0));
    double sig = std::sqrt(std::max(var, 0.0));
    for (i64 j = 0; j < x.numel(); ++j) {
      double z = rng.normal();
      x[j] = static_cast<T>(std::sqrt(ab_prev) * static_cast<double>(x0_hat[j]) +
                            dir * static_cast<double>(eps_hat[j]) + sig * z);
    }
  }
  return x;
}

// Fraction of samples whose nearest clean template matches the requested
// class.
template <class T>
double centroid_accuracy(const Tensor<T>& samples, const std::vector<int>& labels) {
  i64 n = samples.dim(0);
  i64 hits = 0;
  for (i64 b = 0; b < n; ++b) {
    Tensor<T> img(Shape{kGlyphLen, 1});
    for (i64 i = 0; i < kGlyphLen; ++i) img[i] = samples[b * kGlyphLen + i];
    if (nearest_centroid(img) == labels[static_cast<std::size_t>(b)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Toy model file: record stream with its own magic.

inline constexpr char kToyMagic[6] = {'C', 'W', 'K', 'V', 'D', '1'};

template <class T>
void save_toy(const std::string& path, const ToyConfig& cfg, const ToyDenoiserParams<T>& p) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io_error("toy checkpoint: cannot open '" + path + "' for writing");
  detail::write_bytes(os, kToyMagic, sizeof(kToyMagic));
  unsigned char dtype = static_cast<unsigned char>(dtype_of<T>());
  detail::write_bytes(os, &dtype, 1);
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.d));
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.h));
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.d_q));
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.d_v));
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.channels));
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.t_len));
  for_each_toy_param(p, [&](const char* name, const Tensor<T>& t) {
    write_tensor_record(os, name, t);
  });
  if (!os) throw io_error("toy checkpoint: write failed for '" + path + "'");
}

template <class T>
std::pair<ToyConfig, ToyDenoiserParams<T>> load_toy(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("toy checkpoint: cannot open '" + path + "'");
  char magic[sizeof(kToyMagic)];
  detail::read_bytes(is, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kToyMagic, sizeof(magic)) != 0)
    throw io_error("toy checkpoint: bad magic in '" + path + "'");
  unsigned char dtype = 0;
  detail::read_bytes(is, &dtype, 1, "dtype");
  if (dtype != static_cast<unsigned char>(dtype_of<T>()))
    throw io_error("toy checkpoint: dtype mismatch in '" + path + "'");
  ToyConfig cfg;
  cfg.d = detail::read_i32le(is, "header d");
  cfg.h = detail::read_i32le(is, "header h");
  cfg.d_q = detail::read_i32le(is, "header d_q");
  cfg.d_v = detail::read_i32le(is, "header d_v");
  cfg.channels = detail::read_i32le(is, "header channels");
  cfg.t_len = detail::read_i32le(is, "header t_len");

  ToyDenoiserParams<T> p = toy_init<T>(cfg, 0);
  std::vector<std::pair<std::string, Tensor<T>*>> slots;
  for_each_toy_param(p, [&](const char* name, Tensor<T>& t) { slots.emplace_back(name, &t); });
  std::size_t next = 0;
  std::string name;
  Tensor<T> t;
  while (read_tensor_record(is, name, t)) {
    if (next >= slots.size() || slots[next].first != name)
      throw io_error("toy checkpoint: unexpected record '" + name + "'");
    if (t.shape() != slots[next].second->shape())
      throw shape_error("toy checkpoint: record '" + name + "' has shape " + shape_str(t.shape()) +
                        ", expected " + shape_str(slots[next].second->shape()));
    *slots[next].second = std::move(t);
    ++next;
  }
  if (next != slots.size())
    throw io_error("toy checkpoint: missing record '" + slots[next].first + "'");
  return {cfg, std::move(p)};
}

// Grid of samples as a binary PGM image, one glyph per cell with a 1px gutter.
template <class T>
void write_pgm_grid(const std::string& path, const Tensor<T>& samples, i64 cols = 8) {
  i64 n = samples.dim(0);
  i64 rows = (n + cols - 1) / cols;
  i64 w = cols * (kGlyphSide + 1) + 1, hgt = rows * (kGlyphSide + 1) + 1;
  std::vector<unsigned char> img(static_cast<std::size_t>(w * hgt), 32);
  for (i64 b = 0; b < n; ++b) {
    i64 gr = b / cols, gc = b % cols;
    for (i64 r = 0; r < kGlyphSide; ++r) {
      for (i64 c = 0; c < kGlyphSide; ++c) {
        double v = static_cast<double>(samples[b * kGlyphLen + r * kGlyphSide + c]);
        double scaled = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0;
        i64 py = gr * (kGlyphSide + 1) + 1 + r, px = gc * (kGlyphSide + 1) + 1 + c;
        img[static_cast<std::size_t>(py * w + px)] = static_cast<unsigned char>(scaled);
      }
    }
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io_error("pgm: cannot open '" + path + "'");
  os << "P5\n" << w << " " << hgt << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

}  // namespace cwkv

// Command-line front end: mode equivalence checks, scaling benchmarks, the
// permutation-tracking demo, layer gradient checks, and toy diffusion
// training/sampling. Every command is deterministic given --seed (or the
// CWKV_SEED environment variable) in single-threaded mode.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "crosswkv/autodiff.hpp"
#include "crosswkv/bench.hpp"
#include "crosswkv/checkpoint.hpp"
#include "crosswkv/diffusion.hpp"
#include "crosswkv/layer.hpp"
#include "crosswkv/rng.hpp"
#include "crosswkv/tensor.hpp"
#include "crosswkv/wkv.hpp"

namespace {

using cwkv::i64;

std::uint64_t seed_or_env(std::uint64_t seed, bool seed_given) {
  if (seed_given) return seed;
  if (const char* env = std::getenv("CWKV_SEED")) return std::strtoull(env, nullptr, 10);
  return seed;
}

// ---------------------------------------------------------------------------
// equivalence

struct EquivOpts {
  i64 b = 2, t = 32, h = 2, n = 8, nv = 8;
  int instances = 20;
  std::uint64_t seed = 0;
  std::string dtype = "f64";
};

template <class T>
int run_equivalence(const EquivOpts& o) {
  double tol_oracle = std::is_same_v<T, double> ? 1e-10 : 1e-3;
  double tol_chunk = std::is_same_v<T, double> ? 1e-6 : 1e-3;
  cwkv::Rng rng(o.seed);
  double worst_oracle = 0, worst_chunk = 0;
  const i64 chunks[] = {1, 2, 4, 16};
  for (int inst = 0; inst < o.instances; ++inst) {
    i64 t_len = 1 + static_cast<i64>(rng.next_below(static_cast<std::uint64_t>(o.t)));
    auto in = cwkv::random_kernel_inputs<T>(o.b, t_len, o.h, o.n, o.nv, rng);
    auto rec = cwkv::wkv_recurrent(in);
    auto orc = cwkv::wkv_naive_oracle(in);
    worst_oracle = std::max({worst_oracle, static_cast<double>(cwkv::max_rel_err(rec.y, orc.y)),
                             static_cast<double>(cwkv::max_rel_err(rec.state, orc.state))});
    for (i64 c : chunks) {
      auto chk = cwkv::wkv_chunked(in, {}, c);
      worst_chunk = std::max({worst_chunk, static_cast<double>(cwkv::max_rel_err(rec.y, chk.y)),
                              static_cast<double>(cwkv::max_rel_err(rec.state, chk.state))});
    }
  }
  std::printf("equivalence: %d instances, B=%lld T<=%lld H=%lld N=%lld N_v=%lld dtype=%s\n",
              o.instances, static_cast<long long>(o.b), static_cast<long long>(o.t),
              static_cast<long long>(o.h), static_cast<long long>(o.n),
              static_cast<long long>(o.nv), o.dtype.c_str());
  std::printf("  recurrent vs oracle  max rel err %.3e (tol %.0e)\n", worst_oracle, tol_oracle);
  std::printf("  recurrent vs chunked max rel err %.3e (tol %.0e), chunk in {1,2,4,16}\n",
              worst_chunk, tol_chunk);
  int rc = 0;
  if (worst_oracle > tol_oracle) {
    std::printf("FAIL: recurrent vs oracle exceeds tolerance\n");
    rc = 1;
  }
  if (worst_chunk > tol_chunk) {
    std::printf("FAIL: recurrent vs chunked exceeds tolerance\n");
    rc = 1;
  }
  if (rc == 0) std::printf("OK\n");
  return rc;
}

// ---------------------------------------------------------------------------
// bench-scaling

struct BenchOpts {
  std::vector<i64> t_list = {256, 512, 1024, 2048};
  i64 b = 1, h = 4, n = 32, nv = 32, chunk = cwkv::kDefaultChunk;
  int runs = 5, threads = 1;
  std::uint64_t seed = 0;
  std::string baseline = "softmax";
  std::string csv;
  std::string dtype = "f64";
};

struct FitSummary {
  double lin_a = 0, lin_b = 0, lin_resid = 0;
  double quad_a = 0, quad_b = 0, quad_resid = 0;
};

// Least squares of y against {1, T} and against {1, T^2}.
FitSummary fit_models(const std::vector<double>& ts, const std::vector<double>& ys) {
  auto solve = [&](bool quadratic, double& a, double& b) {
    double sxx = 0, sx = 0, sxy = 0, sy = 0, n = static_cast<double>(ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i) {
      double x = quadratic ? ts[i] * ts[i] : ts[i];
      sxx += x * x;
      sx += x;
      sxy += x * ys[i];
      sy += ys[i];
    }
    double det = n * sxx - sx * sx;
    a = (n * sxy - sx * sy) / det;
    b = (sy * sxx - sx * sxy) / det;
  };
  auto resid = [&](bool quadratic, double a, double b) {
    double r = 0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      double x = quadratic ? ts[i] * ts[i] : ts[i];
      double e = ys[i] - (a * x + b);
      r += e * e;
    }
    return r;
  };
  FitSummary f;
  solve(false, f.lin_a, f.lin_b);
  f.lin_resid = resid(false, f.lin_a, f.lin_b);
  solve(true, f.quad_a, f.quad_b);
  f.quad_resid = resid(true, f.quad_a, f.quad_b);
  return f;
}

void print_mode_summary(const std::string& mode, const std::vector<double>& ts,
                        const std::vector<double>& ys) {
  std::printf("  %s doubling ratios:", mode.c_str());
  for (std::size_t i = 1; i < ts.size(); ++i)
    std::printf(" %g->%g: %.2f", ts[i - 1], ts[i], ys[i] / ys[i - 1]);
  std::printf("\n");
  FitSummary f = fit_models(ts, ys);
  std::printf("  %s least-squares: linear %.4g*T%+.4g (resid %.3g), quadratic %.4g*T^2%+.4g "
              "(resid %.3g) -> %s fits better\n",
              mode.c_str(), f.lin_a, f.lin_b, f.lin_resid, f.quad_a, f.quad_b, f.quad_resid,
              f.lin_resid <= f.quad_resid ? "linear" : "quadratic");
}

template <class T>
int run_bench(const BenchOpts& o) {
  for (std::size_t i = 1; i < o.t_list.size(); ++i)
    if (o.t_list[i] <= o.t_list[i - 1])
      throw cwkv::config_error("bench-scaling: --T-list must be strictly ascending");
  cwkv::Rng rng(o.seed);
  std::vector<cwkv::BenchRecord> records;
  std::vector<double> wkv_t, wkv_ms, sm_t, sm_ms;
  for (i64 t_len : o.t_list) {
    auto in = cwkv::random_kernel_inputs<T>(o.b, t_len, o.h, o.n, o.nv, rng);
    cwkv::KernelOutput<T> out;
    cwkv::AllocStats::reset_peak();
    double ms = cwkv::time_median_ms(
        [&] { out = cwkv::wkv_chunked(in, {}, o.chunk, o.threads); }, o.runs);
    cwkv::BenchRecord rec;
    rec.mode = "chunked";
    rec.t = t_len;
    rec.wall_ms = ms;
    rec.state_bytes = cwkv::state_bytes_of(out);
    rec.peak_alloc_proxy = cwkv::AllocStats::peak().load();
    rec.threads = o.threads;
    rec.dtype = o.dtype;
    records.push_back(rec);
    wkv_t.push_back(static_cast<double>(t_len));
    wkv_ms.push_back(ms);
    double analytic_flops = 13.0 * static_cast<double>(t_len) * static_cast<double>(o.h) *
                            static_cast<double>(o.n);
    std::printf("chunked  T=%5lld  wall %9.3f ms  state %lld B  peak %lld scalars  "
                "(analytic 13*T*H*N = %.3g flops)\n",
                static_cast<long long>(t_len), ms, static_cast<long long>(rec.state_bytes),
                static_cast<long long>(rec.peak_alloc_proxy), analytic_flops);

    if (o.baseline == "softmax") {
      cwkv::AllocStats::reset_peak();
      cwkv::Tensor<T> y;
      double sms = cwkv::time_median_ms(
          [&] { y = cwkv::softmax_attention_baseline(in.r, in.k, in.v); }, o.runs);
      cwkv::BenchRecord srec;
      srec.mode = "softmax";
      srec.t = t_len;
      srec.wall_ms = sms;
      srec.state_bytes = 0;
      srec.peak_alloc_proxy = cwkv::AllocStats::peak().load();
      srec.threads = o.threads;
      srec.dtype = o.dtype;
      records.push_back(srec);
      sm_t.push_back(static_cast<double>(t_len));
      sm_ms.push_back(sms);
      std::printf("softmax  T=%5lld  wall %9.3f ms  peak %lld scalars\n",
                  static_cast<long long>(t_len), sms,
                  static_cast<long long>(srec.peak_alloc_proxy));
    }
  }
  std::printf("summary:\n");
  print_mode_summary("chunked", wkv_t, wkv_ms);
  if (!sm_t.empty()) print_mode_summary("softmax", sm_t, sm_ms);
  bool state_const = true;
  i64 first_state = -1;
  for (const auto& r : records) {
    if (r.mode != "chunked") continue;
    if (first_state < 0) first_state = r.state_bytes;
    state_const = state_const && r.state_bytes == first_state;
  }
  std::printf("  state_bytes constant across T: %s\n", state_const ? "yes" : "NO");
  if (!o.csv.empty()) {
    cwkv::write_bench_csv(o.csv, records);
    std::printf("wrote %s\n", o.csv.c_str());
  }
  return state_const ? 0 : 1;
}

// ---------------------------------------------------------------------------
// demo-s5

int run_demo(i64 n, i64 steps, std::uint64_t seed, bool exhaustive) {
  if (exhaustive) {
    // Every permutation of n elements is a product of at most n - 1
    // transpositions, so words up to that length reach all of S_n.
    if (n > 5) throw cwkv::config_error("demo-s5: exhaustive mode supports n <= 5");
    std::vector<std::pair<i64, i64>> gens;
    for (i64 i = 0; i < n; ++i)
      for (i64 j = i + 1; j < n; ++j) gens.emplace_back(i, j);
    std::vector<std::vector<std::pair<i64, i64>>> words = {{}};
    std::size_t lo = 0;
    for (i64 len = 1; len <= n - 1; ++len) {
      std::size_t hi = words.size();
      for (std::size_t wi = lo; wi < hi; ++wi)
        for (auto g : gens) {
          auto ext = words[wi];
          ext.push_back(g);
          words.push_back(ext);
        }
      lo = hi;
    }
    std::set<std::vector<i64>> reached;
    for (const auto& w : words) {
      auto res = cwkv::s_n_demo_run<double>(n, w);
      if (!res.match) {
        std::printf("FAIL: tracked permutation diverged on a word of length %zu\n", w.size());
        return 1;
      }
      reached.insert(res.tracked);
    }
    std::size_t factorial = 1;
    for (i64 i = 2; i <= n; ++i) factorial *= static_cast<std::size_t>(i);
    std::printf("exhaustive S_%lld: %zu words, %zu distinct permutations (expect %zu)\n",
                static_cast<long long>(n), words.size(), reached.size(), factorial);
    if (reached.size() != factorial) {
      std::printf("FAIL: not all permutations reached\n");
      return 1;
    }
    std::printf("OK\n");
    return 0;
  }

  auto res = cwkv::s_n_tracking_demo(n, steps, seed);
  auto print_perm = [](const char* tag, const std::vector<i64>& p) {
    std::printf("  %s:", tag);
    for (i64 v : p) std::printf(" %lld", static_cast<long long>(v));
    std::printf("\n");
  };
  std::printf("S_%lld tracking, %lld random transpositions, seed %llu\n",
              static_cast<long long>(n), static_cast<long long>(steps),
              static_cast<unsigned long long>(seed));
  print_perm("state-tracked", res.tracked);
  print_perm("brute-force  ", res.brute);
  std::printf("  max |entry - {0,1}| = %.3e\n", res.max_entry_err);
  if (res.match && res.max_entry_err <= 1e-6) {
    std::printf("OK\n");
    return 0;
  }
  std::printf("FAIL: tracked and brute-force permutations differ\n");
  return 1;
}

// ---------------------------------------------------------------------------
// gradcheck

int run_gradcheck(double h, double tol, std::uint64_t seed) {
  cwkv::LayerConfig cfg;
  cfg.d = 8;
  cfg.d_q = 4;
  cfg.d_v = 8;
  cfg.h = 2;
  cfg.rank_w = cfg.rank_a = cfg.rank_v = cfg.rank_g = 8;
  cfg.is_first_layer = false;
  cfg.mode = cwkv::Mode::recurrent;
  cwkv::CrossWKVParams<double> p = cwkv::init_params<double>(cfg, seed);
  cwkv::Rng rng(seed + 17);
  cwkv::for_each_param(p, [&](const char*, cwkv::Tensor<double>& t) {
    for (i64 i = 0; i < t.numel(); ++i) t[i] = 0.3 * rng.normal();
  });
  const i64 b = 2, t_len = 5, l_len = 3;
  cwkv::Tensor<double> x(cwkv::Shape{b, t_len, cfg.d}), q(cwkv::Shape{b, l_len, cfg.d_q});
  cwkv::Tensor<double> vf(cwkv::Shape{b, t_len, cfg.d_v});
  cwkv::Tensor<double> s0(cwkv::Shape{b, cfg.h, cfg.n_v(), cfg.n()});
  rng.fill_normal(x, 0.0, 1.0);
  rng.fill_normal(q, 0.0, 1.0);
  rng.fill_normal(vf, 0.0, 1.0);
  rng.fill_normal(s0, 0.0, 0.3);
  cwkv::Tensor<double> c_o(x.shape()), c_v(vf.shape()), c_s(s0.shape());
  rng.fill_normal(c_o, 0.0, 1.0);
  rng.fill_normal(c_v, 0.0, 1.0);
  rng.fill_normal(c_s, 0.0, 1.0);

  std::vector<std::pair<std::string, const cwkv::Tensor<double>*>> leaves;
  cwkv::for_each_param(p, [&](const char* name, const cwkv::Tensor<double>& t) {
    leaves.emplace_back(name, &t);
  });
  double worst_overall = 0;
  std::string worst_name;
  for (std::size_t pi = 0; pi < leaves.size(); ++pi) {
    auto f = [&](cwkv::Tape<double>& tape, cwkv::Var<double> var) {
      cwkv::TapeCtx<double> cx(tape);
      cwkv::LayerParamRefs<cwkv::Var<double>> refs;
      std::size_t i = 0;
      cwkv::for_each_ref(refs, [&](const char*, cwkv::Var<double>& slot) {
        slot = (i == pi) ? var : tape.constant(*leaves[i].second);
        ++i;
      });
      auto xv = tape.constant(x);
      auto qv = tape.constant(q);
      auto vfv = tape.constant(vf);
      auto sv = tape.constant(s0);
      auto out = cwkv::crosswkv_forward(cx, cfg, refs, xv, qv, &vfv, &sv);
      return cwkv::add(
          cwkv::add(cwkv::mean_all(cwkv::mul(out.o, tape.constant(c_o))),
                    cwkv::mean_all(cwkv::mul(out.v_out, tape.constant(c_v)))),
          cwkv::mean_all(cwkv::mul(out.state, tape.constant(c_s))));
    };
    double worst = cwkv::finite_diff_check<double>(f, *leaves[pi].second, h);
    std::printf("  %-14s max rel err %.3e\n", leaves[pi].first.c_str(), worst);
    if (worst > worst_overall) {
      worst_overall = worst;
      worst_name = leaves[pi].first;
    }
  }
  std::printf("gradcheck: worst leaf %s with %.3e (tol %.0e)\n", worst_name.c_str(),
              worst_overall, tol);
  if (worst_overall <= tol) {
    std::printf("OK\n");
    return 0;
  }
  std::printf("FAIL\n");
  return 1;
}

// ---------------------------------------------------------------------------
// train-toy / sample-toy

int run_train(i64 steps, i64 batch, double lr, std::uint64_t seed, const std::string& out,
              const std::string& log_path) {
  cwkv::ToyConfig cfg;
  cwkv::TrainOptions opt;
  opt.steps = steps;
  opt.batch = batch;
  opt.lr = lr;
  opt.seed = seed;
  auto res = cwkv::train_toy<double>(cfg, opt);
  cwkv::save_toy(out, cfg, res.params);
  if (!log_path.empty()) cwkv::write_train_log_csv(log_path, res.log);
  if (steps > 0)
    std::printf("trained %lld steps (batch %lld, lr %g): loss %.4f -> %.4f (ratio %.3f)\n",
                static_cast<long long>(steps), static_cast<long long>(batch), lr, res.first_loss,
                res.last_loss, res.last_loss / res.first_loss);
  else
    std::printf("wrote init checkpoint (no training steps)\n");
  std::printf("checkpoint: %s\n", out.c_str());
  if (!log_path.empty()) std::printf("log: %s\n", log_path.c_str());
  return 0;
}

int run_sample(const std::string& ckpt, i64 n, int cls, std::uint64_t seed,
               const std::string& out, bool eval) {
  auto [cfg, params] = cwkv::load_toy<double>(ckpt);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (i64 i = 0; i < n; ++i)
    labels[static_cast<std::size_t>(i)] = cls == -2 ? static_cast<int>(i % 4) : cls;
  cwkv::Tensor<double> samples = cwkv::sample_toy(cfg, params, labels, seed);
  std::printf("sampled %lld glyphs (%s)\n", static_cast<long long>(n),
              cls == -2 ? "mixed classes" : (cls == -1 ? "unconditional" : "single class"));
  if (eval) {
    if (cls == -1) {
      int hist[4] = {0, 0, 0, 0};
      for (i64 b = 0; b < n; ++b) {
        cwkv::Tensor<double> img(cwkv::Shape{cwkv::kGlyphLen, 1});
        for (i64 i = 0; i < cwkv::kGlyphLen; ++i) img[i] = samples[b * cwkv::kGlyphLen + i];
        ++hist[cwkv::nearest_centroid(img)];
      }
      std::printf("unconditional class histogram: %d %d %d %d (max fraction %.2f)\n", hist[0],
                  hist[1], hist[2], hist[3],
                  static_cast<double>(std::max({hist[0], hist[1], hist[2], hist[3]})) /
                      static_cast<double>(n));
    } else {
      double acc = cwkv::centroid_accuracy(samples, labels);
      std::printf("nearest-centroid accuracy: %.3f over %lld samples\n", acc,
                  static_cast<long long>(n));
    }
  }
  if (!out.empty()) {
    cwkv::write_pgm_grid(out, samples);
    std::printf("grid: %s\n", out.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CrossWKV linear-attention kernel toolkit"};
  app.require_subcommand(1);

  EquivOpts eq;
  bool eq_seed_given = false;
  auto* c_eq = app.add_subcommand("equivalence", "cross-check recurrent/chunked/oracle modes");
  c_eq->add_option("--B", eq.b, "batch size");
  c_eq->add_option("--T", eq.t, "max sequence length");
  c_eq->add_option("--H", eq.h, "heads");
  c_eq->add_option("--N", eq.n, "key head dim");
  c_eq->add_option("--NV", eq.nv, "value head dim");
  c_eq->add_option("--instances", eq.instances, "random instances");
  c_eq->add_option("--seed", eq.seed, "rng seed")->each([&](const std::string&) {
    eq_seed_given = true;
  });
  c_eq->add_option("--dtype", eq.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  BenchOpts bo;
  bool bo_seed_given = false;
  std::string t_list_str = "256,512,1024,2048";
  auto* c_bench = app.add_subcommand("bench-scaling", "wall time vs sequence length");
  c_bench->add_option("--T-list", t_list_str, "ascending comma-separated lengths");
  c_bench->add_option("--B", bo.b, "batch size");
  c_bench->add_option("--H", bo.h, "heads");
  c_bench->add_option("--N", bo.n, "key head dim");
  c_bench->add_option("--NV", bo.nv, "value head dim");
  c_bench->add_option("--chunk", bo.chunk, "chunk length");
  c_bench->add_option("--runs", bo.runs, "timed runs per point (median)");
  c_bench->add_option("--threads", bo.threads, "worker threads over (B,H)");
  c_bench->add_option("--baseline", bo.baseline, "softmax or none")
      ->check(CLI::IsMember({"softmax", "none"}));
  c_bench->add_option("--csv", bo.csv, "write records to this CSV path");
  c_bench->add_option("--seed", bo.seed, "rng seed")->each([&](const std::string&) {
    bo_seed_given = true;
  });
  c_bench->add_option("--dtype", bo.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  i64 demo_n = 5, demo_steps = 100;
  std::uint64_t demo_seed = 0;
  bool demo_seed_given = false, demo_exhaustive = false;
  auto* c_demo = app.add_subcommand("demo-s5", "permutation tracking in the state matrix");
  c_demo->add_option("--n", demo_n, "symmetric group degree");
  c_demo->add_option("--steps", demo_steps, "random transpositions");
  c_demo->add_option("--seed", demo_seed, "rng seed")->each([&](const std::string&) {
    demo_seed_given = true;
  });
  c_demo->add_flag("--exhaustive", demo_exhaustive, "enumerate all words up to length 3");

  double gc_h = 1e-4, gc_tol = 1e-4;
  std::uint64_t gc_seed = 0;
  bool gc_seed_given = false;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference check of every layer leaf");
  c_gc->set_help_flag("--help", "print help");
  c_gc->add_option("--h", gc_h, "central-difference step");
  c_gc->add_option("--tol", gc_tol, "max relative error");
  c_gc->add_option("--seed", gc_seed, "rng seed")->each([&](const std::string&) {
    gc_seed_given = true;
  });

  i64 tr_steps = 2000, tr_batch = 16;
  double tr_lr = 1e-4;
  std::uint64_t tr_seed = 0;
  bool tr_seed_given = false;
  std::string tr_out = "toy_model.bin", tr_log = "train_log.csv";
  auto* c_tr = app.add_subcommand("train-toy", "train the toy conditional denoiser");
  c_tr->add_option("--steps", tr_steps, "optimizer steps (0 writes init params)");
  c_tr->add_option("--batch", tr_batch, "batch size");
  c_tr->add_option("--lr", tr_lr, "learning rate");
  c_tr->add_option("--seed", tr_seed, "rng seed")->each([&](const std::string&) {
    tr_seed_given = true;
  });
  c_tr->add_option("--out", tr_out, "checkpoint path");
  c_tr->add_option("--log", tr_log, "training log CSV path (empty to skip)");

  std::string sm_ckpt, sm_out;
  i64 sm_n = 200;
  int sm_class = -2;
  std::uint64_t sm_seed = 0;
  bool sm_seed_given = false, sm_eval = false;
  auto* c_sm = app.add_subcommand("sample-toy", "sample glyphs from a trained checkpoint");
  c_sm->add_option("--checkpoint", sm_ckpt, "toy model file")->required();
  c_sm->add_option("--n", sm_n, "number of samples");
  c_sm->add_option("--class", sm_class, "-1 unconditional, 0..3 single class, default mixed")
      ->check(CLI::Range(-2, 3));
  c_sm->add_option("--seed", sm_seed, "rng seed")->each([&](const std::string&) {
    sm_seed_given = true;
  });
  c_sm->add_option("--out", sm_out, "PGM grid path");
  c_sm->add_flag("--eval", sm_eval, "print nearest-centroid accuracy / histogram");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_eq) {
      eq.seed = seed_or_env(eq.seed, eq_seed_given);
      return eq.dtype == "f32" ? run_equivalence<float>(eq) : run_equivalence<double>(eq);
    }
    if (*c_bench) {
      bo.seed = seed_or_env(bo.seed, bo_seed_given);
      bo.t_list.clear();
      std::size_t pos = 0;
      while (pos < t_list_str.size()) {
        std::size_t comma = t_list_str.find(',', pos);
        if (comma == std::string::npos) comma = t_list_str.size();
        bo.t_list.push_back(std::stoll(t_list_str.substr(pos, comma - pos)));
        pos = comma + 1;
      }
      return bo.dtype == "f32" ? run_bench<float>(bo) : run_bench<double>(bo);
    }
    if (*c_demo) {
      demo_seed = seed_or_env(demo_seed, demo_seed_given);
      return run_demo(demo_n, demo_steps, demo_seed, demo_exhaustive);
    }
    if (*c_gc) {
      gc_seed = seed_or_env(gc_seed, gc_seed_given);
      return run_gradcheck(gc_h, gc_tol, gc_seed);
    }
    if (*c_tr) {
      tr_seed = seed_or_env(tr_seed, tr_seed_given);
      return run_train(tr_steps, tr_batch, tr_lr, tr_seed, tr_out, tr_log);
    }
    if (*c_sm) {
      sm_seed = seed_or_env(sm_seed, sm_seed_given);
      return run_sample(sm_ckpt, sm_n, sm_class, sm_seed, sm_out, sm_eval);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

// Acceptance suite: one PASS/FAIL line per criterion. The property checks run
// on synthetic inputs and the tiny preset; the training, preservation and
// uplift checks run the full desk pipeline through the command layer.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "adabldm/commands.hpp"
#include "adabldm/errors.hpp"
#include "adabldm/metrics.hpp"
#include "adabldm/pipeline.hpp"
#include "adabldm/schedule.hpp"
#include "adabldm/trimap.hpp"
#include "metric_oracles.hpp"

namespace {

using namespace adabldm;
namespace cmd = adabldm::commands;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw StateError("cannot read " + p.string());
  return json::parse(in);
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Collects failed sub-checks so a line reports every problem, not just the first.
struct Checks {
  std::vector<std::string> failed;
  void expect(bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  }
  Outcome outcome(const std::string& summary) const {
    if (failed.empty()) return {true, summary};
    std::string s;
    for (const auto& f : failed) s += (s.empty() ? "" : "; ") + f;
    return {false, s + " | " + summary};
  }
};

double relative_error(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

BinaryMask random_mask(int h, int w, double p, Rng& rng) {
  BinaryMask m(h, w);
  for (auto& v : m.data) v = uniform(rng, 0.0, 1.0) < p;
  return m;
}

BinaryMask disk(int size, int cy, int cx, int r) {
  BinaryMask m(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) m.at(y, x) = (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r;
  return m;
}

// ---------------------------------------------------------------- property suites

Outcome metric_oracles() {
  using namespace adabldm::testing;
  Checks c;
  Rng rng(101);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const std::vector<metrics::Sample> v{random_metric_instance(rng)};
    const auto m = metrics::evaluate(v);
    const double errs[] = {std::abs(m.pixel_auc - brute_force_auc(v)), std::abs(m.pro - brute_force_pro(v, 0.3)),
                           std::abs(m.ap - brute_force_ap(v)), std::abs(m.iap - brute_force_iap(v)),
                           std::abs(m.iap_at_k - brute_force_iap_at_k(v, 90))};
    for (double e : errs) worst = std::max(worst, e);
  }
  c.expect(worst <= 1e-9, fmt("oracle mismatch %.3g", worst));
  int broken = 0;
  for (int i = 0; i < 200; ++i) {
    auto s = random_metric_instance(rng);
    const auto before = metrics::evaluate({s});
    for (double& v : s.scores.data) v = std::exp(2.5 * v) - 4.0;
    const auto after = metrics::evaluate({s});
    broken += before.pixel_auc != after.pixel_auc || before.pro != after.pro || before.ap != after.ap ||
              before.iap != after.iap || before.iap_at_k != after.iap_at_k;
  }
  c.expect(broken == 0, fmt("%d instances changed under a monotone transform", broken));
  return c.outcome(fmt("200 instances, max |metric - oracle| = %.2g; monotone invariance exact on 200", worst));
}

Outcome trimap_suite() {
  Checks c;
  // Every foreground/defect assignment of a 2x2 grid.
  int cases = 0, rejected = 0;
  for (int f = 0; f < 16; ++f)
    for (int d = 0; d < 16; ++d) {
      BinaryMask fg(2, 2), defect(2, 2);
      for (int k = 0; k < 4; ++k) {
        fg.data[k] = (f >> k) & 1;
        defect.data[k] = (d >> k) & 1;
      }
      ++cases;
      if ((d & ~f) != 0) {
        bool threw = false;
        try {
          trimap::build_trimap(fg, defect);
        } catch (const PreconditionError&) {
          threw = true;
        }
        c.expect(threw, fmt("defect outside foreground accepted (f=%d d=%d)", f, d));
        ++rejected;
        continue;
      }
      const Trimap t = trimap::build_trimap(fg, defect);
      for (int k = 0; k < 4; ++k) {
        const double want = defect.data[k] ? 1.0 : (fg.data[k] ? 0.5 : 0.0);
        c.expect(t.data[k] == want, fmt("case f=%d d=%d pixel %d", f, d, k));
      }
      const auto [fg2, d2] = trimap::split_trimap(t);
      c.expect(fg2 == fg && d2 == defect, fmt("round trip f=%d d=%d", f, d));
    }
  Rng rng(202);
  for (int i = 0; i < 200; ++i) {
    const BinaryMask fg = random_mask(16, 16, 0.6, rng);
    BinaryMask defect = random_mask(16, 16, 0.3, rng);
    for (std::size_t k = 0; k < defect.data.size(); ++k) defect.data[k] &= fg.data[k];
    const auto [fg2, d2] = trimap::split_trimap(trimap::build_trimap(fg, defect));
    c.expect(fg2 == fg && d2 == defect, "random round trip");
  }

  const BinaryMask fg = disk(64, 32, 30, 22);
  std::vector<BinaryMask> seeds = {disk(64, 10, 10, 5), disk(64, 40, 40, 3)};
  BinaryMask line(64, 64);
  for (int x = 5; x < 20; ++x) line.at(30, x) = line.at(31, x + 1) = 1;
  seeds.push_back(line);
  int outside = 0, empty = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto out = trimap::synth_defect_mask(seeds, fg, {}, rng);
    empty += out.mask.none();
    for (std::size_t k = 0; k < fg.data.size(); ++k) outside += out.mask.data[k] && !fg.data[k];
  }
  c.expect(outside == 0 && empty == 0, fmt("synth masks: %d pixels outside, %d empty", outside, empty));

  // Covering: the upsampled latent mask contains the disk dilation by ceil(H/H_z).
  int uncovered = 0;
  for (int i = 0; i < 500; ++i) {
    const BinaryMask m = random_mask(64, 64, uniform(rng, 0.0, 0.03), rng);
    const BinaryMask up = trimap::upsample_nearest(trimap::dilate_downsample(m, 8, 8), 64, 64);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        if (up.at(y, x)) continue;
        for (int yy = std::max(0, y - 8); yy <= std::min(63, y + 8); ++yy)
          for (int xx = std::max(0, x - 8); xx <= std::min(63, x + 8); ++xx)
            uncovered += m.at(yy, xx) && (yy - y) * (yy - y) + (xx - x) * (xx - x) <= 64;
      }
  }
  c.expect(uncovered == 0, fmt("%d dilated pixels not covered", uncovered));
  int mismatched = 0, singles = 0;
  auto single = [&](int size, int lat, int py, int px) {
    const int r = (size + lat - 1) / lat, cell = size / lat;
    BinaryMask m(size, size);
    m.at(py, px) = 1;
    LatentMask want(lat, lat);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if ((y - py) * (y - py) + (x - px) * (x - px) <= r * r) want.at(y / cell, x / cell) = 1;
    mismatched += !(trimap::dilate_downsample(m, lat, lat) == want);
    ++singles;
  };
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) single(32, 8, y, x);
  for (int i = 0; i < 300; ++i) single(64, 8, uniform_int(rng, 0, 63), uniform_int(rng, 0, 63));
  c.expect(mismatched == 0, fmt("%d single-pixel cases differ from brute force", mismatched));
  return c.outcome(fmt("%d case-table entries (%d rejected), 1000 synth draws contained, %d single-pixel cases exact",
                       cases, rejected, singles));
}

Outcome diffusion_suite() {
  Checks c;
  const auto s = schedule::default_schedule();
  // Independent recomputation of the linear schedule.
  double ab = 1.0, worst = 0.0;
  for (int t = 0; t < s.train_steps; ++t) {
    const double beta = 1e-4 + (2e-2 - 1e-4) * t / (s.train_steps - 1);
    ab *= 1.0 - beta;
    worst = std::max({worst, std::abs(s.betas[t] - beta), std::abs(s.alpha_bars[t] - ab)});
    c.expect(s.alphas[t] == 1.0 - s.betas[t], "alpha != 1 - beta");
    c.expect(s.alpha_bars[t] > 0.0 && s.alpha_bars[t] < 1.0, "alpha_bar outside (0,1)");
    if (t > 0) c.expect(s.alpha_bars[t] < s.alpha_bars[t - 1], "alpha_bar not strictly decreasing");
    c.expect(s.sigmas[t] == 0.0, "nonzero sigma at eta=0");
  }
  c.expect(s.train_steps == 1000 && worst < 1e-12, fmt("schedule differs from recomputation by %.2g", worst));

  Rng rng(303);
  const std::vector<int> shape{2, 4, 8, 8};
  double lin = 0.0;
  for (int t : {0, 17, 500, 999}) {
    const Tensor z1 = randn(shape, rng), z2 = randn(shape, rng), e1 = randn(shape, rng), e2 = randn(shape, rng);
    const double a = 0.7, b = -1.3;
    Tensor zs(shape), es(shape);
    for (std::size_t i = 0; i < zs.size(); ++i) {
      zs[i] = a * z1[i] + b * z2[i];
      es[i] = a * e1[i] + b * e2[i];
    }
    const Tensor lhs = schedule::q_sample(zs, t, es, s);
    const Tensor q1 = schedule::q_sample(z1, t, e1, s), q2 = schedule::q_sample(z2, t, e2, s);
    Tensor rhs(shape);
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * q1[i] + b * q2[i];
    lin = std::max(lin, relative_error(lhs, rhs));
  }
  c.expect(lin < 1e-12, fmt("q_sample linearity error %.2g", lin));

  // Deterministic trajectories: a fixed nonlinear noise model, eta = 0.
  const auto plan = schedule::plan_timesteps(1000, 50, 30, 5);
  auto model = [](const Tensor& z) {
    Tensor e(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) e[i] = std::tanh(0.8 * z[i]) + 0.1 * std::sin(3.0 * i);
    return e;
  };
  const Tensor start = randn({1, 4, 8, 8}, rng);
  std::optional<Tensor> first;
  int differing = 0;
  for (int run = 0; run < 5; ++run) {
    Rng r(run + 1);
    Tensor z = start;
    for (int i = 0; i < plan.size(); ++i) z = schedule::ddim_step(z, model(z), plan.steps[i], plan.previous(i), s, 0.0, r);
    if (!first) first = z;
    differing += !(z == *first);
  }
  c.expect(differing == 0, fmt("%d of 5 eta=0 trajectories differ", differing));

  const Tensor z0 = randn({1, 4, 8, 8}, rng), eps = randn({1, 4, 8, 8}, rng);
  Tensor z = schedule::q_sample(z0, plan.steps.front(), eps, s);
  for (int i = 0; i < plan.size(); ++i) z = schedule::ddim_step(z, eps, plan.steps[i], plan.previous(i), s, 0.0, rng);
  const double rt = relative_error(z, z0);
  c.expect(rt <= 1e-4, fmt("true-noise round trip error %.2g", rt));
  return c.outcome(fmt("schedule max dev %.1g, linearity %.1g, 5 eta=0 runs identical, round trip %.1g", worst, lin,
                       rt));
}

// ---------------------------------------------------------------- tiny preset

struct TinyRun {
  cmd::RunConfig cfg;
  fs::path bench_run, train_run, generate_run;
  harness::ToyBenchmark bench;
  std::optional<models::ModelBundle> bundle;
  schedule::NoiseSchedule sched;
};

TinyRun run_tiny(const fs::path& config, const cmd::RunOptions& options) {
  TinyRun t;
  t.cfg = cmd::load_config(config);
  t.bench_run = cmd::cmd_make_bench(t.cfg, options).run_dir;
  t.cfg.inputs.benchmark = t.bench_run.string();
  t.train_run = cmd::cmd_train(t.cfg, options).run_dir;
  t.cfg.inputs.checkpoint = t.train_run.string();
  t.generate_run = cmd::cmd_generate(t.cfg, options).run_dir;
  const std::string cat = t.cfg.categories.front().category;
  t.bench = harness::load_benchmark(t.bench_run / "benchmark" / cat);
  t.bundle = models::load_checkpoint(t.train_run / "checkpoints" / cat);
  t.sched = schedule::make_schedule(t.cfg.schedule.train_steps, t.cfg.schedule.beta_start, t.cfg.schedule.beta_end);
  return t;
}

BinaryMask foreground(const harness::ToyBenchmark& bench, const ImageGrid& x) {
  return trimap::estimate_foreground(x, bench.foreground_kind(), {.all_ones_fallback = true});
}

Outcome editing_identities(const TinyRun& t) {
  Checks c;
  const auto t0 = Clock::now();
  const models::ModelBundle& b = *t.bundle;
  const auto& g = b.geometry();
  const int n = g.image_size;
  const auto prompt = b.prompt(t.cfg.categories.front().category, "defect");
  pipeline::GenerationConfig gen = t.cfg.generation;

  double empty_mae = 0.0;
  for (std::size_t i = 0; i < 3 && i < t.bench.train_ok.size(); ++i) {
    const ImageGrid& x = t.bench.train_ok[i];
    const BinaryMask none(n, n);
    Rng rng(400 + i);
    const auto res = pipeline::generate(x, trimap::build_trimap(foreground(t.bench, x), none), none, prompt, b,
                                        t.sched, gen, rng);
    empty_mae = std::max(empty_mae, mean_abs_error(b.decode(res.z), b.decode(b.encode(x))));
  }
  c.expect(empty_mae <= 1e-6, fmt("empty-mask MAE %.3g", empty_mae));

  const BinaryMask full(n, n, 1);
  const Trimap full_tri = trimap::build_trimap(full, full);
  Rng r1(410), r2(410);
  const auto edited = pipeline::generate(t.bench.train_ok[0], full_tri, full, prompt, b, t.sched, gen, r1);
  const auto free = pipeline::free_diffusion(full_tri, prompt, b, t.sched,
                                             gen.free_steps + gen.latent_steps + gen.image_steps, gen.eta,
                                             gen.guidance_scale, r2);
  std::vector<const LatentGrid*> denoised;
  for (const auto& e : edited.trace)
    if (e.kind == pipeline::TraceKind::denoise) denoised.push_back(&e.z);
  bool same = denoised.size() == free.trace.size() && edited.z == free.z;
  for (std::size_t i = 0; same && i < denoised.size(); ++i) same = *denoised[i] == free.trace[i].z;
  c.expect(same, "full-mask trace differs from free diffusion");

  Rng rng(420);
  int blends = 0, leaks = 0;
  for (int i = 0; i < 6; ++i) {
    const ImageGrid& x = t.bench.train_ok[i % t.bench.train_ok.size()];
    const BinaryMask fg = foreground(t.bench, x);
    const auto m = trimap::synth_defect_mask(t.bench.seed_masks, fg, t.cfg.dataset.mask, rng).mask;
    const auto res = pipeline::generate(x, trimap::build_trimap(fg, m), m, prompt, b, t.sched, gen, rng);
    for (const auto& e : res.trace) {
      if (e.kind != pipeline::TraceKind::latent_blend) continue;
      ++blends;
      for (int ch = 0; ch < e.z.channels; ++ch)
        for (int y = 0; y < e.z.height; ++y)
          for (int xx = 0; xx < e.z.width; ++xx)
            leaks += !res.latent_mask.at(y, xx) && e.z.at(ch, y, xx) != res.z_ok.at(ch, y, xx);
    }
  }
  c.expect(blends > 0 && leaks == 0, fmt("%d latent cells differ from z_OK over %d blends", leaks, blends));
  const double secs = seconds_since(t0);
  c.expect(secs <= 120.0, fmt("took %.0f s", secs));
  return c.outcome(fmt("empty-mask MAE %.1g, full-mask trace bit-exact (%zu steps), %d latent blends exact, %.1f s",
                       empty_mae, denoised.size(), blends, secs));
}

models::ModelGeometry micro_geometry() {
  models::ModelGeometry g;
  g.image_size = 8;
  g.latent_size = 4;
  g.latent_channels = 2;
  g.codec_widths = {4, 4};
  g.denoiser_channels = 2;
  g.prompt_dim = 4;
  g.time_dim = 4;
  return g;
}

Outcome adaptation_suite(const TinyRun& t) {
  Checks c;
  const auto t0 = Clock::now();
  const models::ModelBundle& b = *t.bundle;
  const auto prompt = b.prompt(t.cfg.categories.front().category, "defect");
  Rng rng(500);

  struct Case {
    ImageGrid x;
    BinaryMask m;
    LatentGrid z;
  };
  std::vector<Case> cases;
  for (int i = 0; i < 10; ++i) {
    const ImageGrid& x = t.bench.train_ok[i % t.bench.train_ok.size()];
    const BinaryMask fg = foreground(t.bench, x);
    const auto m = trimap::synth_defect_mask(t.bench.seed_masks, fg, t.cfg.dataset.mask, rng).mask;
    const auto res = pipeline::generate(x, trimap::build_trimap(fg, m), m, prompt, b, t.sched, t.cfg.generation, rng);
    cases.push_back({x, m, res.z});
  }

  pipeline::AdaptConfig none;
  none.steps = 0;
  const auto noop = pipeline::adapt_decoder(cases[0].z, cases[0].x, cases[0].m, b, none);
  c.expect(noop.image == b.decode(cases[0].z) && noop.decoder.hash() == b.decoder.hash(),
           "zero adaptation steps changed the output");

  pipeline::AdaptConfig keep;  // lambda_con = 100
  pipeline::AdaptConfig loose = keep;
  loose.lambda_con = 0.0;
  int li_up = 0, ld_order = 0, li_order = 0;
  double ratio = 0.0;
  for (const auto& k : cases) {
    const auto a = pipeline::adapt_decoder(k.z, k.x, k.m, b, keep);
    const auto z = pipeline::adapt_decoder(k.z, k.x, k.m, b, loose);
    li_up += a.li_final > a.li_initial;
    ld_order += a.ld_final > z.ld_final;
    li_order += z.li_final > a.li_final;
    ratio += a.li_final / std::max(a.li_initial, 1e-300) / cases.size();
  }
  c.expect(li_up == 0, fmt("L_i rose on %d of 10 samples", li_up));
  c.expect(ld_order == 0, fmt("L_d(100) > L_d(0) on %d samples", ld_order));
  c.expect(li_order == 0, fmt("L_i(0) > L_i(100) on %d samples", li_order));

  models::ModelBundle micro(micro_geometry(), 501);
  const LatentGrid z = LatentGrid::from_tensor(randn({1, 2, 4, 4}, rng));
  ImageGrid x_ok(3, 8, 8), target(3, 8, 8);
  for (double& v : x_ok.data) v = uniform(rng, 0.0, 1.0);
  for (double& v : target.data) v = uniform(rng, 0.0, 1.0);
  BinaryMask m(8, 8);
  for (int y = 2; y < 5; ++y)
    for (int x = 3; x < 6; ++x) m.at(y, x) = 1;
  models::CodecDecoder d = micro.decoder;
  d.params().set_trainable(true);
  const std::size_t params = d.params().numel();
  auto objective = [&] { return pipeline::adaptation_objective(d, z, x_ok, m, target, 100.0); };
  d.params().zero_grad();
  nn::backward(objective());
  const double h = 1e-6;
  double worst = 0.0;
  for (auto& p : d.params().all())
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      double up, down;
      {
        nn::NoGradGuard guard;
        p.value[i] = saved + h;
        up = objective()->value[0];
        p.value[i] = saved - h;
        down = objective()->value[0];
      }
      p.value[i] = saved;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(numeric - p.grad[i]) / std::max(1e-6, std::abs(numeric) + std::abs(p.grad[i])));
    }
  c.expect(params <= 1000 && worst <= 1e-3, fmt("gradient check %.2g on %zu parameters", worst, params));
  const double secs = seconds_since(t0);
  c.expect(secs <= 300.0, fmt("took %.0f s", secs));
  return c.outcome(fmt("no-op exact; L_i never rose on 10 samples (mean final/initial %.3f); lambda order holds; "
                       "gradient rel. error %.1g on %zu params; %.1f s",
                       ratio, worst, params, secs));
}

Outcome replay_determinism(const TinyRun& t, const cmd::RunOptions& options) {
  Checks c;
  cmd::RunOptions replay = options;
  replay.replay = t.generate_run / "manifest.json";
  const auto r = cmd::run_command("generate", cmd::manifest_config(*replay.replay), replay);
  const json before = read_json(t.generate_run / "manifest.json"), after = read_json(r.run_dir / "manifest.json");
  c.expect(r.replay_match.value_or(false), "replay reported a mismatch");
  c.expect(before.at("outputs") == after.at("outputs"), "output digests differ");
  return c.outcome(fmt("%zu output files identical, digest %s", after.at("outputs").size(), r.digest.substr(0, 12).c_str()));
}

// ---------------------------------------------------------------- desk pipeline

struct DeskRun {
  cmd::RunConfig cfg;
  fs::path train_run, generate_run, evaluate_run, report_run;
  double train_seconds = 0.0, generate_seconds = 0.0, total_seconds = 0.0;
  std::string error;
};

DeskRun run_desk(const fs::path& config, const cmd::RunOptions& options, int workers) {
  DeskRun d;
  const auto t0 = Clock::now();
  try {
    d.cfg = cmd::load_config(config);
    if (workers > 0) d.cfg.workers = workers;
    d.cfg.inputs.benchmark = cmd::cmd_make_bench(d.cfg, options).run_dir.string();
    auto t = Clock::now();
    d.train_run = cmd::cmd_train(d.cfg, options).run_dir;
    d.train_seconds = seconds_since(t);
    d.cfg.inputs.checkpoint = d.train_run.string();
    t = Clock::now();
    d.generate_run = cmd::cmd_generate(d.cfg, options).run_dir;
    d.generate_seconds = seconds_since(t);
    d.cfg.inputs.dataset = d.generate_run.string();
    d.evaluate_run = cmd::cmd_evaluate(d.cfg, options).run_dir;
    d.cfg.inputs.evaluation = d.evaluate_run.string();
    d.report_run = cmd::cmd_report(d.cfg, options).run_dir;
  } catch (const std::exception& e) {
    d.error = e.what();
  }
  d.total_seconds = seconds_since(t0);
  return d;
}

Outcome training_convergence(const DeskRun& d) {
  Checks c;
  if (d.train_run.empty()) return {false, "training did not run: " + d.error};
  std::string summary;
  for (const auto& spec : d.cfg.categories) {
    const json o = read_json(d.train_run / "checkpoints" / spec.category / "training_log.json").at("objective");
    const double initial = o.at("initial"), final_loss = o.at("final"), oracle = o.at("oracle_predictor"),
                 zero = o.at("zero_predictor");
    c.expect(final_loss < 0.5 * initial, fmt("%s: loss %.4f not below half of %.4f", spec.category.c_str(), final_loss,
                                             initial));
    c.expect(oracle == 0.0, fmt("%s: oracle loss %.3g", spec.category.c_str(), oracle));
    c.expect(std::abs(zero - 1.0) <= 0.05, fmt("%s: zero-predictor loss %.4f", spec.category.c_str(), zero));
    summary += fmt("%s loss %.4f -> %.4f, oracle %.1f, zero %.4f; ", spec.category.c_str(), initial, final_loss, oracle,
                   zero);
  }
  c.expect(d.train_seconds <= 900.0, fmt("training took %.0f s", d.train_seconds));
  return c.outcome(summary + fmt("%.0f s", d.train_seconds));
}

Outcome pixel_preservation(const DeskRun& d) {
  Checks c;
  if (d.generate_run.empty()) return {false, "generation did not run: " + d.error};
  std::string summary;
  std::size_t total = 0;
  for (const auto& spec : d.cfg.categories) {
    const json s = read_json(d.generate_run / "dataset" / spec.category / "samples.json");
    const double eps = s.at("codec_mae");
    int over = 0, unadapted = 0;
    double worst = 0.0;
    for (const auto& rec : s.at("samples")) {
      const double mae = rec.at("preservation_mae");
      worst = std::max(worst, mae);
      over += mae > 2.0 * eps;
      unadapted += !rec.at("adapted").get<bool>();
    }
    const std::size_t n = s.at("samples").size();
    total += n;
    c.expect(n >= 50, fmt("%s: only %zu samples", spec.category.c_str(), n));
    c.expect(over == 0, fmt("%s: %d samples above 2*eps", spec.category.c_str(), over));
    c.expect(unadapted == 0, fmt("%s: %d samples not adapted", spec.category.c_str(), unadapted));
    summary += fmt("%s worst %.4f vs 2*eps %.4f over %zu samples; ", spec.category.c_str(), worst, 2.0 * eps, n);
  }
  const double per50 = total ? d.generate_seconds * 50.0 / static_cast<double>(total) : 0.0;
  c.expect(per50 <= 600.0, fmt("%.0f s per 50 samples", per50));
  return c.outcome(summary + fmt("%.0f s per 50 samples", per50));
}

Outcome e2e_uplift(const DeskRun& d) {
  Checks c;
  if (d.evaluate_run.empty()) return {false, "pipeline did not finish: " + d.error};
  const json med = read_json(d.evaluate_run / "evaluation" / "medians.json");
  std::string summary;
  for (const auto& spec : d.cfg.categories) {
    const json& m = med.at(spec.category);
    const double gen = m.at("adabldm").at("ap"), cut = m.at("cut_paste").at("ap"), real = m.at("genuine").at("ap");
    c.expect(gen > cut, fmt("%s: median AP %.4f not above cut-paste %.4f", spec.category.c_str(), gen, cut));
    c.expect(gen >= real, fmt("%s: median AP %.4f below genuine %.4f", spec.category.c_str(), gen, real));
    summary += fmt("%s median AP genuine %.4f, cut-paste %.4f, generated %.4f over %d trials; ", spec.category.c_str(),
                   real, cut, gen, d.cfg.trials.n_trials);
  }
  std::ifstream summary_md(d.report_run / "summary.md");
  std::stringstream report;
  report << summary_md.rdbuf();
  c.expect(report.str().find("| Category | Genuine | Cut-paste | AdaBLDM |") != std::string::npos,
           "report lacks the comparison table");
  c.expect(d.total_seconds <= 2700.0, fmt("pipeline took %.0f s", d.total_seconds));
  std::ifstream table(d.evaluate_run / "evaluation" / "table.md");
  std::cout << table.rdbuf() << std::flush;
  return c.outcome(summary + fmt("%.0f s end to end", d.total_seconds));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks; prints one PASS/FAIL line per criterion"};
  std::string root = "acceptance-runs";
  std::string tiny = std::string(ADABLDM_SOURCE_DIR) + "/configs/tiny.json";
  std::string desk = std::string(ADABLDM_SOURCE_DIR) + "/configs/desk.json";
  std::vector<std::string> only, known;
  int workers = 0;
  app.add_option("--run-root", root, "Directory for the run directories of the pipeline checks");
  app.add_option("--tiny-config", tiny, "Config for the editing, adaptation and replay checks");
  app.add_option("--desk-config", desk, "Config for the training, preservation and end-to-end checks");
  app.add_option("--only", only, "Run only the named criteria");
  app.add_option("--workers", workers, "Worker threads for the desk pipeline (default from the config)");
  app.add_option("--known-failure", known,
                 "Criteria whose FAIL line is still printed but does not change the exit status");
  CLI11_PARSE(app, argc, argv);

  cmd::RunOptions options;
  options.run_root = root;
  const std::vector<std::string> names = {"metric-oracles",      "trimap",          "diffusion",
                                          "editing-identities",  "adaptation",      "training-convergence",
                                          "pixel-preservation",  "e2e-uplift",      "replay-determinism"};
  for (const auto& o : known)
    if (std::find(names.begin(), names.end(), o) == names.end()) {
      std::cerr << "unknown criterion '" << o << "'\n";
      return 2;
    }
  for (const auto& o : only)
    if (std::find(names.begin(), names.end(), o) == names.end()) {
      std::cerr << "unknown criterion '" << o << "'\n";
      return 2;
    }
  auto wanted = [&](const std::string& n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

  std::optional<TinyRun> tiny_run;
  std::string tiny_error;
  auto need_tiny = [&]() -> const TinyRun* {
    if (!tiny_run && tiny_error.empty()) {
      try {
        tiny_run = run_tiny(tiny, options);
      } catch (const std::exception& e) {
        tiny_error = e.what();
      }
    }
    return tiny_run ? &*tiny_run : nullptr;
  };
  std::optional<DeskRun> desk_run;
  auto need_desk = [&]() -> const DeskRun& {
    if (!desk_run) desk_run = run_desk(desk, options, workers);
    return *desk_run;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> suite = {
      {"metric-oracles", metric_oracles},
      {"trimap", trimap_suite},
      {"diffusion", diffusion_suite},
      {"editing-identities",
       [&] { return need_tiny() ? editing_identities(*tiny_run) : Outcome{false, "tiny pipeline: " + tiny_error}; }},
      {"adaptation",
       [&] { return need_tiny() ? adaptation_suite(*tiny_run) : Outcome{false, "tiny pipeline: " + tiny_error}; }},
      {"replay-determinism",
       [&] {
         return need_tiny() ? replay_determinism(*tiny_run, options) : Outcome{false, "tiny pipeline: " + tiny_error};
       }},
      {"training-convergence", [&] { return training_convergence(need_desk()); }},
      {"pixel-preservation", [&] { return pixel_preservation(need_desk()); }},
      {"e2e-uplift", [&] { return e2e_uplift(need_desk()); }},
  };

  int failures = 0;
  for (const auto& [name, check] : suite) {
    if (!wanted(name)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const bool tolerated = std::find(known.begin(), known.end(), name) != known.end();
    failures += !o.pass && !tolerated;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << " (" << fmt("%.1f", seconds_since(t0)) << " s): " << o.detail
              << (!o.pass && tolerated ? " [known failure]" : "") << std::endl;
  }
  return failures == 0 ? 0 : 1;
}

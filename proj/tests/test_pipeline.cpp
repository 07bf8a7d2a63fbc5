#include <cmath>

#include <gtest/gtest.h>

#include "adabldm/errors.hpp"
#include "adabldm/pipeline.hpp"

namespace adabldm::pipeline {
namespace {

using models::ModelGeometry;

ModelGeometry micro_geometry() {
  ModelGeometry g;
  g.image_size = 8;
  g.latent_size = 4;
  g.latent_channels = 2;
  g.codec_widths = {4, 4};
  g.denoiser_channels = 2;
  g.prompt_dim = 4;
  g.time_dim = 4;
  return g;
}

ImageGrid random_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  ImageGrid x(3, size, size);
  for (double& v : x.data) v = uniform(rng, 0.0, 1.0);
  return x;
}

// Smooth two-tone image; the codec can fit a handful of these quickly.
ImageGrid stripe_image(int size, int phase) {
  ImageGrid x(3, size, size);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int xx = 0; xx < size; ++xx)
        x.at(c, y, xx) = 0.5 + 0.3 * std::sin(0.4 * (xx + phase) + 0.7 * c);
  return x;
}

void randomize(nn::ParamSet& ps, std::uint64_t seed, double bound = 0.3) {
  Rng rng(seed);
  for (auto& p : ps.all())
    for (double& v : p.value.values()) v = uniform(rng, -bound, bound);
}

/// Untrained weights with every state flag set; the identities below hold for any weights.
ModelBundle ready_bundle(std::uint64_t seed) {
  ModelBundle b(ModelGeometry::tiny(), seed);
  randomize(b.control.params(), seed + 1, 0.05);
  b.state.codec = b.state.denoiser = b.state.control = true;
  return b;
}

BinaryMask square_mask(int size, int y0, int x0, int side) {
  BinaryMask m(size, size);
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x) m.at(y, x) = 1;
  return m;
}

GenerationConfig short_plan(std::uint64_t seed) {
  GenerationConfig cfg;
  cfg.free_steps = 4;
  cfg.latent_steps = 3;
  cfg.image_steps = 2;
  cfg.seed = seed;
  return cfg;
}

// ---------------------------------------------------------------- dihedral

TEST(Dihedral, GroupStructure) {
  const ImageGrid x = random_image(5, 1);
  EXPECT_EQ(dihedral(x, 0), x);
  ImageGrid r = x;
  for (int i = 0; i < 4; ++i) r = dihedral(r, 1);
  EXPECT_EQ(r, x);
  EXPECT_EQ(dihedral(dihedral(x, 4), 4), x);
  EXPECT_EQ(dihedral(dihedral(x, 1), 1), dihedral(x, 2));
  for (int a = 0; a < 8; ++a)
    for (int b = a + 1; b < 8; ++b) EXPECT_NE(dihedral(x, a), dihedral(x, b)) << a << " " << b;
  EXPECT_THROW(dihedral(x, 8), ParameterError);
}

TEST(Dihedral, QuarterTurnMovesCorners) {
  BinaryMask m(4, 4);
  m.at(0, 0) = 1;
  const BinaryMask r = dihedral(m, 1);
  EXPECT_EQ(r.at(0, 3), 1);
  EXPECT_EQ(r.count(), 1u);
  const BinaryMask f = dihedral(m, 4);
  EXPECT_EQ(f.at(0, 3), 1);
}

TEST(Dihedral, MasksAndImagesStayAligned) {
  const ImageGrid x = random_image(6, 2);
  BinaryMask m(6, 6);
  m.at(1, 4) = 1;
  Trimap t(6, 6, trimap::kObject);
  t.at(1, 4) = trimap::kDefect;
  for (int k = 0; k < 8; ++k) {
    const ImageGrid xk = dihedral(x, k);
    const BinaryMask mk = dihedral(m, k);
    const Trimap tk = dihedral(t, k);
    for (int y = 0; y < 6; ++y)
      for (int xx = 0; xx < 6; ++xx)
        if (mk.at(y, xx)) {
          EXPECT_EQ(xk.at(0, y, xx), x.at(0, 1, 4));
          EXPECT_EQ(tk.at(y, xx), trimap::kDefect);
        }
  }
}

// ---------------------------------------------------------------- loss

TEST(LdmLoss, OraclePredictorGivesZeroLoss) {
  const ModelBundle b(ModelGeometry::tiny(), 3);
  const LdmBatch batch = make_ldm_batch(
      b, {{random_image(32, 4), Trimap(32, 32, trimap::kObject), b.prompt("texture", "good")},
          {random_image(32, 5), Trimap(32, 32, trimap::kObject), b.prompt("texture", "defect")}});
  const auto sched = schedule::default_schedule();
  Rng rng(6);
  const LdmDraws draws = draw_ldm_noise(2, {4, 8, 8}, sched, 0.5, rng);
  const EpsPredictor oracle = [&](const nn::Var&, const std::vector<int>&, const std::vector<PromptSpec>&,
                                  const Tensor*) { return nn::constant(draws.noise); };
  EXPECT_EQ(ldm_loss(batch, sched, draws, oracle)->value[0], 0.0);

  const EpsPredictor zero = [&](const nn::Var& z, const std::vector<int>&, const std::vector<PromptSpec>&,
                                const Tensor*) { return nn::constant(Tensor(z->value.shape())); };
  double expected = 0.0;
  for (double v : draws.noise.values()) expected += v * v;
  expected /= static_cast<double>(draws.noise.size());
  EXPECT_NEAR(ldm_loss(batch, sched, draws, zero)->value[0], expected, 1e-12);
}

TEST(LdmLoss, PredictorSeesNoisedLatentsAndDroppedPrompts) {
  const ModelBundle b(ModelGeometry::tiny(), 7);
  const LdmBatch batch = make_ldm_batch(
      b, {{random_image(32, 8), Trimap(32, 32, trimap::kObject), b.prompt("texture", "defect")}});
  const auto sched = schedule::default_schedule();
  LdmDraws draws;
  draws.timesteps = {321};
  Rng rng(9);
  draws.noise = randn({1, 4, 8, 8}, rng);
  draws.drop_prompt = {true};
  bool called = false;
  const EpsPredictor check = [&](const nn::Var& z, const std::vector<int>& t, const std::vector<PromptSpec>& p,
                                 const Tensor* trimaps) {
    called = true;
    EXPECT_EQ(t, std::vector<int>{321});
    EXPECT_TRUE(p[0].empty);
    EXPECT_EQ(trimaps, nullptr);
    const Tensor expected = schedule::q_sample(batch.latents, 321, draws.noise, sched);
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(z->value[i], expected[i], 1e-14);
    return nn::constant(draws.noise);
  };
  ldm_loss(batch, sched, draws, check, false);
  EXPECT_TRUE(called);
}

TEST(LdmLoss, DrawsReplayFromSeed) {
  const auto sched = schedule::default_schedule();
  Rng a(10), c(10);
  const LdmDraws d1 = draw_ldm_noise(3, {2, 4, 4}, sched, 0.3, a);
  const LdmDraws d2 = draw_ldm_noise(3, {2, 4, 4}, sched, 0.3, c);
  EXPECT_EQ(d1.timesteps, d2.timesteps);
  EXPECT_EQ(d1.noise, d2.noise);
  EXPECT_EQ(d1.drop_prompt, d2.drop_prompt);
  for (int t : d1.timesteps) {
    EXPECT_GE(t, 0);
    EXPECT_LT(t, sched.train_steps);
  }
}

TEST(LdmLoss, RequiresTrainedCodec) {
  const ModelBundle b(ModelGeometry::tiny(), 11);
  const LdmBatch batch =
      make_ldm_batch(b, {{random_image(32, 12), Trimap(32, 32, trimap::kObject), b.prompt("texture", "good")}});
  Rng rng(13);
  EXPECT_THROW(ldm_loss(batch, b, schedule::default_schedule(), rng), StateError);
}

// ---------------------------------------------------------------- training

TEST(Training, CodecReducesReconstructionError) {
  ModelBundle b(ModelGeometry::tiny(), 14);
  std::vector<ImageGrid> images;
  for (int i = 0; i < 6; ++i) images.push_back(stripe_image(32, i * 3));
  CodecTrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 3;
  cfg.holdout_fraction = 0.2;
  Rng rng(15);
  const CodecReport report = train_codec(b, images, cfg, rng);
  ASSERT_EQ(report.epoch_losses.size(), 30u);
  EXPECT_LT(report.epoch_losses.back(), 0.5 * report.epoch_losses.front());
  EXPECT_TRUE(b.state.codec);
  EXPECT_EQ(b.state.codec_mae, report.holdout_mae);
  EXPECT_LT(report.holdout_mae, 0.15);

  // Latents are normalized to zero mean and unit variance.
  double sum = 0.0, sq = 0.0, n = 0.0;
  for (const auto& x : images)
    for (double v : b.encode(x).data) {
      sum += v;
      sq += v * v;
      n += 1.0;
    }
  EXPECT_NEAR(sum / n, 0.0, 0.5);
  EXPECT_NEAR(sq / n - (sum / n) * (sum / n), 1.0, 0.5);
  for (const auto& p : b.decoder.params().all()) EXPECT_FALSE(p.trainable);
}

TEST(Training, DenoiserThenControlFreezesEarlierStages) {
  ModelBundle b(ModelGeometry::tiny(), 16);
  b.state.codec = true;
  const auto sched = schedule::default_schedule();
  std::vector<DiffusionExample> domain;
  std::vector<DefectSample> genuine;
  for (int i = 0; i < 3; ++i) {
    const ImageGrid x = stripe_image(32, 2 * i);
    domain.push_back({x, Trimap(32, 32, trimap::kObject), b.prompt("texture", "good")});
    DefectSample s;
    s.image = x;
    s.mask = square_mask(32, 8 + i, 8, 6);
    s.trimap = trimap::build_trimap(BinaryMask(32, 32, 1), s.mask);
    s.prompt = b.prompt("texture", "defect");
    genuine.push_back(s);
  }
  DiffusionTrainConfig cfg;
  cfg.steps = 40;
  cfg.batch_size = 4;
  cfg.learning_rate = 2e-3;
  cfg.eval_draws = 3;
  Rng rng(17);
  EXPECT_THROW(finetune_control(b, genuine, sched, cfg, rng), StateError);

  const TrainLog pre = pretrain_denoiser(b, domain, sched, cfg, rng);
  EXPECT_EQ(pre.losses.size(), 40u);
  EXPECT_LT(pre.final_eval_loss, pre.initial_eval_loss);
  EXPECT_TRUE(b.state.denoiser);
  EXPECT_FALSE(b.state.control);

  const auto den = b.denoiser.hash(), enc = b.encoder.hash(), dec = b.decoder.hash(), ctl = b.control.hash();
  cfg.steps = 10;
  const TrainLog fine = finetune_control(b, genuine, sched, cfg, rng);
  EXPECT_EQ(fine.losses.size(), 10u);
  EXPECT_TRUE(b.state.ready());
  EXPECT_EQ(b.denoiser.hash(), den);
  EXPECT_EQ(b.encoder.hash(), enc);
  EXPECT_EQ(b.decoder.hash(), dec);
  EXPECT_NE(b.control.hash(), ctl);
}

// ---------------------------------------------------------------- generation

TEST(Generation, EmptyMaskReturnsSourceLatent) {
  const ModelBundle b = ready_bundle(20);
  const ImageGrid x = random_image(32, 21);
  const BinaryMask empty(32, 32);
  const Trimap t = trimap::build_trimap(BinaryMask(32, 32, 1), empty);
  Rng rng(22);
  const auto res = generate(x, t, empty, b.prompt("texture", "defect"), b, schedule::default_schedule(),
                            short_plan(0), rng);
  EXPECT_EQ(res.z, b.encode(x));
  EXPECT_EQ(b.decode(res.z), b.decode(b.encode(x)));
}

TEST(Generation, FullMaskMatchesFreeDiffusion) {
  const ModelBundle b = ready_bundle(23);
  const ImageGrid x = random_image(32, 24);
  const BinaryMask full(32, 32, 1);
  const Trimap t = trimap::build_trimap(full, full);
  const auto sched = schedule::default_schedule();
  const auto prompt = b.prompt("texture", "defect");
  Rng r1(25), r2(25);
  const auto edited = generate(x, t, full, prompt, b, sched, short_plan(0), r1);
  const auto free = free_diffusion(t, prompt, b, sched, 9, 0.0, 1.0, r2);
  std::vector<LatentGrid> denoised;
  for (const auto& e : edited.trace)
    if (e.kind == TraceKind::denoise) denoised.push_back(e.z);
  ASSERT_EQ(denoised.size(), free.trace.size());
  for (std::size_t i = 0; i < denoised.size(); ++i) EXPECT_EQ(denoised[i], free.trace[i].z) << i;
  EXPECT_EQ(edited.z, free.z);
}

TEST(Generation, TraceFollowsStagePlan) {
  const ModelBundle b = ready_bundle(26);
  const ImageGrid x = random_image(32, 27);
  const BinaryMask m = square_mask(32, 10, 10, 8);
  const Trimap t = trimap::build_trimap(BinaryMask(32, 32, 1), m);
  Rng rng(28);
  const auto res = generate(x, t, m, b.prompt("texture", "defect"), b, schedule::default_schedule(), short_plan(0), rng);
  // 4 denoise; 3 x (latent blend, denoise); 2 x (image blend, denoise); final image blend.
  ASSERT_EQ(res.trace.size(), 4u + 6u + 4u + 1u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(res.trace[i].kind, TraceKind::denoise);
  for (int i = 4; i < 10; i += 2) {
    EXPECT_EQ(res.trace[i].kind, TraceKind::latent_blend);
    EXPECT_EQ(res.trace[i].stage, 1);
    // The blend keeps z_ok outside the latent mask.
    for (int c = 0; c < res.z.channels; ++c)
      for (int y = 0; y < 8; ++y)
        for (int xx = 0; xx < 8; ++xx)
          if (!res.latent_mask.at(y, xx)) EXPECT_EQ(res.trace[i].z.at(c, y, xx), res.z_ok.at(c, y, xx));
  }
  for (int i = 10; i < 14; i += 2) EXPECT_EQ(res.trace[i].kind, TraceKind::image_blend);
  EXPECT_EQ(res.trace.back().kind, TraceKind::image_blend);
  EXPECT_EQ(res.trace.back().z, res.z);
  for (std::size_t i = 1; i + 1 < res.trace.size(); ++i)
    EXPECT_GE(res.trace[i - 1].timestep, res.trace[i].timestep);
}

TEST(Generation, DeterministicForSeed) {
  const ModelBundle b = ready_bundle(29);
  const ImageGrid x = random_image(32, 30);
  const BinaryMask m = square_mask(32, 4, 12, 6);
  const Trimap t = trimap::build_trimap(BinaryMask(32, 32, 1), m);
  const auto sched = schedule::default_schedule();
  Rng a(31), c(31), d(32);
  const auto p = b.prompt("texture", "defect");
  const auto r1 = generate(x, t, m, p, b, sched, short_plan(0), a);
  const auto r2 = generate(x, t, m, p, b, sched, short_plan(0), c);
  const auto r3 = generate(x, t, m, p, b, sched, short_plan(0), d);
  EXPECT_EQ(r1.z, r2.z);
  EXPECT_NE(r1.z, r3.z);
}

TEST(Generation, RejectsUntrainedBundleAndMisalignedTrimap) {
  ModelBundle b = ready_bundle(33);
  const ImageGrid x = random_image(32, 34);
  const BinaryMask m = square_mask(32, 4, 4, 5);
  const Trimap t = trimap::build_trimap(BinaryMask(32, 32, 1), m);
  const auto sched = schedule::default_schedule();
  Rng rng(35);
  EXPECT_THROW(generate(x, t, square_mask(32, 5, 4, 5), b.prompt("texture", "defect"), b, sched, short_plan(0), rng),
               PreconditionError);
  b.state.control = false;
  EXPECT_THROW(generate(x, t, m, b.prompt("texture", "defect"), b, sched, short_plan(0), rng), StateError);
  GenerationConfig bad = short_plan(0);
  bad.free_steps = -1;
  EXPECT_THROW(bad.validate(), ParameterError);
}

// ---------------------------------------------------------------- adaptation

TEST(Adaptation, ZeroStepsReproducesPlainDecode) {
  const ModelBundle b = ready_bundle(36);
  Rng rng(37);
  const LatentGrid z = LatentGrid::from_tensor(randn({1, 4, 8, 8}, rng));
  AdaptConfig cfg;
  cfg.steps = 0;
  const auto res = adapt_decoder(z, random_image(32, 38), square_mask(32, 3, 3, 9), b, cfg);
  EXPECT_EQ(res.image, b.decode(z));
  EXPECT_EQ(res.li_initial, res.li_final);
}

TEST(Adaptation, ObjectiveGradientMatchesFiniteDifferences) {
  models::ModelBundle b(micro_geometry(), 39);
  Rng rng(40);
  const LatentGrid z = LatentGrid::from_tensor(randn({1, 2, 4, 4}, rng));
  const ImageGrid x_ok = random_image(8, 41), target = random_image(8, 42);
  const BinaryMask m = square_mask(8, 2, 2, 3);
  models::CodecDecoder d = b.decoder;
  d.params().set_trainable(true);
  ASSERT_LE(d.params().numel(), 1000u);
  auto objective = [&] { return adaptation_objective(d, z, x_ok, m, target, 7.0); };
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
  EXPECT_LT(worst, 1e-3);
}

TEST(Adaptation, ObjectiveSplitsByMask) {
  const models::ModelBundle b(micro_geometry(), 43);
  Rng rng(44);
  const LatentGrid z = LatentGrid::from_tensor(randn({1, 2, 4, 4}, rng));
  const ImageGrid x_ok = random_image(8, 45), target = random_image(8, 46);
  const BinaryMask m = square_mask(8, 1, 1, 4);
  nn::NoGradGuard guard;
  Tensor x = b.decoder.forward(nn::constant(z.tensor()))->value;
  double li = 0.0, ld = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int xx = 0; xx < 8; ++xx) {
        const double v = x[(c * 8 + y) * 8 + xx];
        if (m.at(y, xx))
          ld += (v - target.at(c, y, xx)) * (v - target.at(c, y, xx));
        else
          li += (v - x_ok.at(c, y, xx)) * (v - x_ok.at(c, y, xx));
      }
  double got_li = 0.0, got_ld = 0.0;
  const double total = adaptation_objective(b.decoder, z, x_ok, m, target, 3.0, &got_li, &got_ld)->value[0];
  EXPECT_NEAR(got_li, li, 1e-12);
  EXPECT_NEAR(got_ld, ld, 1e-12);
  EXPECT_NEAR(total, li + 3.0 * ld, 1e-12);
}

TEST(Adaptation, ReducesOutsideErrorAndLeavesBundleUntouched) {
  const ModelBundle b = ready_bundle(47);
  Rng rng(48);
  const LatentGrid z = LatentGrid::from_tensor(randn({1, 4, 8, 8}, rng));
  const ImageGrid x_ok = stripe_image(32, 1);
  const BinaryMask m = square_mask(32, 12, 12, 8);
  const auto before = b.decoder.hash();
  AdaptConfig cfg;
  cfg.steps = 30;
  cfg.learning_rate = 1e-3;
  const auto res = adapt_decoder(z, x_ok, m, b, cfg);
  EXPECT_EQ(res.objective.size(), 30u);
  EXPECT_LT(res.li_final, 0.5 * res.li_initial);
  EXPECT_EQ(b.decoder.hash(), before);
  EXPECT_NE(res.decoder.hash(), before);
  for (double v : res.image.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

// ---------------------------------------------------------------- dataset

DatasetRequest small_request(const ModelBundle& b, int count) {
  DatasetRequest r;
  r.count = count;
  r.sources = {{"ok_0", stripe_image(32, 0), BinaryMask(32, 32, 1)},
               {"ok_1", stripe_image(32, 5), BinaryMask(32, 32, 1)}};
  r.seed_masks = {square_mask(32, 0, 0, 5), square_mask(32, 3, 3, 7)};
  r.prompts = {b.prompt("texture", "defect")};
  return r;
}

AdaptConfig quick_adapt() {
  AdaptConfig a;
  a.steps = 2;
  return a;
}

TEST(Dataset, SamplesArePureFunctionsOfTheirSeed) {
  const ModelBundle b = ready_bundle(49);
  const auto sched = schedule::default_schedule();
  DatasetRequest req = small_request(b, 3);
  const auto gen = short_plan(50);
  const DatasetResult serial = generate_dataset(req, b, sched, gen, quick_adapt());
  ASSERT_EQ(serial.samples.size(), 3u);
  req.workers = 2;
  const DatasetResult threaded = generate_dataset(req, b, sched, gen, quick_adapt());
  ASSERT_EQ(threaded.samples.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(serial.samples[i].image, threaded.samples[i].image);
    EXPECT_EQ(serial.samples[i].mask, threaded.samples[i].mask);
    EXPECT_EQ(serial.samples[i].seed, sample_seed(50, i));
    EXPECT_TRUE(serial.samples[i].adapted);
    EXPECT_NO_THROW(serial.samples[i].validate());
  }
  const DefectSample again = generate_sample(sample_seed(50, 1), req, b, sched, gen, quick_adapt());
  EXPECT_EQ(again.image, serial.samples[1].image);
  EXPECT_EQ(again.trimap, serial.samples[1].trimap);
}

TEST(Dataset, UnplaceableMasksAreSkipped) {
  const ModelBundle b = ready_bundle(51);
  DatasetRequest req = small_request(b, 2);
  // A foreground of four isolated pixels cannot hold any seed shape.
  BinaryMask sparse(32, 32);
  sparse.at(1, 1) = sparse.at(1, 20) = sparse.at(20, 1) = sparse.at(20, 20) = 1;
  for (auto& s : req.sources) s.foreground = sparse;
  req.retry_budget = 2;
  const DatasetResult res = generate_dataset(req, b, schedule::default_schedule(), short_plan(52), quick_adapt());
  EXPECT_TRUE(res.samples.empty());
  ASSERT_EQ(res.skipped_seeds.size(), 2u);
  EXPECT_EQ(res.skipped_seeds[0], sample_seed(52, 0));
  EXPECT_EQ(res.retries, 6);
}

TEST(Dataset, ValidatesRequest) {
  const ModelBundle b = ready_bundle(53);
  DatasetRequest req = small_request(b, 1);
  req.sources.clear();
  EXPECT_THROW(generate_dataset(req, b, schedule::default_schedule(), short_plan(0), quick_adapt()), ParameterError);
  req = small_request(b, 1);
  req.workers = 0;
  EXPECT_THROW(generate_dataset(req, b, schedule::default_schedule(), short_plan(0), quick_adapt()), ParameterError);
}

}  // namespace
}  // namespace adabldm::pipeline

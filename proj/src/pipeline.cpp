#include "adabldm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <thread>

#include "adabldm/errors.hpp"
#include "adabldm/optim.hpp"

namespace adabldm::pipeline {

using models::CodecDecoder;
using models::ConditionSet;

// ---------------------------------------------------------------- configs

void GenerationConfig::validate() const {
  ADABLDM_CHECK(free_steps >= 0 && latent_steps >= 0 && image_steps >= 0, ParameterError,
                "generation: stage step counts must be non-negative");
  ADABLDM_CHECK(free_steps + latent_steps + image_steps >= 1, ParameterError,
                "generation: at least one denoising step is required");
  ADABLDM_CHECK(eta >= 0.0, ParameterError, "generation: eta must be non-negative");
  ADABLDM_CHECK(std::isfinite(guidance_scale), ParameterError, "generation: guidance scale must be finite");
}

void AdaptConfig::validate() const {
  ADABLDM_CHECK(steps >= 0, ParameterError, "adaptation: step count must be non-negative");
  ADABLDM_CHECK(lambda_con >= 0.0, ParameterError, "adaptation: lambda_con must be non-negative");
  ADABLDM_CHECK(learning_rate > 0.0, ParameterError, "adaptation: learning rate must be positive");
  ADABLDM_CHECK(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ParameterError,
                "adaptation: moment decay rates must lie in [0,1)");
}

void DefectSample::validate() const {
  ADABLDM_CHECK(image.channels == 3 && image.height == mask.height && image.width == mask.width, PreconditionError,
                "defect sample: mask not aligned with image");
  ADABLDM_CHECK(!mask.none(), PreconditionError, "defect sample: empty mask");
  ADABLDM_CHECK(trimap.height == mask.height && trimap.width == mask.width, PreconditionError,
                "defect sample: trimap not aligned with image");
  for (double v : image.data) ADABLDM_CHECK(v >= 0.0 && v <= 1.0, PreconditionError, "defect sample: pixel outside [0,1]");
  for (auto v : mask.data) ADABLDM_CHECK(v <= 1, PreconditionError, "defect sample: mask not binary");
}

// ---------------------------------------------------------------- helpers

namespace {

// Maps (y, x) of an n x n grid through dihedral element k.
std::pair<int, int> dihedral_map(int y, int x, int n, int k) {
  if (k >= 4) x = n - 1 - x;
  for (int r = 0; r < k % 4; ++r) {
    const int ny = x, nx = n - 1 - y;
    y = ny;
    x = nx;
  }
  return {y, x};
}

template <class Grid, class Copy>
Grid dihedral_grid(const Grid& in, int n, int k, Copy copy) {
  ADABLDM_CHECK(k >= 0 && k < 8, ParameterError, "dihedral: index must be in [0,8)");
  Grid out = in;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const auto [oy, ox] = dihedral_map(y, x, n, k);
      copy(out, oy, ox, y, x);
    }
  return out;
}

Tensor image_batch(const std::vector<const ImageGrid*>& images) {
  const ImageGrid& first = *images.front();
  Tensor t({static_cast<int>(images.size()), first.channels, first.height, first.width});
  const std::size_t sz = first.data.size();
  for (std::size_t i = 0; i < images.size(); ++i) std::copy(images[i]->data.begin(), images[i]->data.end(), t.data() + i * sz);
  return t;
}

Tensor mask_weights(const BinaryMask& m, bool invert) {
  Tensor w({1, 3, m.height, m.width});
  const std::size_t plane = m.data.size();
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) w[c * plane + i] = (m.data[i] != 0) != invert ? 1.0 : 0.0;
  return w;
}

ImageGrid decode_with(const CodecDecoder& decoder, const LatentGrid& z) {
  nn::NoGradGuard guard;
  Tensor out = decoder.forward(nn::constant(z.tensor()))->value;
  for (double& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return ImageGrid::from_tensor(out);
}

/// Rows `rows` of an (N,...) tensor.
Tensor gather_batch(const Tensor& t, const std::vector<int>& rows) {
  std::vector<int> shape = t.shape();
  const std::size_t per = t.size() / static_cast<std::size_t>(shape[0]);
  shape[0] = static_cast<int>(rows.size());
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(t.data() + rows[i] * per, t.data() + (rows[i] + 1) * per, out.data() + i * per);
  return out;
}

LdmBatch subset(const LdmBatch& b, const std::vector<int>& rows) {
  LdmBatch out;
  out.latents = gather_batch(b.latents, rows);
  out.trimaps = gather_batch(b.trimaps, rows);
  for (int r : rows) out.prompts.push_back(b.prompts[r]);
  return out;
}

/// Encoded training pool, optionally with all eight dihedral variants.
LdmBatch encode_pool(const ModelBundle& bundle, const std::vector<DiffusionExample>& examples, bool augment) {
  std::vector<DiffusionExample> all;
  for (int k = 0; k < (augment ? 8 : 1); ++k)
    for (const auto& e : examples) all.push_back({dihedral(e.image, k), dihedral(e.trimap, k), e.prompt});
  return make_ldm_batch(bundle, all);
}

std::vector<int> sample_rows(int pool, int batch, Rng& rng) {
  std::vector<int> rows(batch);
  for (int& r : rows) r = uniform_int(rng, 0, pool - 1);
  return rows;
}

/// Shared loop of the two diffusion training phases.
TrainLog fit_diffusion(ModelBundle& bundle, const LdmBatch& pool, const LdmBatch& eval, const NoiseSchedule& sched,
                       const DiffusionTrainConfig& cfg, std::vector<nn::Parameter*> params, bool use_trimaps,
                       Rng& rng) {
  ADABLDM_CHECK(cfg.steps >= 0 && cfg.batch_size >= 1, ParameterError, "training: bad step or batch count");
  ADABLDM_CHECK(cfg.prompt_dropout >= 0.0 && cfg.prompt_dropout <= 1.0, ParameterError,
                "training: prompt dropout must be a probability");
  const std::uint64_t eval_seed = derive_seed(0x5eed, "ldm_eval");
  TrainLog log;
  log.initial_eval_loss = evaluate_ldm_loss(bundle, eval, sched, eval_seed, 4, false, use_trimaps);
  nn::AdamW opt(std::move(params), {.learning_rate = cfg.learning_rate, .weight_decay = cfg.weight_decay});
  const auto predictor = bundle_predictor(bundle);
  for (int step = 0; step < cfg.steps; ++step) {
    opt.set_learning_rate(nn::cosine_lr(cfg.learning_rate, step, cfg.steps));
    const LdmBatch batch = subset(pool, sample_rows(pool.size(), cfg.batch_size, rng));
    const LdmDraws draws = draw_ldm_noise(batch.size(), {bundle.geometry().latent_channels,
                                                         bundle.geometry().latent_size, bundle.geometry().latent_size},
                                          sched, cfg.prompt_dropout, rng);
    opt.zero_grad();
    const nn::Var loss = ldm_loss(batch, sched, draws, predictor, use_trimaps);
    nn::backward(loss);
    opt.step();
    log.losses.push_back(loss->value[0]);
  }
  log.final_eval_loss = evaluate_ldm_loss(bundle, eval, sched, eval_seed, 4, false, use_trimaps);
  return log;
}

LdmBatch eval_subset(const LdmBatch& pool, int originals, int limit) {
  std::vector<int> rows(std::min(originals, std::max(1, limit)));
  std::iota(rows.begin(), rows.end(), 0);
  return subset(pool, rows);
}

}  // namespace

ImageGrid dihedral(const ImageGrid& x, int k) {
  ADABLDM_CHECK(x.height == x.width, ParameterError, "dihedral: image must be square");
  return dihedral_grid(x, x.height, k, [&](ImageGrid& out, int oy, int ox, int y, int xx) {
    for (int c = 0; c < x.channels; ++c) out.at(c, oy, ox) = x.at(c, y, xx);
  });
}

BinaryMask dihedral(const BinaryMask& m, int k) {
  ADABLDM_CHECK(m.height == m.width, ParameterError, "dihedral: mask must be square");
  return dihedral_grid(m, m.height, k, [&](BinaryMask& out, int oy, int ox, int y, int x) { out.at(oy, ox) = m.at(y, x); });
}

Trimap dihedral(const Trimap& t, int k) {
  ADABLDM_CHECK(t.height == t.width, ParameterError, "dihedral: trimap must be square");
  return dihedral_grid(t, t.height, k, [&](Trimap& out, int oy, int ox, int y, int x) { out.at(oy, ox) = t.at(y, x); });
}

LdmBatch make_ldm_batch(const ModelBundle& bundle, const std::vector<DiffusionExample>& examples) {
  ADABLDM_CHECK(!examples.empty(), ParameterError, "ldm batch: no examples");
  const auto& g = bundle.geometry();
  LdmBatch b;
  const int n = static_cast<int>(examples.size());
  b.latents = Tensor({n, g.latent_channels, g.latent_size, g.latent_size});
  b.trimaps = Tensor({n, 1, g.image_size, g.image_size});
  const std::size_t lat = b.latents.size() / n, tri = b.trimaps.size() / n;
  constexpr int kChunk = 32;
  for (int start = 0; start < n; start += kChunk) {
    std::vector<const ImageGrid*> chunk;
    for (int i = start; i < std::min(n, start + kChunk); ++i) chunk.push_back(&examples[i].image);
    const Tensor z = bundle.encode_batch(image_batch(chunk));
    std::copy(z.data(), z.data() + z.size(), b.latents.data() + start * lat);
  }
  for (int i = 0; i < n; ++i) {
    const auto& t = examples[i].trimap;
    ADABLDM_CHECK(t.height == g.image_size && t.width == g.image_size, ParameterError,
                  "ldm batch: trimap does not match the image size");
    std::copy(t.data.begin(), t.data.end(), b.trimaps.data() + i * tri);
    b.prompts.push_back(examples[i].prompt);
  }
  return b;
}

// ---------------------------------------------------------------- codec

void random_occlusions(ImageGrid& x, Rng& rng) {
  const int n = uniform_int(rng, 1, 3);
  const double r_max = std::max(2.0, x.height / 6.0);
  for (int k = 0; k < n; ++k) {
    const double cy = uniform(rng, 0.0, x.height - 1.0), cx = uniform(rng, 0.0, x.width - 1.0);
    const double ry = uniform(rng, 2.0, r_max), rx = uniform(rng, 2.0, r_max);
    const double theta = uniform(rng, 0.0, std::numbers::pi);
    const double alpha = uniform(rng, 0.3, 1.0);
    double color[3];
    for (double& c : color) c = uniform(rng, 0.0, 1.0);
    const double cs = std::cos(theta), sn = std::sin(theta);
    for (int y = 0; y < x.height; ++y)
      for (int xx = 0; xx < x.width; ++xx) {
        const double dy = y - cy, dx = xx - cx;
        const double u = (dx * cs + dy * sn) / rx, v = (-dx * sn + dy * cs) / ry;
        if (u * u + v * v > 1.0) continue;
        for (int c = 0; c < x.channels; ++c) x.at(c, y, xx) = (1.0 - alpha) * x.at(c, y, xx) + alpha * color[c % 3];
      }
  }
}

CodecReport train_codec(ModelBundle& bundle, const std::vector<ImageGrid>& images, const CodecTrainConfig& cfg,
                        Rng& rng) {
  ADABLDM_CHECK(!images.empty(), ParameterError, "train_codec: empty dataset");
  ADABLDM_CHECK(cfg.epochs >= 0 && cfg.batch_size >= 1, ParameterError, "train_codec: bad epoch or batch count");
  ADABLDM_CHECK(cfg.holdout_fraction >= 0.0 && cfg.holdout_fraction < 1.0, ParameterError,
                "train_codec: holdout fraction must be in [0,1)");
  ADABLDM_CHECK(cfg.occlusion_probability >= 0.0 && cfg.occlusion_probability <= 1.0, ParameterError,
                "train_codec: occlusion probability must be in [0,1]");
  const int n = static_cast<int>(images.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  int n_hold = static_cast<int>(std::lround(cfg.holdout_fraction * n));
  if (cfg.holdout_fraction > 0.0) n_hold = std::max(1, n_hold);
  if (n_hold >= n) n_hold = n - 1;
  std::vector<int> holdout(order.begin(), order.begin() + n_hold), train(order.begin() + n_hold, order.end());
  // A single image is both trained on and measured.
  if (holdout.empty()) holdout = train;

  bundle.set_latent_statistics(0.0, 1.0);
  bundle.encoder.params().set_trainable(true);
  bundle.decoder.params().set_trainable(true);
  nn::AdamW opt(nn::trainable_params({&bundle.encoder.params(), &bundle.decoder.params()}),
                {.learning_rate = cfg.learning_rate, .weight_decay = cfg.weight_decay});
  const int batches_per_epoch = (static_cast<int>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long total = static_cast<long>(batches_per_epoch) * cfg.epochs;
  long step = 0;
  CodecReport report;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double epoch_loss = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      std::vector<ImageGrid> views;
      for (int i = b * cfg.batch_size; i < std::min<int>(train.size(), (b + 1) * cfg.batch_size); ++i) {
        views.push_back(cfg.augment ? dihedral(images[train[i]], uniform_int(rng, 0, 7)) : images[train[i]]);
        if (cfg.occlusion_probability > 0.0 && uniform(rng, 0.0, 1.0) < cfg.occlusion_probability)
          random_occlusions(views.back(), rng);
      }
      std::vector<const ImageGrid*> chunk;
      for (const auto& v : views) chunk.push_back(&v);
      const Tensor x = image_batch(chunk);
      opt.set_learning_rate(nn::cosine_lr(cfg.learning_rate, step++, total));
      opt.zero_grad();
      const nn::Var loss = nn::mean_squared_error(bundle.decoder.forward(bundle.encoder.forward(nn::constant(x))), x);
      nn::backward(loss);
      opt.step();
      epoch_loss += loss->value[0] * static_cast<double>(chunk.size());
    }
    report.epoch_losses.push_back(epoch_loss / static_cast<double>(train.size()));
  }

  // Normalize latents to zero mean, unit variance over the training images.
  double sum = 0.0, sum_sq = 0.0, count = 0.0;
  for (int i : train) {
    const LatentGrid z = bundle.encode(images[i]);
    for (double v : z.data) {
      sum += v;
      sum_sq += v * v;
      count += 1.0;
    }
  }
  const double mean = sum / count;
  const double var = std::max(sum_sq / count - mean * mean, 1e-12);
  bundle.set_latent_statistics(mean, 1.0 / std::sqrt(var));

  double mae = 0.0;
  for (int i : holdout) mae += mean_abs_error(bundle.decode(bundle.encode(images[i])), images[i]);
  report.holdout_mae = mae / static_cast<double>(holdout.size());
  bundle.encoder.params().set_trainable(false);
  bundle.decoder.params().set_trainable(false);
  bundle.state.codec = true;
  bundle.state.codec_mae = report.holdout_mae;
  return report;
}

// ---------------------------------------------------------------- diffusion loss

LdmDraws draw_ldm_noise(int batch, const std::vector<int>& latent_shape, const NoiseSchedule& sched,
                        double prompt_dropout, Rng& rng) {
  ADABLDM_CHECK(batch >= 1 && latent_shape.size() == 3, ParameterError, "draw_ldm_noise: bad batch shape");
  LdmDraws d;
  for (int i = 0; i < batch; ++i) d.timesteps.push_back(uniform_int(rng, 0, sched.train_steps - 1));
  d.noise = randn({batch, latent_shape[0], latent_shape[1], latent_shape[2]}, rng);
  for (int i = 0; i < batch; ++i) d.drop_prompt.push_back(prompt_dropout > 0.0 && uniform(rng, 0.0, 1.0) < prompt_dropout);
  return d;
}

EpsPredictor bundle_predictor(const ModelBundle& bundle) {
  return [&bundle](const nn::Var& z_t, const std::vector<int>& t, const std::vector<PromptSpec>& prompts,
                   const Tensor* trimaps) {
    return bundle.predict_eps(z_t, t, bundle.prompt_batch(prompts), trimaps ? nn::constant(*trimaps) : nullptr);
  };
}

nn::Var ldm_loss(const LdmBatch& batch, const NoiseSchedule& sched, const LdmDraws& draws,
                 const EpsPredictor& predictor, bool use_trimaps) {
  const int n = batch.size();
  ADABLDM_CHECK(n >= 1, ParameterError, "ldm_loss: empty batch");
  ADABLDM_CHECK(batch.latents.ndim() == 4 && batch.latents.dim(0) == n, ParameterError,
                "ldm_loss: latents do not match the prompt count");
  ADABLDM_CHECK(draws.noise.same_shape(batch.latents) && static_cast<int>(draws.timesteps.size()) == n &&
                    static_cast<int>(draws.drop_prompt.size()) == n,
                ParameterError, "ldm_loss: draws do not match the batch");
  Tensor z_t(batch.latents.shape());
  const std::size_t per = z_t.size() / n;
  for (int i = 0; i < n; ++i) {
    const int t = draws.timesteps[i];
    ADABLDM_CHECK(t >= 0 && t < sched.train_steps, ParameterError, "ldm_loss: timestep out of range");
    const double a = std::sqrt(sched.alpha_bars[t]), b = std::sqrt(1.0 - sched.alpha_bars[t]);
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) z_t[k] = a * batch.latents[k] + b * draws.noise[k];
  }
  std::vector<PromptSpec> prompts = batch.prompts;
  for (int i = 0; i < n; ++i)
    if (draws.drop_prompt[i]) prompts[i] = PromptSpec::null();
  const nn::Var eps = predictor(nn::constant(std::move(z_t)), draws.timesteps, prompts,
                                use_trimaps ? &batch.trimaps : nullptr);
  return nn::mean_squared_error(eps, draws.noise);
}

nn::Var ldm_loss(const LdmBatch& batch, const ModelBundle& bundle, const NoiseSchedule& sched, Rng& rng,
                 double prompt_dropout, bool use_trimaps) {
  ADABLDM_CHECK(bundle.state.codec, StateError, "ldm_loss: the codec is not trained");
  const auto& g = bundle.geometry();
  const LdmDraws draws =
      draw_ldm_noise(batch.size(), {g.latent_channels, g.latent_size, g.latent_size}, sched, prompt_dropout, rng);
  return ldm_loss(batch, sched, draws, bundle_predictor(bundle), use_trimaps);
}

double evaluate_ldm_loss(const ModelBundle& bundle, const LdmBatch& batch, const NoiseSchedule& sched,
                         std::uint64_t seed, int repeats, bool shuffle_trimaps, bool use_trimaps) {
  ADABLDM_CHECK(repeats >= 1, ParameterError, "evaluate_ldm_loss: repeats must be positive");
  LdmBatch b = batch;
  if (shuffle_trimaps && b.size() > 1) {
    std::vector<int> rows(b.size());
    for (int i = 0; i < b.size(); ++i) rows[i] = (i + 1) % b.size();
    b.trimaps = gather_batch(batch.trimaps, rows);
  }
  nn::NoGradGuard guard;
  Rng rng(seed);
  const auto predictor = bundle_predictor(bundle);
  const auto& g = bundle.geometry();
  double total = 0.0;
  for (int r = 0; r < repeats; ++r) {
    const LdmDraws draws = draw_ldm_noise(b.size(), {g.latent_channels, g.latent_size, g.latent_size}, sched, 0.0, rng);
    total += ldm_loss(b, sched, draws, predictor, use_trimaps)->value[0];
  }
  return total / repeats;
}

TrainLog pretrain_denoiser(ModelBundle& bundle, const std::vector<DiffusionExample>& domain,
                           const NoiseSchedule& sched, const DiffusionTrainConfig& cfg, Rng& rng) {
  ADABLDM_CHECK(bundle.state.codec, StateError, "pretrain_denoiser: the codec is not trained");
  ADABLDM_CHECK(!domain.empty(), ParameterError, "pretrain_denoiser: empty domain dataset");
  bundle.denoiser.params().set_trainable(true);
  bundle.prompts.params().set_trainable(true);
  const LdmBatch pool = encode_pool(bundle, domain, cfg.augment);
  const LdmBatch eval = eval_subset(pool, static_cast<int>(domain.size()), cfg.eval_draws);
  TrainLog log = fit_diffusion(bundle, pool, eval, sched, cfg,
                               nn::trainable_params({&bundle.denoiser.params(), &bundle.prompts.params()}), false, rng);
  bundle.denoiser.params().set_trainable(false);
  bundle.control.initialize_from(bundle.denoiser);
  bundle.state.denoiser = true;
  bundle.state.control = false;
  return log;
}

TrainLog finetune_control(ModelBundle& bundle, const std::vector<DefectSample>& genuine, const NoiseSchedule& sched,
                          const DiffusionTrainConfig& cfg, Rng& rng) {
  ADABLDM_CHECK(!genuine.empty(), ParameterError, "finetune_control: at least one defect sample is required");
  ADABLDM_CHECK(bundle.state.denoiser, StateError, "finetune_control: the denoiser is not pretrained");
  const auto den_hash = bundle.denoiser.hash(), enc_hash = bundle.encoder.hash(), dec_hash = bundle.decoder.hash();
  bundle.denoiser.params().set_trainable(false);
  bundle.trimap_embedder.params().set_trainable(true);
  bundle.control.params().set_trainable(true);
  bundle.prompts.params().set_trainable(true);

  std::vector<DiffusionExample> examples;
  for (const auto& s : genuine) examples.push_back({s.image, s.trimap, s.prompt});
  const LdmBatch pool = encode_pool(bundle, examples, cfg.augment);
  const LdmBatch eval = eval_subset(pool, static_cast<int>(examples.size()), cfg.eval_draws);
  TrainLog log = fit_diffusion(bundle, pool, eval, sched, cfg,
                               nn::trainable_params({&bundle.trimap_embedder.params(), &bundle.control.params(),
                                                     &bundle.prompts.params()}),
                               true, rng);
  ADABLDM_CHECK(bundle.denoiser.hash() == den_hash && bundle.encoder.hash() == enc_hash &&
                    bundle.decoder.hash() == dec_hash,
                StateError, "finetune_control: frozen weights changed during fine-tuning");
  bundle.state.control = true;
  return log;
}

// ---------------------------------------------------------------- generation

namespace {

LatentGrid select(const LatentMask& m, const LatentGrid& inside, const LatentGrid& outside) {
  LatentGrid out = outside;
  const std::size_t plane = inside.plane();
  for (int c = 0; c < inside.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      if (m.data[i]) out.data[c * plane + i] = inside.data[c * plane + i];
  return out;
}

ImageGrid select(const BinaryMask& m, const ImageGrid& inside, const ImageGrid& outside) {
  ImageGrid out = outside;
  const std::size_t plane = inside.plane();
  for (int c = 0; c < inside.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      if (m.data[i]) out.data[c * plane + i] = inside.data[c * plane + i];
  return out;
}

struct Sampler {
  const ModelBundle& bundle;
  const NoiseSchedule& sched;
  ConditionSet cond;
  double eta;
  double guidance;
  Rng& rng;

  LatentGrid step(const LatentGrid& z, int t, int t_prev) const {
    const LatentGrid eps = bundle.denoise_eps(z, t, cond, guidance);
    return LatentGrid::from_tensor(schedule::ddim_step(z.tensor(), eps.tensor(), t, t_prev, sched, eta, rng));
  }
};

void check_ready(const ModelBundle& bundle) {
  ADABLDM_CHECK(bundle.state.ready(), StateError,
                "generation requires a trained codec, denoiser and control branch");
}

LatentGrid initial_latent(const ModelBundle& bundle, Rng& rng) {
  const auto& g = bundle.geometry();
  return LatentGrid::from_tensor(randn({1, g.latent_channels, g.latent_size, g.latent_size}, rng));
}

}  // namespace

GenerationResult generate(const ImageGrid& x_ok, const Trimap& trimap, const BinaryMask& defect_mask,
                          const PromptSpec& prompt, const ModelBundle& bundle, const NoiseSchedule& sched,
                          const GenerationConfig& cfg, Rng& rng) {
  cfg.validate();
  check_ready(bundle);
  const auto& g = bundle.geometry();
  ADABLDM_CHECK(x_ok.channels == 3 && x_ok.height == g.image_size && x_ok.width == g.image_size, ParameterError,
                "generate: source image does not match the model geometry");
  ADABLDM_CHECK(defect_mask.height == g.image_size && defect_mask.width == g.image_size, ParameterError,
                "generate: defect mask does not match the image size");
  ADABLDM_CHECK(trimap.height == g.image_size && trimap.width == g.image_size, ParameterError,
                "generate: trimap does not match the image size");
  ADABLDM_CHECK(trimap::split_trimap(trimap).second == defect_mask, PreconditionError,
                "generate: trimap defect region differs from the defect mask");

  const auto plan = schedule::plan_timesteps(sched.train_steps, cfg.free_steps, cfg.latent_steps, cfg.image_steps);
  GenerationResult res;
  res.z_ok = bundle.encode(x_ok);
  res.latent_mask = trimap::dilate_downsample(defect_mask, g.latent_size, g.latent_size);
  const Sampler sampler{bundle, sched, {bundle.embed_prompt(prompt), trimap}, cfg.eta, cfg.guidance_scale, rng};
  const bool full_mask = defect_mask.all();

  // A full pixel mask keeps every decoded pixel, so the codec round trip is skipped.
  auto pixel_blend = [&](const LatentGrid& z) {
    if (full_mask) return z;
    return bundle.encode(select(defect_mask, bundle.decode(z), x_ok));
  };

  LatentGrid z = initial_latent(bundle, rng);
  for (int i = 0; i < plan.size(); ++i) {
    const int stage = i < plan.stage_boundaries[0] ? 0 : (i < plan.stage_boundaries[1] ? 1 : 2);
    const int t = plan.steps[i];
    if (stage == 1) {
      z = select(res.latent_mask, z, res.z_ok);
      res.trace.push_back({stage, TraceKind::latent_blend, t, z});
    } else if (stage == 2) {
      z = pixel_blend(z);
      res.trace.push_back({stage, TraceKind::image_blend, t, z});
    }
    z = sampler.step(z, t, plan.previous(i));
    res.trace.push_back({stage, TraceKind::denoise, t, z});
  }
  // The image-editing loop also visits t = 0 after the last denoising step:
  // the clean latent is blended once more before it is returned.
  z = pixel_blend(z);
  res.trace.push_back({2, TraceKind::image_blend, -1, z});
  res.z = std::move(z);
  return res;
}

GenerationResult free_diffusion(const Trimap& trimap, const PromptSpec& prompt, const ModelBundle& bundle,
                                const NoiseSchedule& sched, int steps, double eta, double guidance_scale, Rng& rng) {
  check_ready(bundle);
  const auto plan = schedule::plan_timesteps(sched.train_steps, steps, 0, 0);
  const Sampler sampler{bundle, sched, {bundle.embed_prompt(prompt), trimap}, eta, guidance_scale, rng};
  GenerationResult res;
  LatentGrid z = initial_latent(bundle, rng);
  for (int i = 0; i < plan.size(); ++i) {
    z = sampler.step(z, plan.steps[i], plan.previous(i));
    res.trace.push_back({0, TraceKind::denoise, plan.steps[i], z});
  }
  res.z = std::move(z);
  return res;
}

// ---------------------------------------------------------------- adaptation

nn::Var adaptation_objective(const CodecDecoder& decoder, const LatentGrid& z_star, const ImageGrid& x_ok,
                             const BinaryMask& mask, const ImageGrid& target, double lambda_con, double* li,
                             double* ld) {
  ADABLDM_CHECK(x_ok.same_shape(target) && x_ok.height == mask.height && x_ok.width == mask.width, ParameterError,
                "adaptation: image, target and mask shapes differ");
  const nn::Var x = decoder.forward(nn::constant(z_star.tensor()));
  const nn::Var loss_i = nn::weighted_squared_sum(x, x_ok.tensor(), mask_weights(mask, true));
  const nn::Var loss_d = nn::weighted_squared_sum(x, target.tensor(), mask_weights(mask, false));
  if (li) *li = loss_i->value[0];
  if (ld) *ld = loss_d->value[0];
  return nn::add(loss_i, nn::scale(loss_d, lambda_con));
}

AdaptResult adapt_decoder(const LatentGrid& z_star, const ImageGrid& x_ok, const BinaryMask& mask,
                          const ModelBundle& bundle, const AdaptConfig& cfg) {
  cfg.validate();
  ADABLDM_CHECK(x_ok.height == mask.height && x_ok.width == mask.width, ParameterError,
                "adapt_decoder: mask not aligned with the source image");
  for (auto v : mask.data) ADABLDM_CHECK(v <= 1, ParameterError, "adapt_decoder: mask must be binary");

  AdaptResult res;
  res.decoder = bundle.decoder;
  res.decoder.params().set_trainable(true);
  // The anchor is decoded once by the pristine decoder and then held fixed.
  const ImageGrid target = bundle.decode(z_star);
  nn::AdamW opt(nn::trainable_params({&res.decoder.params()}),
                {.learning_rate = cfg.learning_rate, .beta1 = cfg.beta1, .beta2 = cfg.beta2,
                 .weight_decay = cfg.weight_decay});
  for (int step = 0; step < cfg.steps; ++step) {
    double li = 0.0, ld = 0.0;
    opt.zero_grad();
    const nn::Var obj = adaptation_objective(res.decoder, z_star, x_ok, mask, target, cfg.lambda_con, &li, &ld);
    nn::backward(obj);
    opt.step();
    res.objective.push_back(obj->value[0]);
    res.li.push_back(li);
    res.ld.push_back(ld);
  }
  {
    nn::NoGradGuard guard;
    double li = 0.0, ld = 0.0;
    adaptation_objective(bundle.decoder, z_star, x_ok, mask, target, cfg.lambda_con, &li, &ld);
    res.li_initial = li;
    adaptation_objective(res.decoder, z_star, x_ok, mask, target, cfg.lambda_con, &li, &ld);
    res.li_final = li;
    res.ld_final = ld;
  }
  res.decoder.params().set_trainable(false);
  res.image = decode_with(res.decoder, z_star);
  return res;
}

// ---------------------------------------------------------------- dataset

std::uint64_t sample_seed(std::uint64_t top_seed, int index) {
  return derive_seed(top_seed, "sample", static_cast<std::uint64_t>(index));
}

namespace {

void validate_request(const DatasetRequest& r, const ModelBundle& bundle) {
  ADABLDM_CHECK(r.count >= 0, ParameterError, "dataset: negative sample count");
  ADABLDM_CHECK(r.retry_budget >= 0 && r.workers >= 1, ParameterError, "dataset: bad retry budget or worker count");
  if (r.count == 0) return;
  ADABLDM_CHECK(!r.sources.empty(), ParameterError, "dataset: no defect-free source images");
  ADABLDM_CHECK(!r.seed_masks.empty(), ParameterError, "dataset: no seed defect masks");
  ADABLDM_CHECK(!r.prompts.empty(), ParameterError, "dataset: no prompts");
  const int size = bundle.geometry().image_size;
  for (const auto& s : r.sources) {
    ADABLDM_CHECK(s.image.height == size && s.image.width == size && s.foreground.height == size &&
                      s.foreground.width == size,
                  ParameterError, "dataset: source " + s.id + " does not match the model image size");
  }
}

}  // namespace

DefectSample generate_sample(std::uint64_t seed, const DatasetRequest& request, const ModelBundle& bundle,
                             const NoiseSchedule& sched, const GenerationConfig& gen, const AdaptConfig& adapt,
                             int* retries) {
  for (int attempt = 0; attempt <= request.retry_budget; ++attempt) {
    Rng rng(derive_seed(seed, "attempt", static_cast<std::uint64_t>(attempt)));
    const OkSource& src = request.sources[uniform_int(rng, 0, static_cast<int>(request.sources.size()) - 1)];
    const PromptSpec prompt = request.prompts[uniform_int(rng, 0, static_cast<int>(request.prompts.size()) - 1)];
    trimap::SynthesizedMask synth;
    try {
      synth = trimap::synth_defect_mask(request.seed_masks, src.foreground, request.mask_options, rng);
    } catch (const FitError&) {
      if (retries) ++*retries;
      continue;
    }
    DefectSample s;
    s.mask = synth.mask;
    s.seed_mask_index = synth.seed_index;
    s.trimap = trimap::build_trimap(src.foreground, s.mask);
    s.prompt = prompt;
    s.source_id = src.id;
    s.seed = seed;
    const GenerationResult g = generate(src.image, s.trimap, s.mask, prompt, bundle, sched, gen, rng);
    if (request.adapt) {
      s.image = adapt_decoder(g.z, src.image, s.mask, bundle, adapt).image;
      s.adapted = true;
    } else {
      s.image = bundle.decode(g.z);
    }
    s.validate();
    return s;
  }
  throw FitError("generate_sample: defect mask could not be placed within the retry budget");
}

DatasetResult generate_dataset(const DatasetRequest& request, const ModelBundle& bundle, const NoiseSchedule& sched,
                               const GenerationConfig& gen, const AdaptConfig& adapt) {
  validate_request(request, bundle);
  gen.validate();
  adapt.validate();
  DatasetResult result;
  if (request.count == 0) return result;
  check_ready(bundle);

  std::vector<std::optional<DefectSample>> slots(request.count);
  std::vector<int> retries(request.count, 0);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&](int worker) {
    for (int i = worker; i < request.count; i += request.workers) {
      try {
        slots[i] = generate_sample(sample_seed(gen.seed, i), request, bundle, sched, gen, adapt, &retries[i]);
      } catch (const FitError&) {
        // Counted as skipped below.
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (request.workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < request.workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  for (int i = 0; i < request.count; ++i) {
    result.retries += retries[i];
    if (slots[i]) {
      result.samples.push_back(std::move(*slots[i]));
    } else {
      result.skipped_seeds.push_back(sample_seed(gen.seed, i));
    }
  }
  return result;
}

}  // namespace adabldm::pipeline

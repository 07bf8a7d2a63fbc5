#pragma once

// Training loops for the codec, denoiser and control branch; multi-stage
// generation with latent and pixel blending; per-sample decoder adaptation;
// batch synthesis of defect datasets.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "adabldm/models.hpp"
#include "adabldm/schedule.hpp"
#include "adabldm/trimap.hpp"

namespace adabldm::pipeline {

using models::ModelBundle;
using models::PromptSpec;
using schedule::NoiseSchedule;

// ---------------------------------------------------------------- configs

struct GenerationConfig {
  int free_steps = 50;    // T1
  int latent_steps = 30;  // T2
  int image_steps = 5;    // T3
  double eta = 0.0;
  double guidance_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdaptConfig {
  int steps = 200;  // T_ft
  double lambda_con = 100.0;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;

  void validate() const;
};

struct CodecTrainConfig {
  int epochs = 60;
  int batch_size = 4;
  double learning_rate = 3e-3;
  double weight_decay = 0.01;
  /// Fraction of images held out for the reconstruction error.
  double holdout_fraction = 0.2;
  /// Random dihedral transform of every training image, redrawn each epoch.
  bool augment = true;
  /// Chance that a training view gets 1-3 random ellipses of random colour and opacity.
  double occlusion_probability = 0.0;
};

/// Paints 1-3 random filled ellipses (radius 2 to size/6, random RGB colour, opacity 0.3-1) onto x.
void random_occlusions(ImageGrid& x, Rng& rng);

struct DiffusionTrainConfig {
  int steps = 2000;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double prompt_dropout = 0.1;
  /// Size of the fixed draw set used to report the loss before and after training.
  int eval_draws = 64;
  /// Random dihedral flips/rotations of (image, mask) pairs.
  bool augment = true;
};

// ---------------------------------------------------------------- data

/// Genuine or generated defective image with its aligned mask.
struct DefectSample {
  ImageGrid image;
  BinaryMask mask;
  Trimap trimap;
  PromptSpec prompt;
  std::string source_id;
  std::uint64_t seed = 0;
  bool adapted = false;
  int seed_mask_index = -1;

  /// Throws PreconditionError when the sample violates its invariants.
  void validate() const;
};

/// A training example for the diffusion model: image, its trimap, its prompt.
struct DiffusionExample {
  ImageGrid image;
  Trimap trimap;
  PromptSpec prompt;
};

/// Encoded training batch: latents (N,C_z,H_z,W_z), trimaps (N,1,H,W) and prompts.
struct LdmBatch {
  Tensor latents;
  Tensor trimaps;
  std::vector<PromptSpec> prompts;

  int size() const { return static_cast<int>(prompts.size()); }
};

LdmBatch make_ldm_batch(const ModelBundle& bundle, const std::vector<DiffusionExample>& examples);

// ---------------------------------------------------------------- training

struct CodecReport {
  double holdout_mae = 0.0;  // epsilon_codec
  std::vector<double> epoch_losses;
};

/// Pixel-L2 autoencoder training; sets the latent normalization and records
/// the held-out reconstruction MAE in the bundle state.
CodecReport train_codec(ModelBundle& bundle, const std::vector<ImageGrid>& images, const CodecTrainConfig& cfg,
                        Rng& rng);

/// Randomness of one loss evaluation, drawn in a fixed order so it can be replayed.
struct LdmDraws {
  std::vector<int> timesteps;
  Tensor noise;
  std::vector<bool> drop_prompt;
};
LdmDraws draw_ldm_noise(int batch, const std::vector<int>& latent_shape, const NoiseSchedule& sched,
                        double prompt_dropout, Rng& rng);

/// Noise predictor used by the loss: (z_t, t, prompts, trimaps or nullptr) -> eps.
using EpsPredictor = std::function<nn::Var(const nn::Var& z_t, const std::vector<int>& t,
                                           const std::vector<PromptSpec>& prompts, const Tensor* trimaps)>;

EpsPredictor bundle_predictor(const ModelBundle& bundle);

/// Mean squared error between the drawn noise and its prediction.
nn::Var ldm_loss(const LdmBatch& batch, const NoiseSchedule& sched, const LdmDraws& draws,
                 const EpsPredictor& predictor, bool use_trimaps = true);
/// Draws noise from rng and predicts with the bundle.
nn::Var ldm_loss(const LdmBatch& batch, const ModelBundle& bundle, const NoiseSchedule& sched, Rng& rng,
                 double prompt_dropout = 0.1, bool use_trimaps = true);

struct TrainLog {
  std::vector<double> losses;
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
};

/// Fits the denoiser and prompt embedder without the control branch, then
/// freezes the denoiser and re-initializes the control encoder from it.
TrainLog pretrain_denoiser(ModelBundle& bundle, const std::vector<DiffusionExample>& domain,
                           const NoiseSchedule& sched, const DiffusionTrainConfig& cfg, Rng& rng);

/// Fits the trimap embedder, control encoder and prompt embedder on genuine
/// defective samples; the denoiser and codec must come out bit-unchanged.
TrainLog finetune_control(ModelBundle& bundle, const std::vector<DefectSample>& genuine, const NoiseSchedule& sched,
                          const DiffusionTrainConfig& cfg, Rng& rng);

/// Loss on a fixed draw set without prompt dropout; `shuffle_trimaps` rolls
/// the trimaps by one sample, `use_trimaps = false` bypasses the control branch.
double evaluate_ldm_loss(const ModelBundle& bundle, const LdmBatch& batch, const NoiseSchedule& sched,
                         std::uint64_t seed, int repeats, bool shuffle_trimaps = false, bool use_trimaps = true);

/// The eight dihedral transforms of a square grid; index 0 is the identity.
ImageGrid dihedral(const ImageGrid& x, int k);
BinaryMask dihedral(const BinaryMask& m, int k);
Trimap dihedral(const Trimap& t, int k);

// ---------------------------------------------------------------- generation

enum class TraceKind { denoise, latent_blend, image_blend };

struct TraceEntry {
  int stage = 0;  // 0 free, 1 latent editing, 2 image editing
  TraceKind kind = TraceKind::denoise;
  int timestep = 0;
  LatentGrid z;
};

struct GenerationResult {
  LatentGrid z;  // z*_NG
  LatentGrid z_ok;
  LatentMask latent_mask;
  std::vector<TraceEntry> trace;
};

/// Multi-stage denoising with latent then pixel blending.
GenerationResult generate(const ImageGrid& x_ok, const Trimap& trimap, const BinaryMask& defect_mask,
                          const PromptSpec& prompt, const ModelBundle& bundle, const NoiseSchedule& sched,
                          const GenerationConfig& cfg, Rng& rng);

/// Plain DDIM sampling with the same conditioning; trace holds z after every step.
GenerationResult free_diffusion(const Trimap& trimap, const PromptSpec& prompt, const ModelBundle& bundle,
                                const NoiseSchedule& sched, int steps, double eta, double guidance_scale, Rng& rng);

// ---------------------------------------------------------------- adaptation

struct AdaptResult {
  models::CodecDecoder decoder;
  ImageGrid image;  // x*_NG from the adapted clone
  std::vector<double> objective;   // L_i + lambda L_d before each update
  std::vector<double> li;          // L_i before each update
  std::vector<double> ld;          // L_d before each update
  double li_initial = 0.0;
  double li_final = 0.0;
  double ld_final = 0.0;
};

/// L_i + lambda_con * L_d for a decoder; x (1,3,H,W) tensors.
nn::Var adaptation_objective(const models::CodecDecoder& decoder, const LatentGrid& z_star, const ImageGrid& x_ok,
                             const BinaryMask& mask, const ImageGrid& target, double lambda_con, double* li = nullptr,
                             double* ld = nullptr);

AdaptResult adapt_decoder(const LatentGrid& z_star, const ImageGrid& x_ok, const BinaryMask& mask,
                          const ModelBundle& bundle, const AdaptConfig& cfg);

// ---------------------------------------------------------------- dataset

struct OkSource {
  std::string id;
  ImageGrid image;
  BinaryMask foreground;
};

struct DatasetRequest {
  int count = 0;
  std::vector<OkSource> sources;
  std::vector<BinaryMask> seed_masks;
  std::vector<PromptSpec> prompts;
  trimap::DefectMaskOptions mask_options;
  int retry_budget = 10;
  bool adapt = true;
  int workers = 1;
};

struct DatasetResult {
  std::vector<DefectSample> samples;
  std::vector<std::uint64_t> skipped_seeds;
  int retries = 0;
};

/// Per-sample seed of sample i; every sample is a pure function of it.
std::uint64_t sample_seed(std::uint64_t top_seed, int index);

/// One sample from its seed; throws FitError when every retry fails.
DefectSample generate_sample(std::uint64_t seed, const DatasetRequest& request, const ModelBundle& bundle,
                             const NoiseSchedule& sched, const GenerationConfig& gen, const AdaptConfig& adapt,
                             int* retries = nullptr);

DatasetResult generate_dataset(const DatasetRequest& request, const ModelBundle& bundle, const NoiseSchedule& sched,
                               const GenerationConfig& gen, const AdaptConfig& adapt);

}  // namespace adabldm::pipeline

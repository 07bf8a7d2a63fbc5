#pragma once

// The trainable networks: latent codec (encoder/decoder), the noise-predicting
// U-Net denoiser, the trimap control branch (embedder + encoder copy) and the
// prompt embedder, grouped in a ModelBundle.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "adabldm/autograd.hpp"
#include "adabldm/image.hpp"
#include "adabldm/trimap.hpp"

namespace adabldm::models {

struct ModelGeometry {
  int image_size = 64;
  int latent_size = 8;
  int latent_channels = 4;
  /// Codec widths per resolution level, index 0 at latent resolution.
  std::vector<int> codec_widths = {32, 32, 16, 16};
  /// Denoiser width at latent resolution; doubled at the inner resolution.
  int denoiser_channels = 32;
  int prompt_dim = 32;
  int time_dim = 32;
  std::vector<std::string> objects = {"texture"};
  std::vector<std::string> defects = {"good", "defect"};

  int downsample_factor() const { return image_size / latent_size; }
  int levels() const;
  /// Throws ParameterError when the geometry is inconsistent.
  void validate() const;

  static ModelGeometry desk();
  static ModelGeometry full();
  /// Small enough for quick tests: 32x32 images, 8x8 latents.
  static ModelGeometry tiny();
};

inline constexpr int kPromptLength = 2;

struct PromptSpec {
  int object_token = 0;
  int defect_token = 0;
  bool empty = false;

  static PromptSpec null() { return {0, 0, true}; }
  friend bool operator==(const PromptSpec&, const PromptSpec&) = default;
};

/// Sequence of kPromptLength vectors of dimension prompt_dim.
struct PromptEmbedding {
  int length = 0;
  int dim = 0;
  std::vector<double> data;
  Tensor tensor() const { return Tensor({length, dim}, data); }
  friend bool operator==(const PromptEmbedding&, const PromptEmbedding&) = default;
};

struct ConditionSet {
  PromptEmbedding prompt;
  Trimap trimap;
};

// Layer descriptors index into the owning network's ParamSet, so copying a
// network copies weights and layers together.
struct ConvLayer {
  std::size_t w = 0, b = 0;
  int stride = 1, pad = 1;
};
struct LinearLayer {
  std::size_t w = 0, b = 0;
};
struct NormLayer {
  std::size_t gamma = 0, beta = 0;
  int groups = 1;
};
struct ResBlock {
  NormLayer norm1, norm2;
  ConvLayer conv1, conv2;
  LinearLayer time;
  std::optional<ConvLayer> skip;
};
/// Self-attention over spatial positions followed by cross-attention to the prompt.
struct AttentionBlock {
  NormLayer norm_self, norm_cross;
  LinearLayer q, k, v, out;
  LinearLayer cq, ck, cv, cout;
};

class Network {
 public:
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  std::uint64_t hash() const { return params_.hash(); }

 protected:
  nn::Var p(std::size_t i) const;
  nn::Var conv(const ConvLayer& l, const nn::Var& x) const;
  nn::Var lin(const LinearLayer& l, const nn::Var& x) const;
  nn::Var norm(const NormLayer& l, const nn::Var& x) const;
  nn::Var resblock(const ResBlock& b, const nn::Var& x, const nn::Var& temb) const;
  nn::Var attend(const AttentionBlock& b, const nn::Var& x, const nn::Var& prompt) const;

  /// Uniform weights with bound gain/sqrt(fan_in).
  ConvLayer make_conv(const std::string& name, int cin, int cout, int k, int stride, Rng& rng, double gain = 1.0);
  LinearLayer make_linear(const std::string& name, int din, int dout, Rng& rng);
  NormLayer make_norm(const std::string& name, int channels);
  ResBlock make_resblock(const std::string& name, int cin, int cout, int tdim, Rng& rng);
  AttentionBlock make_attention(const std::string& name, int channels, int prompt_dim, Rng& rng);

  nn::ParamSet params_;
};

/// Image -> normalized latent (Omega).
class CodecEncoder : public Network {
 public:
  CodecEncoder() = default;
  CodecEncoder(const ModelGeometry& g, Rng& rng);
  /// x (N,3,H,W) -> z (N,C_z,H_z,W_z), already normalized by the latent statistics.
  nn::Var forward(const nn::Var& x) const;
  double latent_shift = 0.0;
  double latent_scale = 1.0;

 private:
  ConvLayer in_;
  std::vector<ConvLayer> down_;
  ConvLayer mid_, out_;
};

/// Normalized latent -> image in (0,1) (Phi).
class CodecDecoder : public Network {
 public:
  CodecDecoder() = default;
  CodecDecoder(const ModelGeometry& g, Rng& rng);
  nn::Var forward(const nn::Var& z) const;
  double latent_shift = 0.0;
  double latent_scale = 1.0;

 private:
  ConvLayer in_, mid_;
  std::vector<ConvLayer> up_;
  ConvLayer out_;
};

/// Additive control features, one per merge point of the denoiser decoder.
struct ControlFeatures {
  nn::Var outer;  // at latent resolution
  nn::Var inner;  // at half latent resolution
};

class Denoiser : public Network {
 public:
  Denoiser() = default;
  Denoiser(const ModelGeometry& g, Rng& rng);
  nn::Var time_embedding(const std::vector<int>& t) const;
  /// Noise prediction; `control` features are added element-wise to the skip
  /// paths of the decoder when present.
  nn::Var forward(const nn::Var& z, const nn::Var& temb, const nn::Var& prompt, const ControlFeatures* control) const;

  int time_dim() const { return time_dim_; }

 private:
  friend class ControlEncoder;
  int time_dim_ = 32;
  LinearLayer t1_, t2_;
  ConvLayer in_;
  ResBlock enc1_;
  ConvLayer down_;
  ResBlock enc2_;
  AttentionBlock attn_;
  ResBlock mid_, dec2_;
  ConvLayer up_;
  ResBlock dec1_;
  NormLayer out_norm_;
  ConvLayer out_;
};

/// Strided conv stack mapping a trimap to latent resolution with C_z channels (zeta).
class TrimapEmbedder : public Network {
 public:
  TrimapEmbedder() = default;
  TrimapEmbedder(const ModelGeometry& g, Rng& rng);
  nn::Var forward(const nn::Var& trimap) const;

 private:
  std::vector<ConvLayer> convs_;
};

/// Structural copy of the denoiser encoder fed with z_t + zeta(trimap); its
/// attention runs over the trimap-conditioned features. Outputs pass through
/// zero-initialized 1x1 projections.
class ControlEncoder : public Network {
 public:
  ControlEncoder() = default;
  ControlEncoder(const ModelGeometry& g, Rng& rng);
  ControlFeatures forward(const nn::Var& z_plus_trimap, const nn::Var& temb, const nn::Var& prompt) const;
  /// Copies the shared encoder weights from the denoiser and zeroes the output projections.
  void initialize_from(const Denoiser& denoiser);

 private:
  ConvLayer in_;
  ResBlock enc1_;
  ConvLayer down_;
  ResBlock enc2_;
  AttentionBlock attn_;
  ConvLayer zero_outer_, zero_inner_;
};

/// Learned token table over the closed (object, defect) vocabulary (tau).
class PromptEmbedder : public Network {
 public:
  PromptEmbedder() = default;
  PromptEmbedder(const ModelGeometry& g, Rng& rng);
  /// (kPromptLength, prompt_dim)
  nn::Var forward(const PromptSpec& spec) const;

 private:
  int objects_ = 0, defects_ = 0;
  std::size_t object_table_ = 0, defect_table_ = 0, position_ = 0, null_ = 0;
  LinearLayer proj_;
};

struct TrainingState {
  bool codec = false;
  bool denoiser = false;
  bool control = false;
  double codec_mae = -1.0;  // recorded held-out reconstruction MAE (epsilon_codec)
  bool ready() const { return codec && denoiser && control; }
};

class ModelBundle {
 public:
  ModelBundle() = default;
  ModelBundle(ModelGeometry geometry, std::uint64_t seed);

  const ModelGeometry& geometry() const { return geometry_; }

  LatentGrid encode(const ImageGrid& x) const;
  ImageGrid decode(const LatentGrid& z) const;
  /// Batched, graph-free codec passes on (N,...) tensors.
  Tensor encode_batch(const Tensor& x) const;
  Tensor decode_batch(const Tensor& z) const;

  PromptSpec prompt(const std::string& object, const std::string& defect) const;
  PromptEmbedding embed_prompt(const PromptSpec& p) const;
  LatentGrid embed_trimap(const Trimap& g) const;

  /// Predicted noise for a single latent; applies classifier-free guidance when
  /// guidance_scale != 1.
  LatentGrid denoise_eps(const LatentGrid& z_t, int t, const ConditionSet& cond, double guidance_scale = 1.0) const;

  /// Differentiable batched prediction used by training. `trimaps` may be null
  /// to bypass the control branch entirely.
  nn::Var predict_eps(const nn::Var& z_t, const std::vector<int>& t, const nn::Var& prompts,
                      const nn::Var& trimaps) const;
  /// Stacks prompt embeddings into (N, L, D).
  nn::Var prompt_batch(const std::vector<PromptSpec>& specs) const;

  CodecEncoder encoder;
  CodecDecoder decoder;
  Denoiser denoiser;
  TrimapEmbedder trimap_embedder;
  ControlEncoder control;
  PromptEmbedder prompts;
  TrainingState state;

  /// Hex hashes of every network, keyed by file stem.
  std::vector<std::pair<std::string, std::string>> hashes() const;
  void set_latent_statistics(double shift, double scale);

 private:
  void check_image(const ImageGrid& x) const;
  ModelGeometry geometry_;
};

// Checkpoints: one weights file per network plus manifest.json.
void save_checkpoint(const std::filesystem::path& dir, const ModelBundle& bundle, const std::string& extra_json = "{}");
ModelBundle load_checkpoint(const std::filesystem::path& dir);

void save_weights(const std::filesystem::path& file, const nn::ParamSet& params);
void load_weights(const std::filesystem::path& file, nn::ParamSet& params);

std::string geometry_to_json(const ModelGeometry& g);
ModelGeometry geometry_from_json(const std::string& json);

}  // namespace adabldm::models

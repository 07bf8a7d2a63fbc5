#include "adabldm/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "adabldm/errors.hpp"

namespace adabldm::models {

using nn::Var;
using json = nlohmann::json;

namespace {

int norm_groups(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0 && channels >= g) return g;
  }
  return 1;
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

Var constant_like(const Tensor& shape_of, double v) { return nn::constant(Tensor(shape_of.shape(), v)); }

}  // namespace

// ---------------------------------------------------------------- geometry

int ModelGeometry::levels() const {
  int f = downsample_factor(), n = 0;
  while (f > 1) {
    f >>= 1;
    ++n;
  }
  return n;
}

void ModelGeometry::validate() const {
  ADABLDM_CHECK(image_size > 0 && latent_size > 0 && image_size % latent_size == 0, ParameterError,
                "geometry: image size must be a multiple of the latent size");
  ADABLDM_CHECK(is_power_of_two(downsample_factor()), ParameterError,
                "geometry: downsampling factor must be a power of two");
  ADABLDM_CHECK(latent_size % 2 == 0, ParameterError, "geometry: latent size must be even");
  ADABLDM_CHECK(static_cast<int>(codec_widths.size()) == levels() + 1, ParameterError,
                "geometry: codec_widths needs one entry per resolution level");
  ADABLDM_CHECK(latent_channels > 0 && denoiser_channels > 0 && prompt_dim > 0 && time_dim > 0 && time_dim % 2 == 0,
                ParameterError, "geometry: channel counts must be positive (time_dim even)");
  ADABLDM_CHECK(!objects.empty() && !defects.empty(), ParameterError, "geometry: empty vocabulary");
}

ModelGeometry ModelGeometry::desk() { return ModelGeometry{}; }

ModelGeometry ModelGeometry::full() {
  ModelGeometry g;
  g.image_size = 256;
  g.latent_size = 32;
  return g;
}

ModelGeometry ModelGeometry::tiny() {
  ModelGeometry g;
  g.image_size = 32;
  g.latent_size = 8;
  g.codec_widths = {16, 16, 8};
  g.denoiser_channels = 16;
  g.prompt_dim = 16;
  g.time_dim = 16;
  return g;
}

// ---------------------------------------------------------------- Network

Var Network::p(std::size_t i) const {
  // Inference on shared weights runs with gradients disabled, in which case
  // leaf() only copies the value; the mutable binding is used by training,
  // which has exclusive access to the network.
  return nn::leaf(const_cast<nn::Parameter&>(params_[i]));
}

Var Network::conv(const ConvLayer& l, const Var& x) const {
  return nn::conv2d(x, p(l.w), p(l.b), l.stride, l.pad);
}

Var Network::lin(const LinearLayer& l, const Var& x) const { return nn::linear(x, p(l.w), p(l.b)); }

Var Network::norm(const NormLayer& l, const Var& x) const {
  return nn::group_norm(x, p(l.gamma), p(l.beta), l.groups);
}

Var Network::resblock(const ResBlock& b, const Var& x, const Var& temb) const {
  Var h = conv(b.conv1, nn::silu(norm(b.norm1, x)));
  h = nn::add_channel(h, lin(b.time, nn::silu(temb)));
  h = conv(b.conv2, nn::silu(norm(b.norm2, h)));
  return nn::add(b.skip ? conv(*b.skip, x) : x, h);
}

Var Network::attend(const AttentionBlock& b, const Var& x, const Var& prompt) const {
  const int h = x->value.dim(2), w = x->value.dim(3);
  Var seq = nn::to_sequence(norm(b.norm_self, x));
  Var self_out = lin(b.out, nn::attention(lin(b.q, seq), lin(b.k, seq), lin(b.v, seq)));
  Var y = nn::add(x, nn::from_sequence(self_out, h, w));
  Var seq2 = nn::to_sequence(norm(b.norm_cross, y));
  Var cross = lin(b.cout, nn::attention(lin(b.cq, seq2), lin(b.ck, prompt), lin(b.cv, prompt)));
  return nn::add(y, nn::from_sequence(cross, h, w));
}

ConvLayer Network::make_conv(const std::string& name, int cin, int cout, int k, int stride, Rng& rng, double gain) {
  const double bound = gain / std::sqrt(static_cast<double>(cin * k * k));
  ConvLayer l;
  l.w = params_.add_uniform(name + ".w", {cout, cin, k, k}, bound, rng);
  l.b = params_.add_uniform(name + ".b", {cout}, bound, rng);
  l.stride = stride;
  l.pad = k / 2;
  return l;
}

LinearLayer Network::make_linear(const std::string& name, int din, int dout, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(din));
  LinearLayer l;
  l.w = params_.add_uniform(name + ".w", {dout, din}, bound, rng);
  l.b = params_.add_uniform(name + ".b", {dout}, bound, rng);
  return l;
}

NormLayer Network::make_norm(const std::string& name, int channels) {
  NormLayer l;
  l.gamma = params_.add(name + ".gamma", {channels});
  params_[l.gamma].value.fill(1.0);
  l.beta = params_.add(name + ".beta", {channels});
  l.groups = norm_groups(channels);
  return l;
}

ResBlock Network::make_resblock(const std::string& name, int cin, int cout, int tdim, Rng& rng) {
  ResBlock b;
  b.norm1 = make_norm(name + ".norm1", cin);
  b.conv1 = make_conv(name + ".conv1", cin, cout, 3, 1, rng);
  b.time = make_linear(name + ".time", tdim, cout, rng);
  b.norm2 = make_norm(name + ".norm2", cout);
  b.conv2 = make_conv(name + ".conv2", cout, cout, 3, 1, rng);
  if (cin != cout) b.skip = make_conv(name + ".skip", cin, cout, 1, 1, rng);
  return b;
}

AttentionBlock Network::make_attention(const std::string& name, int channels, int prompt_dim, Rng& rng) {
  AttentionBlock b;
  b.norm_self = make_norm(name + ".norm_self", channels);
  b.q = make_linear(name + ".q", channels, channels, rng);
  b.k = make_linear(name + ".k", channels, channels, rng);
  b.v = make_linear(name + ".v", channels, channels, rng);
  b.out = make_linear(name + ".out", channels, channels, rng);
  b.norm_cross = make_norm(name + ".norm_cross", channels);
  b.cq = make_linear(name + ".cq", channels, channels, rng);
  b.ck = make_linear(name + ".ck", prompt_dim, channels, rng);
  b.cv = make_linear(name + ".cv", prompt_dim, channels, rng);
  b.cout = make_linear(name + ".cout", channels, channels, rng);
  return b;
}

// ---------------------------------------------------------------- codec

// Kaiming-uniform scale for the hidden SiLU layers; the default bound lets the
// signal decay through the plain conv stack and training stalls at the mean color.
constexpr double kCodecGain = 2.449489742783178;

CodecEncoder::CodecEncoder(const ModelGeometry& g, Rng& rng) {
  const int levels = g.levels();
  const auto& w = g.codec_widths;
  in_ = make_conv("in", 3, w[levels], 3, 1, rng, kCodecGain);
  for (int l = levels; l >= 1; --l) {
    down_.push_back(make_conv("down" + std::to_string(l), w[l], w[l - 1], 3, 2, rng, kCodecGain));
  }
  mid_ = make_conv("mid", w[0], w[0], 3, 1, rng, kCodecGain);
  out_ = make_conv("out", w[0], g.latent_channels, 1, 1, rng);
}

Var CodecEncoder::forward(const Var& x) const {
  Var h = nn::silu(conv(in_, x));
  for (const auto& d : down_) h = nn::silu(conv(d, h));
  h = nn::silu(conv(mid_, h));
  Var z = conv(out_, h);
  return nn::add(nn::scale(z, latent_scale), constant_like(z->value, -latent_shift * latent_scale));
}

CodecDecoder::CodecDecoder(const ModelGeometry& g, Rng& rng) {
  const int levels = g.levels();
  const auto& w = g.codec_widths;
  in_ = make_conv("in", g.latent_channels, w[0], 3, 1, rng, kCodecGain);
  mid_ = make_conv("mid", w[0], w[0], 3, 1, rng, kCodecGain);
  for (int l = 1; l <= levels; ++l) {
    up_.push_back(make_conv("up" + std::to_string(l), w[l - 1], w[l], 3, 1, rng, kCodecGain));
  }
  out_ = make_conv("out", w[levels], 3, 3, 1, rng);
}

Var CodecDecoder::forward(const Var& z) const {
  Var raw = nn::add(nn::scale(z, 1.0 / latent_scale), constant_like(z->value, latent_shift));
  Var h = nn::silu(conv(in_, raw));
  h = nn::silu(conv(mid_, h));
  for (const auto& u : up_) h = nn::silu(conv(u, nn::upsample_nearest2x(h)));
  return nn::sigmoid(conv(out_, h));
}

// ---------------------------------------------------------------- denoiser

Denoiser::Denoiser(const ModelGeometry& g, Rng& rng) : time_dim_(g.time_dim) {
  const int c = g.denoiser_channels, c2 = 2 * c;
  t1_ = make_linear("time1", g.time_dim, c2, rng);
  t2_ = make_linear("time2", c2, c2, rng);
  in_ = make_conv("in", g.latent_channels, c, 3, 1, rng);
  enc1_ = make_resblock("enc1", c, c, c2, rng);
  down_ = make_conv("down", c, c2, 3, 2, rng);
  enc2_ = make_resblock("enc2", c2, c2, c2, rng);
  attn_ = make_attention("attn", c2, g.prompt_dim, rng);
  mid_ = make_resblock("mid", c2, c2, c2, rng);
  dec2_ = make_resblock("dec2", c2, c2, c2, rng);
  up_ = make_conv("up", c2, c, 3, 1, rng);
  dec1_ = make_resblock("dec1", c, c, c2, rng);
  out_norm_ = make_norm("out_norm", c);
  out_ = make_conv("out", c, g.latent_channels, 3, 1, rng);
}

Var Denoiser::time_embedding(const std::vector<int>& t) const {
  const int half = time_dim_ / 2;
  Tensor s({static_cast<int>(t.size()), time_dim_});
  for (std::size_t n = 0; n < t.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      s[n * time_dim_ + i] = std::sin(t[n] * freq);
      s[n * time_dim_ + half + i] = std::cos(t[n] * freq);
    }
  return lin(t2_, nn::silu(lin(t1_, nn::constant(std::move(s)))));
}

Var Denoiser::forward(const Var& z, const Var& temb, const Var& prompt, const ControlFeatures* control) const {
  Var h = conv(in_, z);
  Var h1 = resblock(enc1_, h, temb);
  Var h2 = attend(attn_, resblock(enc2_, conv(down_, h1), temb), prompt);
  Var m = resblock(mid_, h2, temb);
  Var skip2 = control ? nn::add(h2, control->inner) : h2;
  Var x = resblock(dec2_, nn::add(m, skip2), temb);
  Var u = conv(up_, nn::upsample_nearest2x(x));
  Var skip1 = control ? nn::add(h1, control->outer) : h1;
  x = resblock(dec1_, nn::add(u, skip1), temb);
  return conv(out_, nn::silu(norm(out_norm_, x)));
}

// ---------------------------------------------------------------- control branch

TrimapEmbedder::TrimapEmbedder(const ModelGeometry& g, Rng& rng) {
  const int levels = g.levels();
  if (levels == 0) {
    convs_.push_back(make_conv("conv0", 1, g.latent_channels, 3, 1, rng));
    return;
  }
  int cin = 1;
  for (int i = 0; i < levels; ++i) {
    const int cout = i == levels - 1 ? g.latent_channels : std::min(8 << i, 32);
    convs_.push_back(make_conv("conv" + std::to_string(i), cin, cout, 3, 2, rng));
    cin = cout;
  }
}

Var TrimapEmbedder::forward(const Var& trimap) const {
  Var h = trimap;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    h = conv(convs_[i], h);
    if (i + 1 < convs_.size()) h = nn::silu(h);
  }
  return h;
}

ControlEncoder::ControlEncoder(const ModelGeometry& g, Rng& rng) {
  const int c = g.denoiser_channels, c2 = 2 * c;
  // Names mirror the denoiser so initialize_from can copy by name.
  in_ = make_conv("in", g.latent_channels, c, 3, 1, rng);
  enc1_ = make_resblock("enc1", c, c, c2, rng);
  down_ = make_conv("down", c, c2, 3, 2, rng);
  enc2_ = make_resblock("enc2", c2, c2, c2, rng);
  attn_ = make_attention("attn", c2, g.prompt_dim, rng);
  zero_outer_ = make_conv("zero_outer", c, c, 1, 1, rng);
  zero_inner_ = make_conv("zero_inner", c2, c2, 1, 1, rng);
  for (auto i : {zero_outer_.w, zero_outer_.b, zero_inner_.w, zero_inner_.b}) params_[i].value.fill(0.0);
}

void ControlEncoder::initialize_from(const Denoiser& denoiser) {
  for (const auto& src : denoiser.params().all()) {
    if (auto* dst = params_.find(src.name)) {
      ADABLDM_CHECK(dst->value.same_shape(src.value), ParameterError, "control init: shape mismatch on " + src.name);
      dst->value = src.value;
    }
  }
  for (auto i : {zero_outer_.w, zero_outer_.b, zero_inner_.w, zero_inner_.b}) params_[i].value.fill(0.0);
}

ControlFeatures ControlEncoder::forward(const Var& z_plus_trimap, const Var& temb, const Var& prompt) const {
  Var h1 = resblock(enc1_, conv(in_, z_plus_trimap), temb);
  Var h2 = attend(attn_, resblock(enc2_, conv(down_, h1), temb), prompt);
  return {conv(zero_outer_, h1), conv(zero_inner_, h2)};
}

// ---------------------------------------------------------------- prompts

PromptEmbedder::PromptEmbedder(const ModelGeometry& g, Rng& rng)
    : objects_(static_cast<int>(g.objects.size())), defects_(static_cast<int>(g.defects.size())) {
  const int d = g.prompt_dim;
  object_table_ = params_.add_uniform("objects", {objects_, d}, 1.0, rng);
  defect_table_ = params_.add_uniform("defects", {defects_, d}, 1.0, rng);
  position_ = params_.add_uniform("position", {kPromptLength, d}, 1.0, rng);
  null_ = params_.add_uniform("null", {kPromptLength, d}, 1.0, rng);
  proj_ = make_linear("proj", d, d, rng);
}

Var PromptEmbedder::forward(const PromptSpec& spec) const {
  if (spec.empty) return p(null_);
  ADABLDM_CHECK(spec.object_token >= 0 && spec.object_token < objects_ && spec.defect_token >= 0 &&
                    spec.defect_token < defects_,
                ParameterError, "embed_prompt: token outside the vocabulary");
  const int d = params_[object_table_].value.dim(1);
  Var obj = nn::reshape(nn::gather_rows(p(object_table_), {spec.object_token}), {d});
  Var def = nn::reshape(nn::gather_rows(p(defect_table_), {spec.defect_token}), {d});
  return lin(proj_, nn::add(nn::stack({obj, def}), p(position_)));
}

// ---------------------------------------------------------------- bundle

ModelBundle::ModelBundle(ModelGeometry geometry, std::uint64_t seed) : geometry_(std::move(geometry)) {
  geometry_.validate();
  Rng r_enc(derive_seed(seed, "encoder")), r_dec(derive_seed(seed, "decoder")), r_den(derive_seed(seed, "denoiser")),
      r_tri(derive_seed(seed, "trimap_embedder")), r_ctl(derive_seed(seed, "control")),
      r_pr(derive_seed(seed, "prompts"));
  encoder = CodecEncoder(geometry_, r_enc);
  decoder = CodecDecoder(geometry_, r_dec);
  denoiser = Denoiser(geometry_, r_den);
  trimap_embedder = TrimapEmbedder(geometry_, r_tri);
  control = ControlEncoder(geometry_, r_ctl);
  control.initialize_from(denoiser);
  prompts = PromptEmbedder(geometry_, r_pr);
}

void ModelBundle::set_latent_statistics(double shift, double scale) {
  ADABLDM_CHECK(scale > 0.0 && std::isfinite(scale) && std::isfinite(shift), ParameterError,
                "latent statistics must be finite with positive scale");
  encoder.latent_shift = decoder.latent_shift = shift;
  encoder.latent_scale = decoder.latent_scale = scale;
}

void ModelBundle::check_image(const ImageGrid& x) const {
  ADABLDM_CHECK(x.channels == 3 && x.height == geometry_.image_size && x.width == geometry_.image_size,
                ParameterError, "image shape does not match the model geometry");
}

LatentGrid ModelBundle::encode(const ImageGrid& x) const {
  check_image(x);
  return LatentGrid::from_tensor(encode_batch(x.tensor()));
}

ImageGrid ModelBundle::decode(const LatentGrid& z) const {
  ADABLDM_CHECK(z.channels == geometry_.latent_channels && z.height == geometry_.latent_size &&
                    z.width == geometry_.latent_size,
                ParameterError, "latent shape does not match the model geometry");
  return ImageGrid::from_tensor(decode_batch(z.tensor()));
}

Tensor ModelBundle::encode_batch(const Tensor& x) const {
  ADABLDM_CHECK(x.ndim() == 4 && x.dim(1) == 3 && x.dim(2) == geometry_.image_size && x.dim(3) == geometry_.image_size,
                ParameterError, "encode: expected (N,3,H,W) at the model image size");
  nn::NoGradGuard guard;
  return encoder.forward(nn::constant(x))->value;
}

Tensor ModelBundle::decode_batch(const Tensor& z) const {
  ADABLDM_CHECK(z.ndim() == 4 && z.dim(1) == geometry_.latent_channels && z.dim(2) == geometry_.latent_size &&
                    z.dim(3) == geometry_.latent_size,
                ParameterError, "decode: expected (N,C_z,H_z,W_z) at the model latent size");
  nn::NoGradGuard guard;
  Tensor out = decoder.forward(nn::constant(z))->value;
  for (double& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

PromptSpec ModelBundle::prompt(const std::string& object, const std::string& defect) const {
  const auto oi = std::find(geometry_.objects.begin(), geometry_.objects.end(), object);
  const auto di = std::find(geometry_.defects.begin(), geometry_.defects.end(), defect);
  ADABLDM_CHECK(oi != geometry_.objects.end(), ParameterError, "unknown object token: " + object);
  ADABLDM_CHECK(di != geometry_.defects.end(), ParameterError, "unknown defect token: " + defect);
  return {static_cast<int>(oi - geometry_.objects.begin()), static_cast<int>(di - geometry_.defects.begin()), false};
}

PromptEmbedding ModelBundle::embed_prompt(const PromptSpec& p) const {
  nn::NoGradGuard guard;
  const Var e = prompts.forward(p);
  return {e->value.dim(0), e->value.dim(1), e->value.to_vector()};
}

LatentGrid ModelBundle::embed_trimap(const Trimap& g) const {
  ADABLDM_CHECK(g.height == geometry_.image_size && g.width == geometry_.image_size, ParameterError,
                "embed_trimap: trimap resolution does not match the image size");
  nn::NoGradGuard guard;
  return LatentGrid::from_tensor(trimap_embedder.forward(nn::constant(g.tensor()))->value);
}

Var ModelBundle::prompt_batch(const std::vector<PromptSpec>& specs) const {
  std::vector<Var> rows;
  rows.reserve(specs.size());
  for (const auto& s : specs) rows.push_back(prompts.forward(s));
  return nn::stack(rows);
}

Var ModelBundle::predict_eps(const Var& z_t, const std::vector<int>& t, const Var& prompt_seq,
                             const Var& trimaps) const {
  ADABLDM_CHECK(z_t->value.ndim() == 4 && z_t->value.dim(1) == geometry_.latent_channels &&
                    z_t->value.dim(2) == geometry_.latent_size && z_t->value.dim(3) == geometry_.latent_size,
                ParameterError, "predict_eps: latent shape does not match the model geometry");
  ADABLDM_CHECK(static_cast<int>(t.size()) == z_t->value.dim(0), ParameterError,
                "predict_eps: one timestep per sample required");
  for (int ti : t) ADABLDM_CHECK(ti >= 0, ParameterError, "predict_eps: negative timestep");
  Var temb = denoiser.time_embedding(t);
  if (!trimaps) return denoiser.forward(z_t, temb, prompt_seq, nullptr);
  ADABLDM_CHECK(trimaps->value.ndim() == 4 && trimaps->value.dim(0) == z_t->value.dim(0) &&
                    trimaps->value.dim(1) == 1 && trimaps->value.dim(2) == geometry_.image_size &&
                    trimaps->value.dim(3) == geometry_.image_size,
                ParameterError, "predict_eps: trimap shape does not match the image size");
  Var zeta = trimap_embedder.forward(trimaps);
  const ControlFeatures ctrl = control.forward(nn::add(z_t, zeta), temb, prompt_seq);
  return denoiser.forward(z_t, temb, prompt_seq, &ctrl);
}

LatentGrid ModelBundle::denoise_eps(const LatentGrid& z_t, int t, const ConditionSet& cond,
                                    double guidance_scale) const {
  ADABLDM_CHECK(z_t.channels == geometry_.latent_channels && z_t.height == geometry_.latent_size &&
                    z_t.width == geometry_.latent_size,
                ParameterError, "denoise_eps: latent shape does not match the model geometry");
  ADABLDM_CHECK(cond.trimap.height == geometry_.image_size && cond.trimap.width == geometry_.image_size,
                ParameterError, "denoise_eps: trimap resolution does not match the image size");
  ADABLDM_CHECK(cond.prompt.length == kPromptLength && cond.prompt.dim == geometry_.prompt_dim, ParameterError,
                "denoise_eps: prompt embedding shape mismatch");
  nn::NoGradGuard guard;
  const Var z = nn::constant(z_t.tensor());
  const Var tri = nn::constant(cond.trimap.tensor());
  const Var prompt = nn::constant(Tensor({1, cond.prompt.length, cond.prompt.dim}, cond.prompt.data));
  Tensor eps = predict_eps(z, {t}, prompt, tri)->value;
  if (guidance_scale != 1.0) {
    const Var null_prompt = nn::reshape(prompts.forward(PromptSpec::null()), {1, kPromptLength, geometry_.prompt_dim});
    const Tensor uncond = predict_eps(z, {t}, null_prompt, tri)->value;
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = uncond[i] + guidance_scale * (eps[i] - uncond[i]);
  }
  return LatentGrid::from_tensor(eps);
}

std::vector<std::pair<std::string, std::string>> ModelBundle::hashes() const {
  return {{"codec_encoder", nn::hash_hex(encoder.hash())},   {"codec_decoder", nn::hash_hex(decoder.hash())},
          {"denoiser", nn::hash_hex(denoiser.hash())},       {"trimap_embedder", nn::hash_hex(trimap_embedder.hash())},
          {"trimap_encoder", nn::hash_hex(control.hash())},  {"prompt_embedder", nn::hash_hex(prompts.hash())}};
}

// ---------------------------------------------------------------- persistence

namespace {
constexpr char kMagic[4] = {'A', 'D', 'B', 'W'};

template <class T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  ADABLDM_CHECK(is.good(), StateError, "truncated weights file");
  return v;
}
}  // namespace

void save_weights(const std::filesystem::path& file, const nn::ParamSet& params) {
  std::ofstream os(file, std::ios::binary);
  ADABLDM_CHECK(os, StateError, "cannot write weights: " + file.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params.all()) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.ndim()));
    for (int d : p.value.shape()) put<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(p.value.data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
}

void load_weights(const std::filesystem::path& file, nn::ParamSet& params) {
  std::ifstream is(file, std::ios::binary);
  ADABLDM_CHECK(is, StateError, "missing weights file: " + file.string());
  char magic[4];
  is.read(magic, 4);
  ADABLDM_CHECK(is && std::memcmp(magic, kMagic, 4) == 0, StateError, "not a weights file: " + file.string());
  const auto count = get<std::uint32_t>(is);
  ADABLDM_CHECK(count == params.size(), StateError, "weights file parameter count mismatch: " + file.string());
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto nd = get<std::uint32_t>(is);
    std::vector<int> shape(nd);
    for (auto& d : shape) d = get<std::int32_t>(is);
    nn::Parameter* p = params.find(name);
    ADABLDM_CHECK(p && p->value.shape() == shape, StateError, "weights file does not match network: " + name);
    is.read(reinterpret_cast<char*>(p->value.data()), static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    ADABLDM_CHECK(is.good(), StateError, "truncated weights file: " + file.string());
  }
}

std::string geometry_to_json(const ModelGeometry& g) {
  json j{{"image_size", g.image_size},         {"latent_size", g.latent_size},
         {"latent_channels", g.latent_channels}, {"codec_widths", g.codec_widths},
         {"denoiser_channels", g.denoiser_channels}, {"prompt_dim", g.prompt_dim},
         {"time_dim", g.time_dim},             {"objects", g.objects},
         {"defects", g.defects}};
  return j.dump();
}

ModelGeometry geometry_from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelGeometry g;
  g.image_size = j.at("image_size").get<int>();
  g.latent_size = j.at("latent_size").get<int>();
  g.latent_channels = j.at("latent_channels").get<int>();
  g.codec_widths = j.at("codec_widths").get<std::vector<int>>();
  g.denoiser_channels = j.at("denoiser_channels").get<int>();
  g.prompt_dim = j.at("prompt_dim").get<int>();
  g.time_dim = j.at("time_dim").get<int>();
  g.objects = j.at("objects").get<std::vector<std::string>>();
  g.defects = j.at("defects").get<std::vector<std::string>>();
  g.validate();
  return g;
}

void save_checkpoint(const std::filesystem::path& dir, const ModelBundle& bundle, const std::string& extra_json) {
  std::filesystem::create_directories(dir);
  save_weights(dir / "codec_encoder.bin", bundle.encoder.params());
  save_weights(dir / "codec_decoder.bin", bundle.decoder.params());
  save_weights(dir / "denoiser.bin", bundle.denoiser.params());
  save_weights(dir / "trimap_embedder.bin", bundle.trimap_embedder.params());
  save_weights(dir / "trimap_encoder.bin", bundle.control.params());
  save_weights(dir / "prompt_embedder.bin", bundle.prompts.params());
  json hashes = json::object();
  for (const auto& [k, v] : bundle.hashes()) hashes[k] = v;
  json manifest{{"format", "adabldm-checkpoint/1"},
                {"geometry", json::parse(geometry_to_json(bundle.geometry()))},
                {"latent_shift", bundle.encoder.latent_shift},
                {"latent_scale", bundle.encoder.latent_scale},
                {"codec_mae", bundle.state.codec_mae},
                {"state",
                 {{"codec", bundle.state.codec}, {"denoiser", bundle.state.denoiser}, {"control", bundle.state.control}}},
                {"hashes", hashes},
                {"extra", json::parse(extra_json)}};
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
}

ModelBundle load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  ADABLDM_CHECK(is, StateError, "missing checkpoint manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw StateError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  ModelBundle bundle(geometry_from_json(manifest.at("geometry").dump()), 0);
  load_weights(dir / "codec_encoder.bin", bundle.encoder.params());
  load_weights(dir / "codec_decoder.bin", bundle.decoder.params());
  load_weights(dir / "denoiser.bin", bundle.denoiser.params());
  load_weights(dir / "trimap_embedder.bin", bundle.trimap_embedder.params());
  load_weights(dir / "trimap_encoder.bin", bundle.control.params());
  load_weights(dir / "prompt_embedder.bin", bundle.prompts.params());
  bundle.set_latent_statistics(manifest.at("latent_shift").get<double>(), manifest.at("latent_scale").get<double>());
  bundle.state.codec = manifest.at("state").at("codec").get<bool>();
  bundle.state.denoiser = manifest.at("state").at("denoiser").get<bool>();
  bundle.state.control = manifest.at("state").at("control").get<bool>();
  bundle.state.codec_mae = manifest.at("codec_mae").get<double>();
  if (bundle.state.denoiser) bundle.denoiser.params().set_trainable(false);
  return bundle;
}

}  // namespace adabldm::models

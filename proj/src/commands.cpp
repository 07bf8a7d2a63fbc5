#include "adabldm/commands.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "adabldm/errors.hpp"
#include "adabldm/plot.hpp"

namespace adabldm::commands {

using nlohmann::json;

// ---------------------------------------------------------------- hashing

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  ADABLDM_CHECK(EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) == 1, Error,
                "sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  ADABLDM_CHECK(is, StateError, "cannot read " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  ADABLDM_CHECK(os, Error, "cannot write " + path.string());
  os << text;
}

std::string raw_hash(const std::vector<double>& data) {
  return sha256_hex(std::string(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double)));
}

/// Relative path -> file hash for every regular file below `dir`, skipping `exclude` at the top level.
std::map<std::string, std::string> hash_tree(const fs::path& dir, const std::set<std::string>& exclude = {}) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = fs::relative(entry.path(), dir).generic_string();
    if (exclude.count(rel)) continue;
    out[rel] = sha256_file(entry.path());
  }
  return out;
}

std::string tree_digest(const std::map<std::string, std::string>& files) {
  std::string acc;
  for (const auto& [rel, h] : files) acc += rel + '\0' + h + '\n';
  return sha256_hex(acc);
}

}  // namespace

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

// ---------------------------------------------------------------- config

namespace {

/// Strict reader for one JSON object: typed fields, unknown keys rejected on finish().
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw UsageError("config: '" + path_ + "' must be an object");
  }

  void get(const char* key, int& out) { read(key, out, [](const json& v) { return v.is_number_integer(); }); }
  void get(const char* key, long& out) { read(key, out, [](const json& v) { return v.is_number_integer(); }); }
  void get(const char* key, std::uint64_t& out) {
    read(key, out, [](const json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<long>() >= 0); });
  }
  void get(const char* key, double& out) { read(key, out, [](const json& v) { return v.is_number(); }); }
  void get(const char* key, bool& out) { read(key, out, [](const json& v) { return v.is_boolean(); }); }
  void get(const char* key, std::string& out) { read(key, out, [](const json& v) { return v.is_string(); }); }

  const json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }
  std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw UsageError("config: unknown key '" + (path_.empty() ? key : path_ + "." + key) + "'");
  }

 private:
  template <class T, class Pred>
  void read(const char* key, T& out, Pred ok) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const json& v = j_.at(key);
    if (!ok(v)) throw UsageError("config: '" + path(key) + "' has the wrong type");
    out = v.get<T>();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_diffusion(Section& s, pipeline::DiffusionTrainConfig& c) {
  s.get("steps", c.steps);
  s.get("batch_size", c.batch_size);
  s.get("learning_rate", c.learning_rate);
  s.get("weight_decay", c.weight_decay);
  s.get("prompt_dropout", c.prompt_dropout);
  s.get("eval_draws", c.eval_draws);
  s.get("augment", c.augment);
  s.finish();
}

json write_diffusion(const pipeline::DiffusionTrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"prompt_dropout", c.prompt_dropout},
          {"eval_draws", c.eval_draws},
          {"augment", c.augment}};
}

json config_json(const RunConfig& c) {
  json cats = json::array();
  for (const auto& spec : c.categories) {
    json s = json::parse(harness::spec_to_json(spec));
    s.erase("seed");
    cats.push_back(std::move(s));
  }
  const auto& m = c.dataset.mask;
  const auto& t = c.trials;
  return {{"seed", c.seed},
          {"workers", c.workers},
          {"geometry", c.geometry},
          {"categories", cats},
          {"schedule",
           {{"train_steps", c.schedule.train_steps},
            {"beta_start", c.schedule.beta_start},
            {"beta_end", c.schedule.beta_end}}},
          {"codec",
           {{"epochs", c.codec.epochs},
            {"batch_size", c.codec.batch_size},
            {"learning_rate", c.codec.learning_rate},
            {"weight_decay", c.codec.weight_decay},
            {"holdout_fraction", c.codec.holdout_fraction},
            {"augment", c.codec.augment},
            {"occlusion_probability", c.codec.occlusion_probability}}},
          {"pretrain", write_diffusion(c.pretrain)},
          {"control", write_diffusion(c.control)},
          {"generation",
           {{"free_steps", c.generation.free_steps},
            {"latent_steps", c.generation.latent_steps},
            {"image_steps", c.generation.image_steps},
            {"eta", c.generation.eta},
            {"guidance_scale", c.generation.guidance_scale}}},
          {"adaptation",
           {{"steps", c.adaptation.steps},
            {"lambda_con", c.adaptation.lambda_con},
            {"learning_rate", c.adaptation.learning_rate},
            {"beta1", c.adaptation.beta1},
            {"beta2", c.adaptation.beta2},
            {"weight_decay", c.adaptation.weight_decay}}},
          {"dataset",
           {{"count", c.dataset.count},
            {"retry_budget", c.dataset.retry_budget},
            {"adapt", c.dataset.adapt},
            {"rotation_min_deg", m.rotation_min_deg},
            {"rotation_max_deg", m.rotation_max_deg},
            {"scale_min", m.scale_min},
            {"scale_max", m.scale_max},
            {"allow_flip", m.allow_flip},
            {"attempts_per_scale", m.attempts_per_scale},
            {"shrink_factor", m.shrink_factor},
            {"min_support", m.min_support}}},
          {"trials",
           {{"n_images", t.n_images},
            {"n_pos", t.n_pos},
            {"n_neg", t.n_neg},
            {"n_trials", t.n_trials},
            {"gamma", t.gamma},
            {"C", t.C},
            {"stride", t.stride},
            {"feature_dim", t.feature_dim},
            {"k", t.k}}},
          {"cut_paste_count", c.cut_paste_count},
          {"inputs",
           {{"benchmark", c.inputs.benchmark},
            {"checkpoint", c.inputs.checkpoint},
            {"dataset", c.inputs.dataset},
            {"evaluation", c.inputs.evaluation}}}};
}

}  // namespace

void RunConfig::validate() const {
  ADABLDM_CHECK(workers >= 1, ParameterError, "config: workers must be at least 1");
  ADABLDM_CHECK(!categories.empty(), ParameterError, "config: at least one category is required");
  const models::ModelGeometry g = model_geometry();
  std::set<std::string> names;
  for (const auto& spec : categories) {
    spec.validate();
    ADABLDM_CHECK(spec.image_size == g.image_size, ParameterError,
                  "config: category '" + spec.category + "' image size differs from the model geometry");
    ADABLDM_CHECK(names.insert(spec.category).second, ParameterError,
                  "config: duplicate category '" + spec.category + "'");
  }
  ADABLDM_CHECK(schedule.train_steps >= 2 && schedule.beta_start > 0.0 && schedule.beta_end < 1.0 &&
                    schedule.beta_start <= schedule.beta_end,
                ParameterError, "config: bad noise schedule");
  ADABLDM_CHECK(codec.epochs >= 0 && codec.batch_size >= 1 && codec.learning_rate > 0.0, ParameterError,
                "config: bad codec training settings");
  for (const auto* d : {&pretrain, &control})
    ADABLDM_CHECK(d->steps >= 0 && d->batch_size >= 1 && d->learning_rate > 0.0 && d->prompt_dropout >= 0.0 &&
                      d->prompt_dropout <= 1.0 && d->eval_draws >= 1,
                  ParameterError, "config: bad diffusion training settings");
  generation.validate();
  ADABLDM_CHECK(generation.free_steps + generation.latent_steps + generation.image_steps <= schedule.train_steps,
                ParameterError, "config: more sampling steps than training timesteps");
  adaptation.validate();
  ADABLDM_CHECK(dataset.count >= 0 && dataset.retry_budget >= 1, ParameterError, "config: bad dataset settings");
  harness::TrialConfig t = trials;
  t.workers = workers;
  t.validate();
  ADABLDM_CHECK(cut_paste_count >= 0, ParameterError, "config: cut_paste_count must be non-negative");
}

models::ModelGeometry RunConfig::model_geometry() const {
  if (geometry == "desk") return models::ModelGeometry::desk();
  if (geometry == "tiny") return models::ModelGeometry::tiny();
  if (geometry == "full") return models::ModelGeometry::full();
  throw ParameterError("config: unknown geometry '" + geometry + "' (expected desk, tiny or full)");
}

RunConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  RunConfig c;
  Section top(j, "");
  top.get("seed", c.seed);
  top.get("workers", c.workers);
  top.get("geometry", c.geometry);
  if (const json* cats = top.child("categories")) {
    if (!cats->is_array()) throw UsageError("config: 'categories' must be an array");
    c.categories.clear();
    for (const auto& item : *cats) {
      try {
        c.categories.push_back(harness::spec_from_json(item.dump()));
      } catch (const ParameterError& e) {
        throw UsageError(std::string("config: categories: ") + e.what());
      }
    }
  }
  if (const json* s = top.child("schedule")) {
    Section sec(*s, "schedule");
    sec.get("train_steps", c.schedule.train_steps);
    sec.get("beta_start", c.schedule.beta_start);
    sec.get("beta_end", c.schedule.beta_end);
    sec.finish();
  }
  if (const json* s = top.child("codec")) {
    Section sec(*s, "codec");
    sec.get("epochs", c.codec.epochs);
    sec.get("batch_size", c.codec.batch_size);
    sec.get("learning_rate", c.codec.learning_rate);
    sec.get("weight_decay", c.codec.weight_decay);
    sec.get("holdout_fraction", c.codec.holdout_fraction);
    sec.get("augment", c.codec.augment);
    sec.get("occlusion_probability", c.codec.occlusion_probability);
    sec.finish();
  }
  if (const json* s = top.child("pretrain")) {
    Section sec(*s, "pretrain");
    read_diffusion(sec, c.pretrain);
  }
  if (const json* s = top.child("control")) {
    Section sec(*s, "control");
    read_diffusion(sec, c.control);
  }
  if (const json* s = top.child("generation")) {
    Section sec(*s, "generation");
    sec.get("free_steps", c.generation.free_steps);
    sec.get("latent_steps", c.generation.latent_steps);
    sec.get("image_steps", c.generation.image_steps);
    sec.get("eta", c.generation.eta);
    sec.get("guidance_scale", c.generation.guidance_scale);
    sec.finish();
  }
  if (const json* s = top.child("adaptation")) {
    Section sec(*s, "adaptation");
    sec.get("steps", c.adaptation.steps);
    sec.get("lambda_con", c.adaptation.lambda_con);
    sec.get("learning_rate", c.adaptation.learning_rate);
    sec.get("beta1", c.adaptation.beta1);
    sec.get("beta2", c.adaptation.beta2);
    sec.get("weight_decay", c.adaptation.weight_decay);
    sec.finish();
  }
  if (const json* s = top.child("dataset")) {
    Section sec(*s, "dataset");
    auto& m = c.dataset.mask;
    sec.get("count", c.dataset.count);
    sec.get("retry_budget", c.dataset.retry_budget);
    sec.get("adapt", c.dataset.adapt);
    sec.get("rotation_min_deg", m.rotation_min_deg);
    sec.get("rotation_max_deg", m.rotation_max_deg);
    sec.get("scale_min", m.scale_min);
    sec.get("scale_max", m.scale_max);
    sec.get("allow_flip", m.allow_flip);
    sec.get("attempts_per_scale", m.attempts_per_scale);
    sec.get("shrink_factor", m.shrink_factor);
    sec.get("min_support", m.min_support);
    sec.finish();
  }
  if (const json* s = top.child("trials")) {
    Section sec(*s, "trials");
    auto& t = c.trials;
    sec.get("n_images", t.n_images);
    sec.get("n_pos", t.n_pos);
    sec.get("n_neg", t.n_neg);
    sec.get("n_trials", t.n_trials);
    sec.get("gamma", t.gamma);
    sec.get("C", t.C);
    sec.get("stride", t.stride);
    sec.get("feature_dim", t.feature_dim);
    sec.get("k", t.k);
    sec.finish();
  }
  top.get("cut_paste_count", c.cut_paste_count);
  if (const json* s = top.child("inputs")) {
    Section sec(*s, "inputs");
    sec.get("benchmark", c.inputs.benchmark);
    sec.get("checkpoint", c.inputs.checkpoint);
    sec.get("dataset", c.inputs.dataset);
    sec.get("evaluation", c.inputs.evaluation);
    sec.finish();
  }
  top.finish();
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw UsageError(e.what());
  }
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  ADABLDM_CHECK(is, UsageError, "config: cannot read " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return config_from_json(os.str());
}

std::string config_to_json(const RunConfig& cfg, int indent) { return config_json(cfg).dump(indent); }

std::string config_hash(const RunConfig& cfg) { return sha256_hex(config_to_json(cfg, -1)).substr(0, 8); }

std::uint64_t benchmark_seed(const RunConfig& cfg, const std::string& category) {
  return derive_seed(derive_seed(cfg.seed, "benchmark"), category);
}
std::uint64_t training_seed(const RunConfig& cfg, const std::string& category) {
  return derive_seed(derive_seed(cfg.seed, "training"), category);
}
std::uint64_t model_seed(const RunConfig& cfg, const std::string& category) {
  return derive_seed(derive_seed(cfg.seed, "models"), category);
}
std::uint64_t generation_seed(const RunConfig& cfg, const std::string& category) {
  return derive_seed(derive_seed(cfg.seed, "generation"), category);
}
std::uint64_t trials_seed(const RunConfig& cfg, const std::string& category) {
  return derive_seed(derive_seed(cfg.seed, "trials"), category);
}

// ---------------------------------------------------------------- errors

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return 2;
  if (dynamic_cast<const StateError*>(&e)) return 3;
  return 1;
}

std::string error_record(const std::string& command, const std::exception& e) {
  const auto* err = dynamic_cast<const Error*>(&e);
  return json{{"status", "error"},
              {"command", command},
              {"kind", err ? err->kind() : "internal_error"},
              {"message", e.what()},
              {"exit_code", exit_code_for(e)}}
      .dump();
}

// ---------------------------------------------------------------- run directories

fs::path resolve_run_root(const RunOptions& options) {
  if (!options.run_root.empty()) return options.run_root;
  if (const char* env = std::getenv("ADABLDM_RUN_ROOT"); env && *env) return env;
  return "runs";
}

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kConfig = "config.json";

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw StateError("corrupt " + path.string() + ": " + e.what());
  }
}

/// One command invocation: run directory, input bookkeeping, manifest.
class Run {
 public:
  Run(std::string command, const RunConfig& cfg, const RunOptions& options)
      : command_(std::move(command)), cfg_(cfg), options_(options), start_(std::chrono::steady_clock::now()) {
    cfg_.validate();
    if (options_.replay) {
      replayed_ = read_json(*options_.replay);
      if (replayed_.value("command", "") != command_)
        throw UsageError("replay: manifest belongs to '" + replayed_.value("command", "?") + "', not '" + command_ +
                         "'");
    }
    const fs::path root = resolve_run_root(options_);
    fs::create_directories(root);
    const std::string base = command_ + "-" + timestamp() + "-" + config_hash(cfg_);
    dir_ = root / base;
    for (int n = 2; fs::exists(dir_); ++n) dir_ = root / (base + "-" + std::to_string(n));
    fs::create_directories(dir_);
    dir_ = fs::canonical(dir_);
    write_file(dir_ / kConfig, config_to_json(cfg_) + "\n");
  }

  const fs::path& dir() const { return dir_; }
  json& extra() { return extra_; }

  /// Resolves an input artifact directory, records its digest and checks it against a replayed run.
  fs::path input(const std::string& name, const std::string& path, const std::string& subdir) {
    if (path.empty()) throw UsageError(command_ + ": inputs." + name + " is required");
    fs::path p = path;
    if (fs::is_directory(p / subdir)) p /= subdir;
    if (!fs::is_directory(p)) throw StateError(command_ + ": missing " + name + " directory " + path);
    p = fs::canonical(p);
    const std::string digest = tree_digest(hash_tree(p, {kManifest, kConfig}));
    inputs_[name] = {{"path", p.string()}, {"digest", digest}};
    if (!replayed_.is_null()) {
      const std::string expected = replayed_["inputs"][name].value("digest", "");
      if (expected != digest) throw StateError("replay: input '" + name + "' changed since the recorded run");
    }
    return p;
  }

  void log(const std::string& msg) const {
    if (!options_.verbose) return;
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    char buf[32];
    std::snprintf(buf, sizeof buf, "[%7.1fs] ", t);
    std::cerr << buf << command_ << ": " << msg << std::endl;
  }

  CommandResult finish() {
    const auto files = hash_tree(dir_, {kManifest, kConfig});
    CommandResult result;
    result.run_dir = dir_;
    result.digest = tree_digest(files);
    json manifest{{"command", command_},
                  {"config", config_json(cfg_)},
                  {"config_hash", config_hash(cfg_)},
                  {"inputs", inputs_},
                  {"outputs", files},
                  {"digest", result.digest},
                  {"elapsed_seconds",
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count()},
                  {"details", extra_}};
    if (!replayed_.is_null()) {
      result.replay_match = replayed_.value("digest", "") == result.digest;
      manifest["replay"] = {{"of", fs::absolute(*options_.replay).string()}, {"match", *result.replay_match}};
    }
    write_file(dir_ / kManifest, manifest.dump(2) + "\n");
    return result;
  }

 private:
  std::string command_;
  RunConfig cfg_;
  RunOptions options_;
  std::chrono::steady_clock::time_point start_;
  fs::path dir_;
  json inputs_ = json::object();
  json extra_ = json::object();
  json replayed_;
};

std::string index_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03zu.png", i);
  return buf;
}

schedule::NoiseSchedule make_schedule(const RunConfig& cfg) {
  return schedule::make_schedule(cfg.schedule.train_steps, cfg.schedule.beta_start, cfg.schedule.beta_end,
                                 schedule::Spacing::linear, cfg.generation.eta);
}

models::ModelGeometry category_geometry(const RunConfig& cfg, const std::string& category) {
  models::ModelGeometry g = cfg.model_geometry();
  g.objects = {category};
  return g;
}

BinaryMask foreground_of(const harness::ToyBenchmark& bench, const ImageGrid& x) {
  return trimap::estimate_foreground(x, bench.foreground_kind(), {.all_ones_fallback = true});
}

harness::ToyBenchmark load_category(const fs::path& bench_dir, const harness::BenchmarkSpec& spec) {
  const fs::path dir = bench_dir / spec.category;
  if (!fs::is_directory(dir)) throw StateError("benchmark has no category '" + spec.category + "'");
  return harness::load_benchmark(dir);
}

// Training loss of the exact-noise and all-zero predictors on fresh draws over the batch.
std::pair<double, double> reference_losses(const models::ModelBundle& bundle, const pipeline::LdmBatch& batch,
                                           const schedule::NoiseSchedule& sched, std::uint64_t seed, int repeats) {
  Rng rng(seed);
  const auto& g = bundle.geometry();
  double oracle = 0.0, zero = 0.0;
  for (int r = 0; r < repeats; ++r) {
    const auto draws =
        pipeline::draw_ldm_noise(batch.size(), {g.latent_channels, g.latent_size, g.latent_size}, sched, 0.0, rng);
    const pipeline::EpsPredictor exact = [&](const nn::Var&, const std::vector<int>&,
                                             const std::vector<models::PromptSpec>&,
                                             const Tensor*) { return nn::constant(draws.noise); };
    const pipeline::EpsPredictor none = [](const nn::Var& z, const std::vector<int>&,
                                           const std::vector<models::PromptSpec>&,
                                           const Tensor*) { return nn::constant(Tensor(z->value.shape())); };
    oracle += pipeline::ldm_loss(batch, sched, draws, exact)->value[0];
    zero += pipeline::ldm_loss(batch, sched, draws, none)->value[0];
  }
  return {oracle / repeats, zero / repeats};
}

json loss_json(const pipeline::TrainLog& log) {
  return {{"losses", log.losses}, {"initial_eval_loss", log.initial_eval_loss}, {"final_eval_loss", log.final_eval_loss}};
}

plot::Axes log_axes(std::string title, std::string xlabel, std::string ylabel) {
  plot::Axes a;
  a.title = std::move(title);
  a.xlabel = std::move(xlabel);
  a.ylabel = std::move(ylabel);
  a.log_y = true;
  return a;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

json median_json(const metrics::MetricsReport& r) {
  auto col = [&](double metrics::MetricScores::*field) {
    std::vector<double> v;
    for (const auto& t : r.trials) v.push_back(t.*field);
    return median(v);
  };
  return {{"pixel_auc", col(&metrics::MetricScores::pixel_auc)},
          {"pro", col(&metrics::MetricScores::pro)},
          {"ap", col(&metrics::MetricScores::ap)},
          {"iap", col(&metrics::MetricScores::iap)},
          {"iap_at_k", col(&metrics::MetricScores::iap_at_k)}};
}

}  // namespace

// ---------------------------------------------------------------- make-bench

CommandResult cmd_make_bench(const RunConfig& cfg, const RunOptions& options) {
  Run run("make-bench", cfg, options);
  for (auto spec : cfg.categories) {
    spec.seed = benchmark_seed(cfg, spec.category);
    Rng rng(spec.seed);
    run.log("rendering " + spec.category);
    harness::save_benchmark(run.dir() / "benchmark", harness::make_toy_benchmark(spec, rng));
  }
  return run.finish();
}

// ---------------------------------------------------------------- train

CommandResult cmd_train(const RunConfig& cfg, const RunOptions& options) {
  Run run("train", cfg, options);
  const fs::path bench_dir = run.input("benchmark", cfg.inputs.benchmark, "benchmark");
  const auto sched = make_schedule(cfg);
  for (const auto& spec : cfg.categories) {
    const harness::ToyBenchmark bench = load_category(bench_dir, spec);
    models::ModelBundle bundle(category_geometry(cfg, spec.category), model_seed(cfg, spec.category));
    Rng rng(training_seed(cfg, spec.category));

    std::vector<ImageGrid> codec_images = bench.train_ok;
    codec_images.insert(codec_images.end(), bench.seed_images.begin(), bench.seed_images.end());
    run.log(spec.category + ": codec on " + std::to_string(codec_images.size()) + " images");
    const auto codec = pipeline::train_codec(bundle, codec_images, cfg.codec, rng);
    run.log(spec.category + ": codec held-out MAE " + std::to_string(codec.holdout_mae));

    const auto genuine = harness::genuine_samples(bench);
    std::vector<pipeline::DiffusionExample> genuine_examples;
    for (const auto& s : genuine) genuine_examples.push_back({s.image, s.trimap, s.prompt});
    const auto genuine_batch = pipeline::make_ldm_batch(bundle, genuine_examples);
    const std::uint64_t eval_seed = derive_seed(training_seed(cfg, spec.category), "control_eval");
    // Trimap-conditioned loss of the untrained diffusion stack, the reference for the final value.
    const double objective_initial = pipeline::evaluate_ldm_loss(bundle, genuine_batch, sched, eval_seed, 4);
    const auto [oracle_loss, zero_loss] = reference_losses(bundle, genuine_batch, sched, eval_seed, 16);

    std::vector<pipeline::DiffusionExample> domain;
    const auto good = bundle.prompt(spec.category, "good");
    for (const auto& x : bench.train_ok)
      domain.push_back({x, trimap::build_trimap(foreground_of(bench, x), BinaryMask(x.height, x.width)), good});
    for (const auto& s : genuine) domain.push_back({s.image, s.trimap, s.prompt});
    run.log(spec.category + ": denoiser pretraining, " + std::to_string(cfg.pretrain.steps) + " steps");
    const auto pre = pipeline::pretrain_denoiser(bundle, domain, sched, cfg.pretrain, rng);
    run.log(spec.category + ": pretrain eval loss " + std::to_string(pre.initial_eval_loss) + " -> " +
            std::to_string(pre.final_eval_loss));

    run.log(spec.category + ": control fine-tuning, " + std::to_string(cfg.control.steps) + " steps");
    const auto ctl = pipeline::finetune_control(bundle, genuine, sched, cfg.control, rng);
    const double matched = pipeline::evaluate_ldm_loss(bundle, genuine_batch, sched, eval_seed, 4);
    const double shuffled = pipeline::evaluate_ldm_loss(bundle, genuine_batch, sched, eval_seed, 4, true);
    run.log(spec.category + ": control eval loss " + std::to_string(ctl.initial_eval_loss) + " -> " +
            std::to_string(ctl.final_eval_loss) + ", shuffled trimaps " + std::to_string(shuffled));

    const json log{{"codec", {{"epoch_losses", codec.epoch_losses}, {"holdout_mae", codec.holdout_mae}}},
                   {"pretrain", loss_json(pre)},
                   {"control", loss_json(ctl)},
                   {"control_check", {{"matched_trimaps", matched}, {"shuffled_trimaps", shuffled}}},
                   {"objective",
                    {{"initial", objective_initial},
                     {"final", matched},
                     {"oracle_predictor", oracle_loss},
                     {"zero_predictor", zero_loss}}},
                   {"schedule",
                    {{"train_steps", cfg.schedule.train_steps},
                     {"beta_start", cfg.schedule.beta_start},
                     {"beta_end", cfg.schedule.beta_end},
                     {"spacing", "linear"}}}};
    const fs::path ckpt = run.dir() / "checkpoints" / spec.category;
    models::save_checkpoint(ckpt, bundle, json{{"schedule", log["schedule"]}}.dump());
    write_file(ckpt / "training_log.json", log.dump(2) + "\n");
    run.extra()[spec.category] = {{"codec_mae", codec.holdout_mae},
                                  {"pretrain_eval", {pre.initial_eval_loss, pre.final_eval_loss}},
                                  {"control_eval", {ctl.initial_eval_loss, ctl.final_eval_loss}},
                                  {"control_check", log["control_check"]},
                                  {"objective", log["objective"]}};
  }
  return run.finish();
}

// ---------------------------------------------------------------- generate

CommandResult cmd_generate(const RunConfig& cfg, const RunOptions& options) {
  Run run("generate", cfg, options);
  const fs::path bench_dir = run.input("benchmark", cfg.inputs.benchmark, "benchmark");
  const fs::path ckpt_dir = run.input("checkpoint", cfg.inputs.checkpoint, "checkpoints");
  const auto sched = make_schedule(cfg);
  for (const auto& spec : cfg.categories) {
    const harness::ToyBenchmark bench = load_category(bench_dir, spec);
    if (!fs::is_directory(ckpt_dir / spec.category))
      throw StateError("generate: no checkpoint for category '" + spec.category + "'");
    const models::ModelBundle bundle = models::load_checkpoint(ckpt_dir / spec.category);
    if (!bundle.state.ready()) throw StateError("generate: checkpoint for '" + spec.category + "' is not fully trained");

    pipeline::DatasetRequest request;
    request.count = cfg.dataset.count;
    for (std::size_t i = 0; i < bench.train_ok.size(); ++i)
      request.sources.push_back({"train/good/" + index_name(i), bench.train_ok[i], foreground_of(bench, bench.train_ok[i])});
    request.seed_masks = bench.seed_masks;
    request.prompts = {bundle.prompt(spec.category, "defect")};
    request.mask_options = cfg.dataset.mask;
    request.retry_budget = cfg.dataset.retry_budget;
    request.adapt = cfg.dataset.adapt;
    request.workers = cfg.workers;
    pipeline::GenerationConfig gen = cfg.generation;
    gen.seed = generation_seed(cfg, spec.category);

    run.log(spec.category + ": generating " + std::to_string(request.count) + " samples");
    const auto result = pipeline::generate_dataset(request, bundle, sched, gen, cfg.adaptation);

    const fs::path out = run.dir() / "dataset" / spec.category;
    fs::create_directories(out / "train/good");
    fs::create_directories(out / "test/good");
    fs::create_directories(out / "test/defect");
    fs::create_directories(out / "ground_truth/defect");
    fs::create_directories(out / "trimaps/defect");
    for (std::size_t i = 0; i < bench.train_ok.size(); ++i)
      png::write_image(out / "train/good" / index_name(i), bench.train_ok[i]);
    // Held-out good images of the benchmark complete the layout.
    for (std::size_t i = 0, k = 0; i < bench.test_images.size(); ++i)
      if (std::count(bench.test_masks[i].data.begin(), bench.test_masks[i].data.end(), 1) == 0)
        png::write_image(out / "test/good" / index_name(k++), bench.test_images[i]);
    std::map<std::string, const ImageGrid*> sources;
    for (const auto& s : request.sources) sources[s.id] = &s.image;

    json samples = json::array();
    double worst = 0.0;
    for (std::size_t i = 0; i < result.samples.size(); ++i) {
      const auto& s = result.samples[i];
      png::write_image(out / "test/defect" / index_name(i), s.image);
      png::write_mask(out / "ground_truth/defect" / index_name(i), s.mask);
      trimap::write_trimap(out / "trimaps/defect" / index_name(i), s.trimap);
      const ImageGrid& src = *sources.at(s.source_id);
      const BinaryMask keep = logical_not(s.mask);
      const double preserve = mean_abs_error(s.image, src, keep);
      worst = std::max(worst, preserve);
      samples.push_back({{"file", "test/defect/" + index_name(i)},
                         {"seed", s.seed},
                         {"source", s.source_id},
                         {"seed_mask", s.seed_mask_index},
                         {"prompt", {s.prompt.object_token, s.prompt.defect_token}},
                         {"adapted", s.adapted},
                         {"defect_pixels", std::count(s.mask.data.begin(), s.mask.data.end(), 1)},
                         {"preservation_mae", preserve},
                         {"image_sha256", raw_hash(s.image.data)}});
    }
    json hashes = json::object();
    for (const auto& [k, v] : bundle.hashes()) hashes[k] = v;
    const json details{{"requested", request.count},
                       {"generated", result.samples.size()},
                       {"skipped_seeds", result.skipped_seeds},
                       {"retries", result.retries},
                       {"top_seed", gen.seed},
                       {"codec_mae", bundle.state.codec_mae},
                       {"worst_preservation_mae", worst},
                       {"checkpoint_hashes", hashes},
                       {"samples", samples}};
    write_file(out / "samples.json", details.dump(2) + "\n");
    run.extra()[spec.category] = {{"generated", result.samples.size()},
                                  {"skipped", result.skipped_seeds.size()},
                                  {"codec_mae", bundle.state.codec_mae},
                                  {"worst_preservation_mae", worst}};
    run.log(spec.category + ": wrote " + std::to_string(result.samples.size()) + " samples, skipped " +
            std::to_string(result.skipped_seeds.size()));
  }
  return run.finish();
}

std::vector<pipeline::DefectSample> load_generated(const fs::path& category_dir) {
  const fs::path images = category_dir / "test/defect";
  if (!fs::is_directory(images)) return {};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<pipeline::DefectSample> out;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const fs::path name = files[i].filename();
    const fs::path mask_path = category_dir / "ground_truth/defect" / name;
    if (!fs::exists(mask_path)) throw StateError("generated set: no mask for " + files[i].string());
    pipeline::DefectSample s;
    s.image = png::read_image(files[i]);
    s.mask = png::read_mask(mask_path);
    const fs::path tri = category_dir / "trimaps/defect" / name;
    if (fs::exists(tri)) {
      s.trimap = trimap::read_trimap(tri);
    } else {
      s.trimap = trimap::build_trimap(BinaryMask(s.mask.height, s.mask.width, 1), s.mask);
    }
    s.prompt = {0, 1, false};
    s.source_id = name.string();
    s.seed = i;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- evaluate

CommandResult cmd_evaluate(const RunConfig& cfg, const RunOptions& options) {
  Run run("evaluate", cfg, options);
  const fs::path bench_dir = run.input("benchmark", cfg.inputs.benchmark, "benchmark");
  const fs::path data_dir = run.input("dataset", cfg.inputs.dataset, "dataset");
  std::vector<harness::Comparison> rows;
  json summary = json::object();
  for (const auto& spec : cfg.categories) {
    const harness::ToyBenchmark bench = load_category(bench_dir, spec);
    const auto generated = load_generated(data_dir / spec.category);
    if (generated.empty()) throw UsageError("evaluate: generated set for '" + spec.category + "' is empty");
    harness::TrialConfig trials = cfg.trials;
    trials.seed = trials_seed(cfg, spec.category);
    trials.workers = cfg.workers;
    const int cut_paste = cfg.cut_paste_count > 0 ? cfg.cut_paste_count : static_cast<int>(generated.size());
    run.log(spec.category + ": " + std::to_string(trials.n_trials) + " trials for each of 3 training sets");
    rows.push_back(harness::run_comparison(bench, generated, trials, cut_paste));
    write_file(run.dir() / "evaluation" / (spec.category + ".json"), rows.back().to_json(2) + "\n");
    summary[spec.category] = {{"genuine", median_json(rows.back().genuine)},
                              {"cut_paste", median_json(rows.back().cut_paste)},
                              {"adabldm", median_json(rows.back().generated)},
                              {"generated_count", generated.size()},
                              {"cut_paste_count", cut_paste}};
  }
  const std::string table = harness::comparison_table(rows);
  write_file(run.dir() / "evaluation" / "table.md", table);
  write_file(run.dir() / "evaluation" / "medians.json", summary.dump(2) + "\n");
  run.extra() = {{"medians", summary}, {"table", table}};
  return run.finish();
}

// ---------------------------------------------------------------- report

CommandResult cmd_report(const RunConfig& cfg, const RunOptions& options) {
  Run run("report", cfg, options);
  const fs::path eval_dir = run.input("evaluation", cfg.inputs.evaluation, "evaluation");
  std::optional<fs::path> ckpt_dir;
  if (!cfg.inputs.checkpoint.empty()) ckpt_dir = run.input("checkpoint", cfg.inputs.checkpoint, "checkpoints");
  const fs::path plots = run.dir() / "plots";
  fs::create_directories(plots);

  const std::pair<const char*, const char*> methods[3] = {
      {"genuine", "Genuine"}, {"cut_paste", "Cut-paste"}, {"adabldm", "AdaBLDM"}};
  std::ostringstream md;
  md << "# Run report\n\n";
  const fs::path table = eval_dir / "table.md";
  if (fs::exists(table)) md << "## Comparison\n\n" << read_file(table) << "\n";
  const fs::path medians = eval_dir / "medians.json";
  json med = fs::exists(medians) ? read_json(medians) : json::object();

  for (const auto& spec : cfg.categories) {
    const fs::path eval_file = eval_dir / (spec.category + ".json");
    if (!fs::exists(eval_file)) throw StateError("report: no evaluation for category '" + spec.category + "'");
    const json ev = read_json(eval_file);
    md << "## " << spec.category << "\n\n";

    std::vector<plot::Series> pr, ir;
    for (const auto& [key, label] : methods) {
      const json& c = ev.at("curves").at(key);
      pr.push_back({label, c.at("recall").get<std::vector<double>>(), c.at("precision").get<std::vector<double>>()});
      ir.push_back(
          {label, c.at("instance_recall").get<std::vector<double>>(), c.at("precision").get<std::vector<double>>()});
    }
    const std::pair<double, double> unit{0.0, 1.0};
    plot::line_plot(plots / (spec.category + "_pr.png"),
                    {spec.category + ": pixel precision-recall (trial 0)", "recall", "precision", false, unit, unit}, pr);
    plot::line_plot(plots / (spec.category + "_instance_recall.png"),
                    {spec.category + ": precision vs instance recall (trial 0)", "instance recall", "precision", false,
                     unit, unit},
                    ir);
    md << "![PR](plots/" << spec.category << "_pr.png)\n![Instance recall](plots/" << spec.category
       << "_instance_recall.png)\n\n";

    if (med.contains(spec.category)) {
      md << "Median over trials (percent):\n\n| Method | Pixel-AUC | PRO | AP | IAP | IAP@k |\n|---|---|---|---|---|---|\n";
      for (const auto& [key, label] : methods) {
        const json& m = med[spec.category][key];
        char buf[160];
        std::snprintf(buf, sizeof buf, "| %s | %.2f | %.2f | %.2f | %.2f | %.2f |\n", label,
                      100 * m.value("pixel_auc", 0.0), 100 * m.value("pro", 0.0), 100 * m.value("ap", 0.0),
                      100 * m.value("iap", 0.0), 100 * m.value("iap_at_k", 0.0));
        md << buf;
      }
      md << "\n";
    }

    if (ckpt_dir) {
      const fs::path log_file = *ckpt_dir / spec.category / "training_log.json";
      if (!fs::exists(log_file)) throw StateError("report: no training log for category '" + spec.category + "'");
      const json log = read_json(log_file);
      auto steps = [](std::size_t n) {
        std::vector<double> x(n);
        for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<double>(i + 1);
        return x;
      };
      const auto codec = log.at("codec").at("epoch_losses").get<std::vector<double>>();
      if (!codec.empty())
        plot::line_plot(plots / (spec.category + "_loss_codec.png"),
                        log_axes(spec.category + ": codec reconstruction loss", "epoch", "pixel MSE"),
                        {{"train", steps(codec.size()), codec}});
      for (const char* stage : {"pretrain", "control"}) {
        const auto losses = log.at(stage).at("losses").get<std::vector<double>>();
        if (losses.empty()) continue;
        const int window = std::max<int>(1, static_cast<int>(losses.size()) / 50);
        plot::line_plot(plots / (spec.category + "_loss_" + stage + ".png"),
                        log_axes(spec.category + ": " + stage + " noise-prediction loss", "step", "MSE"),
                        {{"per step", steps(losses.size()), losses},
                         {"moving average", steps(losses.size()), plot::moving_average(losses, window)}});
      }
      char buf[256];
      std::snprintf(buf, sizeof buf,
                    "Training: codec held-out MAE %.4f; pretrain eval loss %.4f -> %.4f; control eval loss %.4f -> "
                    "%.4f (shuffled trimaps %.4f)\n\n",
                    log["codec"].value("holdout_mae", 0.0), log["pretrain"].value("initial_eval_loss", 0.0),
                    log["pretrain"].value("final_eval_loss", 0.0), log["control"].value("initial_eval_loss", 0.0),
                    log["control"].value("final_eval_loss", 0.0),
                    log["control_check"].value("shuffled_trimaps", 0.0));
      md << buf;
      for (const char* stage : {"codec", "pretrain", "control"})
        if (fs::exists(plots / (spec.category + "_loss_" + stage + ".png")))
          md << "![" << stage << " loss](plots/" << spec.category << "_loss_" << stage << ".png)\n";
      md << "\n";
    }
  }
  write_file(run.dir() / "summary.md", md.str());
  return run.finish();
}

// ---------------------------------------------------------------- dispatch

RunConfig manifest_config(const fs::path& manifest) {
  const json m = read_json(manifest);
  if (!m.contains("config")) throw StateError("replay: manifest has no config");
  return config_from_json(m.at("config").dump());
}

CommandResult run_command(const std::string& command, const RunConfig& cfg, const RunOptions& options) {
  RunConfig effective = cfg;
  if (options.replay) {
    effective = manifest_config(*options.replay);
    effective.workers = cfg.workers;
  }
  if (command == "make-bench") return cmd_make_bench(effective, options);
  if (command == "train") return cmd_train(effective, options);
  if (command == "generate") return cmd_generate(effective, options);
  if (command == "evaluate") return cmd_evaluate(effective, options);
  if (command == "report") return cmd_report(effective, options);
  throw UsageError("unknown command '" + command + "'");
}

}  // namespace adabldm::commands

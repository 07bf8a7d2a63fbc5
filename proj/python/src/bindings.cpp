// Python bindings: metrics, trimaps, diffusion arithmetic, the toy benchmark,
// checkpoint-based generation and the run commands. Arrays are NumPy float64
// (C,H,W) images and uint8 (H,W) masks.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include "adabldm/commands.hpp"
#include "adabldm/errors.hpp"
#include "adabldm/harness.hpp"
#include "adabldm/metrics.hpp"
#include "adabldm/pipeline.hpp"
#include "adabldm/schedule.hpp"
#include "adabldm/trimap.hpp"

namespace py = pybind11;
using namespace adabldm;
using json = nlohmann::json;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

template <class Grid>
Grid planar_from(const F64& a, const char* what) {
  if (a.ndim() != 3) throw ParameterError(std::string(what) + ": expected a (C,H,W) array");
  Grid g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), g.data.begin());
  return g;
}

template <class Grid>
F64 planar_to(const Grid& g) {
  F64 out({g.channels, g.height, g.width});
  std::copy(g.data.begin(), g.data.end(), out.mutable_data());
  return out;
}

template <class Mask>
Mask mask_from(const py::array& a, const char* what) {
  const U8 m = U8::ensure(a.attr("astype")("uint8"));
  if (!m || m.ndim() != 2) throw ParameterError(std::string(what) + ": expected an (H,W) mask");
  Mask out(static_cast<int>(m.shape(0)), static_cast<int>(m.shape(1)));
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = m.data()[i] != 0;
  return out;
}

template <class Mask>
U8 mask_to(const Mask& m) {
  U8 out({m.height, m.width});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

F64 trimap_to(const Trimap& t) {
  F64 out({t.height, t.width});
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

Trimap trimap_from(const F64& a) {
  if (a.ndim() != 2) throw ParameterError("trimap: expected an (H,W) array");
  Trimap t(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

Tensor tensor_from(const F64& a) {
  std::vector<int> shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

F64 tensor_to(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  F64 out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

std::vector<metrics::Sample> samples_from(const std::vector<F64>& scores, const std::vector<py::array>& masks) {
  if (scores.size() != masks.size()) throw ParameterError("metrics: scores and masks differ in length");
  std::vector<metrics::Sample> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const F64& s = scores[i];
    if (s.ndim() != 2) throw ParameterError("metrics: score maps must be (H,W)");
    metrics::ScoreMap map(static_cast<int>(s.shape(0)), static_cast<int>(s.shape(1)));
    std::copy(s.data(), s.data() + s.size(), map.data.begin());
    BinaryMask m = mask_from<BinaryMask>(masks[i], "metrics");
    if (m.height != map.height || m.width != map.width) throw ParameterError("metrics: score map and mask differ in shape");
    out.push_back({std::move(map), metrics::GroundTruth(std::move(m))});
  }
  return out;
}

py::dict scores_dict(const metrics::MetricScores& m) {
  py::dict d;
  d["pixel_auc"] = m.pixel_auc;
  d["pro"] = m.pro;
  d["ap"] = m.ap;
  d["iap"] = m.iap;
  d["iap_at_k"] = m.iap_at_k;
  return d;
}

py::object parse_json(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

std::string dump_json(const py::object& obj) {
  if (py::isinstance<py::str>(obj)) return obj.cast<std::string>();
  return py::module_::import("json").attr("dumps")(obj).cast<std::string>();
}

py::dict result_dict(const commands::CommandResult& r) {
  py::dict d;
  d["run_dir"] = r.run_dir.string();
  d["digest"] = r.digest;
  d["replay_match"] = r.replay_match ? py::cast(*r.replay_match) : py::none();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Trimap-controlled latent diffusion defect synthesis with decoder adaptation";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ParameterError>(m, "ParameterError", base.ptr());
  py::register_exception<PreconditionError>(m, "PreconditionError", base.ptr());
  py::register_exception<StateError>(m, "StateError", base.ptr());
  py::register_exception<FitError>(m, "FitError", base.ptr());
  py::register_exception<DegenerateForegroundError>(m, "DegenerateForegroundError", base.ptr());
  py::register_exception<UndefinedMetricError>(m, "UndefinedMetricError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());

  // ------------------------------------------------------------ metrics
  m.def(
      "evaluate",
      [](const std::vector<F64>& scores, const std::vector<py::array>& masks, int k, double fpr_limit) {
        return scores_dict(metrics::evaluate(samples_from(scores, masks), k, fpr_limit));
      },
      py::arg("scores"), py::arg("masks"), py::arg("k") = metrics::kDefaultRecallPercent,
      py::arg("fpr_limit") = metrics::kDefaultFprLimit,
      "Pixel-AUC, PRO, AP, IAP and IAP@k over a list of score maps and binary masks.");
  m.def(
      "threshold_sweep",
      [](const std::vector<F64>& scores, const std::vector<py::array>& masks) {
        const auto curve = metrics::threshold_sweep(samples_from(scores, masks));
        py::dict d;
        std::vector<double> cols[6];
        for (const auto& p : curve) {
          cols[0].push_back(p.threshold);
          cols[1].push_back(p.fpr);
          cols[2].push_back(p.recall);
          cols[3].push_back(p.precision);
          cols[4].push_back(p.instance_recall);
          cols[5].push_back(p.region_overlap);
        }
        const char* names[] = {"threshold", "fpr", "recall", "precision", "instance_recall", "region_overlap"};
        for (int i = 0; i < 6; ++i) d[names[i]] = py::array(py::cast(cols[i]));
        return d;
      },
      py::arg("scores"), py::arg("masks"), "Operating points at every distinct score, strictest first.");

  // ------------------------------------------------------------ trimaps
  m.def(
      "estimate_foreground",
      [](const F64& image, const std::string& kind, bool fallback) {
        if (kind != "object" && kind != "texture") throw ParameterError("kind must be 'object' or 'texture'");
        return mask_to(trimap::estimate_foreground(
            planar_from<ImageGrid>(image, "image"),
            kind == "object" ? trimap::ForegroundKind::object : trimap::ForegroundKind::texture,
            {.all_ones_fallback = fallback}));
      },
      py::arg("image"), py::arg("kind") = "object", py::arg("all_ones_fallback") = false);
  m.def(
      "synth_defect_mask",
      [](const std::vector<py::array>& seeds, const py::array& foreground, std::uint64_t seed) {
        std::vector<BinaryMask> s;
        for (const auto& a : seeds) s.push_back(mask_from<BinaryMask>(a, "seed mask"));
        Rng rng(seed);
        const auto out = trimap::synth_defect_mask(s, mask_from<BinaryMask>(foreground, "foreground"), {}, rng);
        return py::make_tuple(mask_to(out.mask), out.seed_index);
      },
      py::arg("seed_masks"), py::arg("foreground"), py::arg("seed"),
      "Random rotated and scaled copy of one seed mask placed inside the foreground; returns (mask, seed_index).");
  m.def(
      "build_trimap",
      [](const py::array& fg, const py::array& defect) {
        return trimap_to(trimap::build_trimap(mask_from<BinaryMask>(fg, "foreground"), mask_from<BinaryMask>(defect, "defect")));
      },
      py::arg("foreground"), py::arg("defect"));
  m.def(
      "split_trimap",
      [](const F64& t) {
        const auto [fg, defect] = trimap::split_trimap(trimap_from(t));
        return py::make_tuple(mask_to(fg), mask_to(defect));
      },
      py::arg("trimap"));
  m.def(
      "dilate_downsample",
      [](const py::array& defect, int h, int w) {
        return mask_to(trimap::dilate_downsample(mask_from<BinaryMask>(defect, "defect"), h, w));
      },
      py::arg("defect"), py::arg("latent_height"), py::arg("latent_width"));

  // ------------------------------------------------------------ diffusion arithmetic
  py::class_<schedule::NoiseSchedule>(m, "NoiseSchedule")
      .def(py::init([](int steps, double beta_start, double beta_end, double eta) {
             return schedule::make_schedule(steps, beta_start, beta_end, schedule::Spacing::linear, eta);
           }),
           py::arg("train_steps") = 1000, py::arg("beta_start") = 1e-4, py::arg("beta_end") = 2e-2,
           py::arg("eta") = 0.0)
      .def_readonly("train_steps", &schedule::NoiseSchedule::train_steps)
      .def_property_readonly("betas", [](const schedule::NoiseSchedule& s) { return py::array(py::cast(s.betas)); })
      .def_property_readonly("alpha_bars",
                             [](const schedule::NoiseSchedule& s) { return py::array(py::cast(s.alpha_bars)); })
      .def(
          "q_sample",
          [](const schedule::NoiseSchedule& s, const F64& z0, int t, const F64& eps) {
            return tensor_to(schedule::q_sample(tensor_from(z0), t, tensor_from(eps), s));
          },
          py::arg("z0"), py::arg("t"), py::arg("eps"))
      .def(
          "ddim_step",
          [](const schedule::NoiseSchedule& s, const F64& z, const F64& eps, int t, int t_prev, double eta,
             std::uint64_t seed) {
            Rng rng(seed);
            return tensor_to(schedule::ddim_step(tensor_from(z), tensor_from(eps), t, t_prev, s, eta, rng));
          },
          py::arg("z_t"), py::arg("eps"), py::arg("t"), py::arg("t_prev"), py::arg("eta") = 0.0, py::arg("seed") = 0,
          "One DDIM update; t_prev = -1 steps to the clean latent.");
  m.def(
      "plan_timesteps",
      [](int train_steps, int free_steps, int latent_steps, int image_steps) {
        return schedule::plan_timesteps(train_steps, free_steps, latent_steps, image_steps).steps;
      },
      py::arg("train_steps"), py::arg("free_steps"), py::arg("latent_steps"), py::arg("image_steps"));

  // ------------------------------------------------------------ benchmark
  m.def(
      "make_toy_benchmark",
      [](const py::object& spec, std::uint64_t seed) {
        harness::BenchmarkSpec s = harness::spec_from_json(dump_json(spec));
        s.seed = seed;
        Rng rng(seed);
        const auto b = harness::make_toy_benchmark(s, rng);
        auto images = [](const std::vector<ImageGrid>& v) {
          py::list l;
          for (const auto& x : v) l.append(planar_to(x));
          return l;
        };
        auto masks = [](const std::vector<BinaryMask>& v) {
          py::list l;
          for (const auto& x : v) l.append(mask_to(x));
          return l;
        };
        py::dict d;
        d["spec"] = parse_json(harness::spec_to_json(b.spec));
        d["train_ok"] = images(b.train_ok);
        d["seed_images"] = images(b.seed_images);
        d["seed_masks"] = masks(b.seed_masks);
        d["test_images"] = images(b.test_images);
        d["test_masks"] = masks(b.test_masks);
        return d;
      },
      py::arg("spec") = "{}", py::arg("seed") = 0,
      "Procedural benchmark; spec is a JSON string or dict with BenchmarkSpec fields.");

  // ------------------------------------------------------------ trained models
  py::class_<models::ModelBundle>(m, "Model")
      .def_static(
          "load", [](const std::filesystem::path& dir) { return models::load_checkpoint(dir); }, py::arg("directory"),
          "Loads a checkpoint directory written by the train command.")
      .def_property_readonly("codec_mae", [](const models::ModelBundle& b) { return b.state.codec_mae; })
      .def_property_readonly("ready", [](const models::ModelBundle& b) { return b.state.ready(); })
      .def("encode", [](const models::ModelBundle& b, const F64& x) {
        return planar_to(b.encode(planar_from<ImageGrid>(x, "image")));
      })
      .def("decode", [](const models::ModelBundle& b, const F64& z) {
        return planar_to(b.decode(planar_from<LatentGrid>(z, "latent")));
      })
      .def(
          "generate",
          [](const models::ModelBundle& b, const F64& x_ok, const py::array& foreground, const py::array& defect,
             const std::string& object, std::uint64_t seed, int free_steps, int latent_steps, int image_steps,
             double guidance_scale, int adapt_steps, double lambda_con, double adapt_lr) {
            const ImageGrid x = planar_from<ImageGrid>(x_ok, "x_ok");
            const BinaryMask m = mask_from<BinaryMask>(defect, "defect");
            const Trimap t = trimap::build_trimap(mask_from<BinaryMask>(foreground, "foreground"), m);
            pipeline::GenerationConfig gen;
            gen.free_steps = free_steps;
            gen.latent_steps = latent_steps;
            gen.image_steps = image_steps;
            gen.guidance_scale = guidance_scale;
            gen.seed = seed;
            gen.validate();
            pipeline::AdaptConfig adapt;
            adapt.steps = adapt_steps;
            adapt.lambda_con = lambda_con;
            adapt.learning_rate = adapt_lr;
            adapt.validate();
            const auto prompt = b.prompt(object, "defect");
            std::optional<pipeline::GenerationResult> res;
            std::optional<pipeline::AdaptResult> a;
            {
              py::gil_scoped_release release;
              Rng rng(seed);
              res = pipeline::generate(x, t, m, prompt, b, schedule::default_schedule(), gen, rng);
              a = pipeline::adapt_decoder(res->z, x, m, b, adapt);
            }
            py::dict d;
            d["image"] = planar_to(a->image);
            d["latent"] = planar_to(res->z);
            d["trimap"] = trimap_to(t);
            d["li_initial"] = a->li_initial;
            d["li_final"] = a->li_final;
            return d;
          },
          py::arg("x_ok"), py::arg("foreground"), py::arg("defect_mask"), py::arg("object"), py::arg("seed") = 0,
          py::arg("free_steps") = 50, py::arg("latent_steps") = 30, py::arg("image_steps") = 5,
          py::arg("guidance_scale") = 1.0, py::arg("adapt_steps") = 200, py::arg("lambda_con") = 100.0,
          py::arg("adapt_lr") = 1e-4,
          "Edits x_ok inside the defect mask, then decodes with a per-sample adapted decoder.");

  // ------------------------------------------------------------ commands
  m.def(
      "load_config", [](const std::filesystem::path& p) { return parse_json(commands::config_to_json(commands::load_config(p))); },
      py::arg("path"), "Resolved config with every default filled in.");
  m.def(
      "config_hash", [](const py::object& cfg) { return commands::config_hash(commands::config_from_json(dump_json(cfg))); },
      py::arg("config"));
  m.def(
      "run",
      [](const std::string& command, const py::object& config, const std::string& run_root,
         const std::optional<std::string>& replay, bool verbose) {
        commands::RunOptions options;
        options.run_root = run_root;
        options.verbose = verbose;
        commands::RunConfig cfg;
        if (replay) {
          options.replay = *replay;
          cfg = commands::manifest_config(*replay);
        } else {
          cfg = commands::config_from_json(dump_json(config));
        }
        cfg.validate();
        commands::CommandResult r;
        {
          py::gil_scoped_release release;
          r = commands::run_command(command, cfg, options);
        }
        return result_dict(r);
      },
      py::arg("command"), py::arg("config") = "{}", py::arg("run_root") = "", py::arg("replay") = py::none(),
      py::arg("verbose") = false,
      "Runs make-bench, train, generate, evaluate or report; config is a JSON string or dict.");
}

// adabldm: command-line entry point for benchmark creation, training,
// generation, evaluation and reporting.

#include <CLI11.hpp>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>

#include "adabldm/commands.hpp"
#include "adabldm/errors.hpp"

namespace cmd = adabldm::commands;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string replay;
  std::string run_root;
  std::string benchmark, checkpoint, dataset, evaluation;
  bool quiet = false;
};

void add_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON run config; unknown keys are rejected");
  sub->add_option("--seed", f.seed, "Top-level seed (overrides the config)");
  sub->add_option("--workers", f.workers, "Worker threads for generation and trials")->check(CLI::PositiveNumber);
  sub->add_option("--replay", f.replay, "Manifest of a previous run of this command to reproduce and verify");
  sub->add_option("--run-root", f.run_root, "Parent directory of run directories (default $ADABLDM_RUN_ROOT or ./runs)");
  sub->add_option("--benchmark", f.benchmark, "Benchmark directory or make-bench run");
  sub->add_option("--checkpoint", f.checkpoint, "Checkpoint directory or train run");
  sub->add_option("--dataset", f.dataset, "Generated dataset directory or generate run");
  sub->add_option("--evaluation", f.evaluation, "Evaluation directory or evaluate run");
  sub->add_flag("-q,--quiet", f.quiet, "No progress output");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trimap-controlled latent diffusion defect generation with online decoder adaptation"};
  app.require_subcommand(1);
  Flags flags;
  const char* names[] = {"make-bench", "train", "generate", "evaluate", "report"};
  const char* help[] = {"Render the procedural benchmark", "Train codec, denoiser and control branch",
                        "Synthesize a defect dataset", "Score generated data against the baselines",
                        "Plot curves and loss traces and write a summary"};
  for (int i = 0; i < 5; ++i) add_flags(app.add_subcommand(names[i], help[i]), flags);

  std::string command = "adabldm";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << cmd::error_record(command, adabldm::UsageError(e.what())) << std::endl;
    return 2;
  }
  command = app.get_subcommands().front()->get_name();

  try {
    cmd::RunConfig cfg;
    if (!flags.config.empty()) cfg = cmd::load_config(flags.config);
    cmd::RunOptions options;
    options.run_root = flags.run_root;
    options.verbose = !flags.quiet;
    if (!flags.replay.empty()) {
      if (flags.seed || !flags.config.empty())
        throw adabldm::UsageError("--replay takes its config from the manifest; drop --seed and --config");
      options.replay = flags.replay;
      cfg = cmd::manifest_config(flags.replay);
    }
    if (flags.seed) cfg.seed = *flags.seed;
    if (flags.workers) cfg.workers = *flags.workers;
    if (!flags.benchmark.empty()) cfg.inputs.benchmark = flags.benchmark;
    if (!flags.checkpoint.empty()) cfg.inputs.checkpoint = flags.checkpoint;
    if (!flags.dataset.empty()) cfg.inputs.dataset = flags.dataset;
    if (!flags.evaluation.empty()) cfg.inputs.evaluation = flags.evaluation;
    if (options.replay && (!flags.benchmark.empty() || !flags.checkpoint.empty() || !flags.dataset.empty() ||
                           !flags.evaluation.empty()))
      throw adabldm::UsageError("--replay uses the inputs recorded in the manifest");
    try {
      cfg.validate();
    } catch (const adabldm::ParameterError& e) {
      throw adabldm::UsageError(e.what());
    }

    const cmd::CommandResult r = cmd::run_command(command, cfg, options);
    nlohmann::json status{{"status", "ok"}, {"command", command}, {"run_dir", r.run_dir.string()}, {"digest", r.digest}};
    if (r.replay_match) status["replay_match"] = *r.replay_match;
    if (command == "evaluate") {
      std::ifstream table(r.run_dir / "evaluation" / "table.md");
      std::cout << table.rdbuf() << std::flush;
    }
    if (r.replay_match && !*r.replay_match) {
      status["status"] = "error";
      status["kind"] = "replay_mismatch";
      status["message"] = "outputs differ from the replayed run";
      status["exit_code"] = 1;
      std::cerr << status.dump() << std::endl;
      return 1;
    }
    std::cout << status.dump() << std::endl;
    return 0;
  } catch (const std::exception& e) {
    std::cerr << cmd::error_record(command, e) << std::endl;
    return cmd::exit_code_for(e);
  }
}

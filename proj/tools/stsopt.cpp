#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI/CLI.hpp>

#include "stsopt/config.hpp"
#include "stsopt/error.hpp"
#include "stsopt/gcg.hpp"
#include "stsopt/rank_eval.hpp"
#include "stsopt/report.hpp"

namespace fs = std::filesystem;
using namespace stsopt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalidInput = 2;
constexpr int kExitBackend = 3;
constexpr int kExitEmptySts = 4;

struct CommonOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string backend_override;
};

struct BackendError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kModelLoad:
    case ErrorCode::kContextOverflow:
    case ErrorCode::kEmptyCandidatePool:
    case ErrorCode::kInvalidLength:
      return kExitBackend;
    default:
      return kExitInvalidInput;
  }
}

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config, "run configuration (YAML)")->required();
  cmd->add_option("--out", opts.out, "output directory (overrides output_dir)");
  cmd->add_option("--seed", opts.seed, "overrides gcg.seed and eval.seed");
  cmd->add_option("--backend-override", opts.backend_override, "replace model.backend (mock | llama)");
}

RunConfig load_config(const CommonOptions& opts) {
  RunConfig cfg = load_run_config(opts.config);
  if (!opts.backend_override.empty()) {
    if (opts.backend_override != "mock" && opts.backend_override != "llama") {
      throw Error(ErrorCode::kInvalidConfig, "--backend-override: expected mock or llama");
    }
    cfg.model.backend = opts.backend_override;
    if (cfg.model.backend == "llama" && cfg.model.identifier.empty()) {
      throw Error(ErrorCode::kInvalidConfig, "model.identifier: required for llama");
    }
  }
  if (opts.seed) cfg.gcg.seed = cfg.eval.seed = *opts.seed;
  validate_paths(cfg);
  return cfg;
}

fs::path output_dir(const RunConfig& cfg, const CommonOptions& opts) {
  fs::path dir = opts.out.empty() ? cfg.resolve(cfg.output_dir) : fs::path(opts.out);
  fs::create_directories(dir);
  return dir;
}

std::unique_ptr<LanguageModel> load_model(const RunConfig& cfg) {
  try {
    auto model = make_model(cfg);
    std::cerr << "model: " << model->backend_id() << " (vocabulary " << model->vocab_size() << ")\n";
    return model;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kInvalidConfig) throw;
    throw BackendError(e.what());
  }
}

// STS files hold the text followed by one newline.
std::string read_sts_file(const fs::path& path) {
  std::string text = read_file(path);
  if (text.ends_with("\r\n")) {
    text.resize(text.size() - 2);
  } else if (text.ends_with('\n')) {
    text.pop_back();
  }
  return text;
}

Manifest base_manifest(const std::string& command, const RunConfig& cfg, const CommonOptions& opts) {
  Manifest m;
  m.command = command;
  m.config = cfg.to_json();
  m.seeds = {{"gcg", cfg.gcg.seed}, {"eval", cfg.eval.seed}};
  m.inputs = {{"config", opts.config}, {"catalog", cfg.resolve(cfg.catalog).string()}};
  return m;
}

int cmd_optimize(const CommonOptions& opts) {
  const RunConfig cfg = load_config(opts);
  const PromptSpec spec = make_prompt_spec(cfg);
  spec.catalog.product(spec.target_name);
  auto model = load_model(cfg);
  const fs::path dir = output_dir(cfg, opts);

  GcgOptimizer optimizer(*model, spec, cfg.gcg);
  const fs::path log_path = dir / "iterations.jsonl";
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw Error(ErrorCode::kIo, "cannot write " + log_path.string());
  IterationLogWriter writer(log);
  const std::size_t every = std::max<std::size_t>(1, cfg.gcg.iterations / 20);
  const OptTrajectory traj = optimizer.run([&](const IterationRecord& r) {
    writer(r);
    if (r.iteration % every == 0 || r.iteration + 1 == cfg.gcg.iterations) {
      std::cerr << "iteration " << r.iteration << " loss " << r.loss;
      if (r.rank) std::cerr << " rank " << *r.rank;
      std::cerr << '\n';
    }
  });
  log.close();

  const Tokenizer& tok = model->tokenizer();
  write_file(dir / "final_sts.txt", tok.decode(traj.final_sts) + "\n");
  write_file(dir / "best_sts.txt", tok.decode(traj.best_sts) + "\n");
  nlohmann::ordered_json summary;
  summary["backend"] = model->backend_id();
  summary["target"] = cfg.target;
  summary["iterations"] = traj.records.size();
  summary["initial_loss"] = traj.initial_loss;
  summary["final_loss"] = traj.records.back().loss;
  summary["best_loss"] = traj.best_loss;
  summary["final_sts_token_ids"] = traj.final_sts;
  summary["best_sts_token_ids"] = traj.best_sts;
  write_file(dir / "optimize_summary.json", summary.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n");
  write_file(dir / "rank_trajectory.svg", rank_trajectory_svg(traj.records));

  Manifest m = base_manifest("optimize", cfg, opts);
  m.artifacts = {log_path, dir / "final_sts.txt", dir / "best_sts.txt", dir / "optimize_summary.json",
                 dir / "rank_trajectory.svg"};
  m.write(dir / "manifest_optimize.json");
  std::cerr << "loss " << traj.initial_loss << " -> " << traj.records.back().loss << "; wrote " << dir.string() << '\n';
  return kExitOk;
}

int cmd_evaluate(const CommonOptions& opts, const std::string& sts_option) {
  const RunConfig cfg = load_config(opts);
  const fs::path dir = output_dir(cfg, opts);
  const fs::path sts_path = sts_option.empty() ? dir / "best_sts.txt" : fs::path(sts_option);
  if (!fs::is_regular_file(sts_path)) throw Error(ErrorCode::kInvalidConfig, "--sts: no such file " + sts_path.string());
  const std::string sts = read_sts_file(sts_path);
  if (sts.empty()) {
    std::cerr << "error: STS file " << sts_path.string() << " is empty\n";
    return kExitEmptySts;
  }
  const PromptSpec spec = make_prompt_spec(cfg);
  spec.catalog.product(spec.target_name);
  auto model = load_model(cfg);

  const std::size_t every = std::max<std::size_t>(1, cfg.eval.n_trials / 10);
  const auto pairs = run_paired_trials(spec, sts, *model, cfg.eval, [&](std::size_t done, std::size_t total) {
    if (done % every == 0 || done == total) std::cerr << "trial " << done << "/" << total << '\n';
  });
  const auto rows = trial_rows(pairs, cfg.target);
  const AdvantageSummary summary = summarize(rows);

  write_trials_csv(dir / "trials.csv", rows);
  nlohmann::ordered_json j = summary.to_json();
  j["target"] = cfg.target;
  j["sts_text"] = sts;
  j["backend"] = model->backend_id();
  write_file(dir / "summary.json", j.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n");
  write_file(dir / "rank_distribution.svg", rank_distribution_svg(rows));
  write_file(dir / "advantage.svg", advantage_svg(summary));

  Manifest m = base_manifest("evaluate", cfg, opts);
  m.inputs["sts"] = sts_path.string();
  m.artifacts = {dir / "trials.csv", dir / "summary.json", dir / "rank_distribution.svg", dir / "advantage.svg"};
  m.write(dir / "manifest_evaluate.json");
  std::cerr << "advantage " << summary.advantage_pct << "%, no advantage " << summary.no_advantage_pct
            << "%, disadvantage " << summary.disadvantage_pct << "%\n";
  return kExitOk;
}

int cmd_report(const std::string& log_path, const std::string& csv_path, const std::string& out) {
  const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  const auto records = read_iteration_log(log_path);
  const auto rows = read_trials_csv(csv_path);
  const AdvantageSummary summary = summarize(rows);
  fs::create_directories(dir);
  write_file(dir / "rank_trajectory.svg", rank_trajectory_svg(records));
  write_file(dir / "rank_distribution.svg", rank_distribution_svg(rows));
  write_file(dir / "advantage.svg", advantage_svg(summary));

  Manifest m;
  m.command = "report";
  m.inputs = {{"log", log_path}, {"csv", csv_path}};
  m.artifacts = {dir / "rank_trajectory.svg", dir / "rank_distribution.svg", dir / "advantage.svg"};
  m.write(dir / "manifest_report.json");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optimize and evaluate strategic text sequences for LLM product rankings"};
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "print the default configuration and exit");

  CommonOptions optimize_opts, evaluate_opts;
  std::string sts_file, log_file, csv_file, report_out;
  CLI::App* optimize = app.add_subcommand("optimize", "run GCG and write the iteration log and STS files");
  add_common(optimize, optimize_opts);
  CLI::App* evaluate = app.add_subcommand("evaluate", "paired trials with and without the STS");
  add_common(evaluate, evaluate_opts);
  evaluate->add_option("--sts", sts_file, "STS text file (default: <out>/best_sts.txt)");
  CLI::App* report = app.add_subcommand("report", "re-render plots from a stored log and trials CSV");
  report->add_option("--log", log_file, "iterations.jsonl")->required();
  report->add_option("--csv", csv_file, "trials.csv")->required();
  report->add_option("--out", report_out, "output directory (default: .)");
  app.require_subcommand(0, 1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalidInput;
  }
  if (print_defaults) {
    std::cout << default_config_yaml();
    return kExitOk;
  }

  try {
    if (optimize->parsed()) return cmd_optimize(optimize_opts);
    if (evaluate->parsed()) return cmd_evaluate(evaluate_opts, sts_file);
    if (report->parsed()) return cmd_report(log_file, csv_file, report_out);
    std::cerr << app.help();
    return kExitInvalidInput;
  } catch (const BackendError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitBackend;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

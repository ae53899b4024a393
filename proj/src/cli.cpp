#include "actfocus/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "actfocus/checkpoint.hpp"
#include "actfocus/config.hpp"
#include "actfocus/diagnostics.hpp"
#include "actfocus/errors.hpp"
#include "actfocus/trainer.hpp"
#include "actfocus/trajectory_io.hpp"

namespace actfocus {

namespace {

struct UsageError : Error {
  using Error::Error;
};

void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
}

TrainConfig load_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  auto cfg = load_config(path);
  apply_overrides(cfg, sets);
  cfg.validate();
  return cfg;
}

void print_eval_header(std::ostream& out) { out << "step,success_rate,mean_reward,format_validity,episodes\n"; }

void print_eval(std::ostream& out, const EvalMetrics& e) {
  out << e.step << ',' << e.success_rate << ',' << e.mean_reward << ',' << e.format_validity << ',' << e.episodes
      << '\n';
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Action-focused credit assignment for multi-turn RL on grid puzzles"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  struct {
    std::string config, out = "out", checkpoint, log, grid, scale_tag = "tiny";
    std::optional<std::string> algo, weighting, signal, alpha, beta, seed;
    std::vector<std::string> sets;
    int episodes = 0;
    std::uint64_t diag_seed = 0;
    double tolerance = 1e-9;
  } o;

  auto* train = app.add_subcommand("train", "Warm up, train and evaluate a policy");
  train->add_option("--config", o.config, "INI config file")->required()->check(CLI::ExistingFile);
  train->add_option("--algo", o.algo, "ppo or grpo");
  train->add_option("--weighting", o.weighting, "uniform or actfocus");
  train->add_option("--signal", o.signal, "energy, entropy, nll or shift");
  train->add_option("--alpha", o.alpha, "Weight of reasoning and tag tokens");
  train->add_option("--beta", o.beta, "Action-token modulation strength");
  train->add_option("--seed", o.seed, "Root seed");
  train->add_option("--out", o.out, "Output directory");
  train->add_option("--set", o.sets, "Extra key=value config overrides");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the fixed evaluation set");
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--config", o.config, "INI config file")->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", o.episodes, "Episode count (0: eval_prompts * eval_rollouts)")
      ->check(CLI::NonNegativeNumber);
  eval->add_option("--set", o.sets, "Extra key=value config overrides");

  auto* diagnose = app.add_subcommand("diagnose", "Energy and reward-spread correlations of a trajectory log");
  diagnose->add_option("--log", o.log, "Trajectory JSONL log")->required()->check(CLI::ExistingFile);
  diagnose->add_option("--out", o.out, "Output directory");
  diagnose->add_option("--seed", o.diag_seed, "Permutation-test seed");
  diagnose->add_option("--scale-tag", o.scale_tag, "Label for the composition table");

  auto* sweep_cmd = app.add_subcommand("sweep", "One training run per grid cell");
  sweep_cmd->add_option("--config", o.config, "Base INI config file")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--grid", o.grid, "Grid file with a [grid] section")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--out", o.out, "Output directory");
  sweep_cmd->add_option("--set", o.sets, "Extra key=value overrides of the base config");

  auto* replay = app.add_subcommand("replay-check", "Re-simulate logged trajectories and verify their rewards");
  replay->add_option("--log", o.log, "Trajectory JSONL log")->required()->check(CLI::ExistingFile);
  replay->add_option("--tolerance", o.tolerance, "Largest accepted reward difference");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  const int threads = default_threads();
  out << std::setprecision(10);
  try {
    if (*train) {
      auto cfg = load_config(o.config);
      const std::pair<const char*, const std::optional<std::string>*> flags[] = {
          {"algo", &o.algo}, {"weighting", &o.weighting}, {"signal", &o.signal},
          {"alpha", &o.alpha}, {"beta", &o.beta},           {"seed", &o.seed}};
      for (const auto& [key, value] : flags)
        if (*value) set_config_value(cfg, key, **value);
      apply_overrides(cfg, o.sets);
      cfg.validate();
      const auto summary = actfocus::train(cfg, o.out, threads, &err);
      out << "steps " << summary.steps_run << ", warmup validity " << summary.warmup.validity
          << ", final eval success " << summary.final_eval.success_rate << ", reward "
          << summary.final_eval.mean_reward << '\n';
    } else if (*eval) {
      auto cfg = load_with_overrides(o.config, o.sets);
      const auto params = load_checkpoint(o.checkpoint);
      if (!(params.arch == cfg.arch)) throw UsageError("checkpoint architecture differs from the config's [policy]");
      print_eval_header(out);
      print_eval(out, evaluate(cfg, params, 0, threads, o.episodes));
    } else if (*diagnose) {
      const auto rep = diagnose_log(o.log, o.diag_seed, o.scale_tag, threads);
      for (const auto& w : rep.warnings) err << "warning: " << w << '\n';
      write_report(o.out, rep);
      write_correlations_csv(out, rep);
      write_composition_csv(out, rep);
    } else if (*sweep_cmd) {
      auto base = load_with_overrides(o.config, o.sets);
      const auto cells = actfocus::sweep(base, load_grid(o.grid), o.out, threads, &err);
      std::size_t failed = 0;
      for (const auto& c : cells) failed += c.ok ? 0 : 1;
      out << cells.size() << " cells, " << failed << " failed; summary in " << (std::filesystem::path(o.out) / "summary.csv").string()
          << '\n';
    } else if (*replay) {
      auto read = read_jsonl_file(o.log);
      for (const auto& w : read.warnings) err << "warning: " << w << '\n';
      const auto rep = replay_check(read.trajectories, o.tolerance);
      for (const auto& p : rep.problems) err << p << '\n';
      out << "checked " << rep.checked << ", mismatched " << rep.mismatched << ", skipped lines "
          << read.warnings.size() << ", max abs error " << rep.max_abs_error << '\n';
      if (rep.mismatched > 0 || !read.warnings.empty()) return 2;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace actfocus

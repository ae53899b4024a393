#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "actfocus/config.hpp"
#include "actfocus/env.hpp"
#include "actfocus/objective.hpp"
#include "actfocus/policy.hpp"
#include "actfocus/trajectory.hpp"

namespace actfocus {

// ---------------------------------------------------------------- episodes --

struct RolloutPolicy {
  const PolicyParams* policy = nullptr;
  const PolicyParams* reference = nullptr;  // optional; fills logp_ref/ref_lse/ref_entropy
  double temperature = 1.0;
  int max_tokens = 24;
  double format_penalty = -0.1;
};

/// Plays one multi-turn episode. Each turn feeds `<user>` + rendered state,
/// samples a response, adds the format penalty when the response is malformed
/// or names an unknown action, and applies the parsed actions. The episode
/// also ends when the next turn would not fit the context window.
Trajectory run_episode(const EnvSpec& spec, std::uint64_t env_seed, std::uint64_t episode_key, RngStream sampler,
                       const RolloutPolicy& rp);

/// Scripted response: random filler thoughts, then 1..max_actions_per_turn
/// random legal-format actions joined by `||`.
TokenSeq scripted_response(const EnvState& state, RngStream& rng, int think_min, int think_max);

/// Episode driven by scripted_response; used for demonstrations and as the
/// random-agent baseline.
Trajectory scripted_episode(const EnvSpec& spec, std::uint64_t env_seed, std::uint64_t episode_key, RngStream rng,
                            int think_min, int think_max, double format_penalty);

/// Replays one logged episode and returns the recomputed reward. Throws
/// FormatError when the log disagrees with the simulator.
double replay_episode(const Trajectory& traj, bool* success = nullptr);

// ------------------------------------------------------------------ seeds --

std::uint64_t train_env_seed(const TrainConfig& cfg, int step, int prompt);
std::uint64_t eval_env_seed(const TrainConfig& cfg, int prompt);

// ----------------------------------------------------------------- warmup --

struct WarmupReport {
  int steps = 0;
  double validity = 0.0;
  bool reached = false;
};

/// Fraction of first-turn responses that are well formed and name only known
/// actions, sampled at the rollout temperature on held-out prompts.
double format_validity(const TrainConfig& cfg, const PolicyParams& params, int prompts, int threads);

/// Supervised training on scripted demonstrations until format validity
/// reaches the target or max_steps is exhausted.
WarmupReport warmup(const TrainConfig& cfg, PolicyParams& params, int threads, std::ostream* log = nullptr);

// ---------------------------------------------------------------- rollouts --

/// P groups of G trajectories for a training step, with rollout-time caches.
std::vector<TrajectoryGroup> collect_rollouts(const TrainConfig& cfg, const PolicyParams& policy,
                                              const PolicyParams& reference, int step, int threads);

/// Keeps the ceil(ratio * P) groups with the largest sigma_g, ties broken by
/// lower prompt_id. Ratio 1.0 returns the input unchanged.
std::vector<TrajectoryGroup> filter_groups(std::vector<TrajectoryGroup> groups, double ratio);

// ------------------------------------------------------------------ update --

struct StepMetrics {
  int step = 0;
  double success_rate = 0.0;
  double mean_reward = 0.0;
  double mean_response_len = 0.0;
  double action_token_fraction = 0.0;
  double mean_kl = 0.0;
  double mean_entropy = 0.0;
  double loss_total = 0.0;
  double loss_surrogate = 0.0;
  double loss_value = 0.0;
  double sum_weights = 0.0;
  double max_ratio_deviation = 0.0;  // first mini-batch after the refresh
  int groups_kept = 0;
  int degenerate_groups = 0;
  int zero_action_batches = 0;
  int minibatches = 0;
  bool skipped = false;
};

struct TrainerState {
  TrainConfig cfg;
  PolicyParams theta;
  PolicyParams reference;
  AdamState adam;
  int step = 0;
  int consecutive_skips = 0;
  int total_skips = 0;
  WarmupReport warmup;

  /// Initializes the policy, runs warmup and freezes the reference.
  static TrainerState create(const TrainConfig& cfg, int threads, std::ostream* log = nullptr);
};

struct StepHooks {
  std::vector<Trajectory>* rollouts = nullptr;  // receives every trajectory of the step
  std::ostream* credit_csv = nullptr;           // first mini-batch credit dump
};

/// Rollouts, filtering, advantages, weights, mini-batch updates. A non-finite
/// loss or gradient restores the pre-step parameters and marks the step as
/// skipped; the third consecutive skip throws NumericalError.
StepMetrics train_step(TrainerState& state, int threads, const StepHooks& hooks = {});

// -------------------------------------------------------------- evaluation --

struct EvalMetrics {
  int step = 0;
  double success_rate = 0.0;
  double mean_reward = 0.0;
  double format_validity = 0.0;
  int episodes = 0;
};

/// Fixed evaluation prompts, disjoint from training prompts; episodes = 0
/// means eval_prompts * eval_rollouts.
EvalMetrics evaluate(const TrainConfig& cfg, const PolicyParams& params, int step, int threads, int episodes = 0);

/// Success rate of the scripted random agent on the evaluation episodes.
EvalMetrics random_agent_baseline(const TrainConfig& cfg, int threads, int episodes = 0);

// ------------------------------------------------------------------- runs --

std::string metrics_header();
std::string metrics_row(const TrainConfig& cfg, const StepMetrics& m);

struct RunSummary {
  int steps_run = 0;
  WarmupReport warmup;
  std::vector<EvalMetrics> evals;
  EvalMetrics final_eval;
};

/// Called after each evaluation; returning false ends the run early.
using EvalCallback = std::function<bool(const EvalMetrics&)>;

/// Full training run writing effective_config, metrics.csv, eval.csv,
/// checkpoint_<step>.bin and trajectories.jsonl under `out`.
RunSummary train(const TrainConfig& cfg, const std::filesystem::path& out, int threads, std::ostream* log = nullptr,
                 const EvalCallback& on_eval = {});

struct SweepCell {
  std::size_t index = 0;
  std::vector<std::pair<std::string, std::string>> settings;
  TrainConfig cfg;
  bool ok = false;
  std::string error;
  RunSummary summary;
};

/// One independent run per grid cell under out/cell_<k>; failures are
/// recorded and the sweep continues. Writes summary.csv and, when the grid
/// pairs uniform and actfocus runs, comparison.csv.
std::vector<SweepCell> sweep(const TrainConfig& base, const SweepGrid& grid, const std::filesystem::path& out,
                             int threads, std::ostream* log = nullptr);

struct ReplayReport {
  std::size_t checked = 0;
  std::size_t mismatched = 0;
  double max_abs_error = 0.0;
  std::vector<std::string> problems;
};

ReplayReport replay_check(std::span<const Trajectory> trajs, double tolerance = 1e-9);

}  // namespace actfocus

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "actfocus/advantage.hpp"
#include "actfocus/credit.hpp"
#include "actfocus/env_spec.hpp"
#include "actfocus/objective.hpp"
#include "actfocus/policy.hpp"

namespace actfocus {

enum class Weighting { Uniform, ActFocus };

std::string_view to_string(Weighting w);
Weighting parse_weighting(std::string_view name);

/// Supervised format warmup on scripted demonstrations.
struct WarmupConfig {
  int max_steps = 600;
  int batch = 16;
  double lr = 3e-3;
  double target_validity = 0.95;
  int check_every = 25;
  int check_prompts = 64;
  int think_min = 3;
  int think_max = 8;

  bool operator==(const WarmupConfig&) const = default;
};

struct TrainConfig {
  Algorithm algo = Algorithm::PPO;
  Weighting weighting = Weighting::ActFocus;
  SignalKind signal = SignalKind::Energy;
  double alpha = 0.1;
  double beta = 0.5;

  int prompts_per_step = 8;      // P
  int rollouts_per_prompt = 16;  // G
  double filter_ratio = -1.0;    // -1: 1.0 for GRPO on FrozenLake, 0.25 otherwise
  int mini_batch = 32;           // E, in trajectories
  int ppo_epochs = 1;
  int total_steps = 200;
  int eval_every = 25;
  int eval_prompts = 32;
  int eval_rollouts = 16;
  double eval_temperature = 0.5;
  double rollout_temperature = 1.0;
  double stop_at_success = 0.0;  // > 0: stop once eval success reaches it
  int max_response_tokens = 24;
  double gamma = 1.0;
  double lambda = 1.0;
  double format_penalty = -0.1;
  int trajectory_log_every = 25;  // 0 disables the JSONL log
  bool credit_dump = false;
  bool whiten_advantages = false;  // PPO only: token-level mean 0, std 1 over the update batch
  std::uint64_t seed = 0;

  EnvSpec env = EnvSpec::defaults(EnvKind::Sokoban);
  PolicyArch arch;
  AdamConfig adam;
  ObjectiveConfig objective;
  WarmupConfig warmup;

  /// filter_ratio with the automatic default applied.
  double effective_filter_ratio() const;
  void validate() const;

  bool operator==(const TrainConfig&) const = default;
};

/// Parses the INI text. Unknown sections or keys raise ConfigError naming
/// them. [env] values start from the defaults of env.kind.
TrainConfig parse_config(std::string_view text);
TrainConfig load_config(const std::filesystem::path& path);

/// Full INI form including every resolved value and a [seeds] section listing
/// the named substreams derived from the root seed.
std::string serialize_config(const TrainConfig& cfg);

/// Applies "section.key" = value (or bare run keys) on top of a config.
void set_config_value(TrainConfig& cfg, std::string_view dotted_key, std::string_view value);

/// Sweep grid: ordered (key, values) axes; cells are their cartesian product.
struct SweepGrid {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;

  std::size_t cell_count() const;
  std::vector<std::pair<std::string, std::string>> cell(std::size_t index) const;
};

SweepGrid parse_grid(std::string_view text);
SweepGrid load_grid(const std::filesystem::path& path);

/// Names of the random substreams split from the root seed.
inline constexpr std::string_view kStreamInit = "init";
inline constexpr std::string_view kStreamWarmup = "warmup";
inline constexpr std::string_view kStreamEnvGen = "env-gen";
inline constexpr std::string_view kStreamRollout = "rollout";
inline constexpr std::string_view kStreamShuffle = "shuffle";
inline constexpr std::string_view kStreamEval = "eval";
inline constexpr std::string_view kStreamPermutation = "permutation-test";

}  // namespace actfocus

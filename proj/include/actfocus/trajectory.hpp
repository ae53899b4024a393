#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "actfocus/env_spec.hpp"
#include "actfocus/vocab.hpp"

namespace actfocus {

enum class SpanLabel : std::uint8_t { Think = 0, Action = 1, Structural = 2 };

/// One structured model output: `<think> ... </think> <answer> ... </answer>`.
struct Response {
  TokenSeq tokens;
  std::vector<SpanLabel> labels;
  bool well_formed = false;

  bool operator==(const Response&) const = default;
};

/// Labels a raw token sequence. Malformed input is returned as a value with
/// well_formed=false and every non-tag token labelled Think, so no token of a
/// malformed response can receive action-level weight.
Response parse_response(std::span<const Token> tokens);

struct Turn {
  std::string state_text;
  Response response;

  bool operator==(const Turn&) const = default;
};

/// What is needed to re-simulate an episode.
struct EpisodeMeta {
  EnvSpec spec;
  std::uint64_t env_seed = 0;
  std::uint64_t episode_key = 0;
  double format_penalty = -0.1;

  bool operator==(const EpisodeMeta&) const = default;
};

/// A multi-turn rollout. Per-token arrays cover the concatenation of all
/// response tokens (length T); prompt/state tokens are not part of them.
struct Trajectory {
  std::int64_t prompt_id = 0;
  std::int64_t group_id = 0;
  EnvKind env = EnvKind::Sokoban;
  std::vector<Turn> turns;
  std::vector<double> logp_old;
  std::vector<double> logp_ref;
  std::vector<double> ref_lse;      // log-sum-exp of the frozen reference logits
  std::vector<double> ref_entropy;  // optional cache; empty when absent
  std::vector<double> values_old;   // rollout-time critic values, in memory only
  double reward = 0.0;
  bool success = false;
  int format_violations = 0;
  std::optional<EpisodeMeta> meta;

  std::size_t token_count() const;
  TokenSeq response_tokens() const;
  std::vector<SpanLabel> labels() const;

  /// Throws AlignmentError when cached arrays disagree with T or reward is
  /// not finite.
  void validate() const;
};

/// Policy input for a trajectory: the environment marker, then for each turn
/// `<user>` + rendered state + the response. `response_positions[i]` is the
/// index of the i-th response token inside `tokens`.
struct ContextLayout {
  TokenSeq tokens;
  std::vector<std::size_t> response_positions;
};

TokenSeq state_prompt_tokens(std::string_view state_text);
ContextLayout context_layout(const Trajectory& traj);

struct SpanMasks {
  std::vector<bool> think;
  std::vector<bool> action;
};

SpanMasks span_masks(const Trajectory& traj);

struct TrajectoryGroup {
  std::int64_t prompt_id = 0;
  std::vector<Trajectory> members;
  double sigma_g = 0.0;
};

/// Population variance of member rewards. Throws DegenerateGroupError for
/// fewer than two members.
double group_variance(const TrajectoryGroup& group);

/// Builds a group, checking the shared prompt id and filling sigma_g.
TrajectoryGroup make_group(std::int64_t prompt_id, std::vector<Trajectory> members);

}  // namespace actfocus

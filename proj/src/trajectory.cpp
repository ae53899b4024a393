#include "actfocus/trajectory.hpp"

#include <cmath>

#include "actfocus/errors.hpp"

namespace actfocus {

std::string_view to_string(EnvKind kind) {
  switch (kind) {
    case EnvKind::Sokoban: return "sokoban";
    case EnvKind::FrozenLake: return "frozenlake";
    case EnvKind::Sudoku: return "sudoku";
  }
  return "?";
}

EnvKind parse_env_kind(std::string_view name) {
  if (name == "sokoban") return EnvKind::Sokoban;
  if (name == "frozenlake") return EnvKind::FrozenLake;
  if (name == "sudoku") return EnvKind::Sudoku;
  throw ConfigError("unknown environment kind '" + std::string(name) + "'");
}

Token env_token(EnvKind kind) {
  switch (kind) {
    case EnvKind::Sokoban: return tok::kSokoban;
    case EnvKind::FrozenLake: return tok::kFrozenLake;
    case EnvKind::Sudoku: return tok::kSudoku;
  }
  return tok::kSokoban;
}

Response parse_response(std::span<const Token> tokens) {
  const auto& v = vocab();
  Response r;
  r.tokens.assign(tokens.begin(), tokens.end());
  r.labels.resize(tokens.size());

  // <think> t* </think> <answer> a+ </answer>, nothing before or after.
  const std::size_t n = tokens.size();
  bool ok = n >= 5 && tokens[0] == tok::kThinkOpen;
  std::size_t i = 1;
  while (ok && i < n && !v.is_tag(tokens[i])) ++i;
  ok = ok && i < n && tokens[i] == tok::kThinkClose;
  ok = ok && i + 1 < n && tokens[i + 1] == tok::kAnswerOpen;
  const std::size_t answer_open = i + 1;
  std::size_t j = answer_open + 1;
  while (ok && j < n && !v.is_tag(tokens[j])) ++j;
  ok = ok && j < n && j > answer_open + 1 && tokens[j] == tok::kAnswerClose && j + 1 == n;

  r.well_formed = ok;
  for (std::size_t k = 0; k < n; ++k) {
    if (v.is_tag(tokens[k])) {
      r.labels[k] = SpanLabel::Structural;
    } else if (ok && k > answer_open) {
      r.labels[k] = tokens[k] == tok::kSeparator ? SpanLabel::Structural : SpanLabel::Action;
    } else {
      r.labels[k] = SpanLabel::Think;
    }
  }
  return r;
}

std::size_t Trajectory::token_count() const {
  std::size_t t = 0;
  for (const auto& turn : turns) t += turn.response.tokens.size();
  return t;
}

TokenSeq Trajectory::response_tokens() const {
  TokenSeq out;
  out.reserve(token_count());
  for (const auto& turn : turns) out.insert(out.end(), turn.response.tokens.begin(), turn.response.tokens.end());
  return out;
}

std::vector<SpanLabel> Trajectory::labels() const {
  std::vector<SpanLabel> out;
  out.reserve(token_count());
  for (const auto& turn : turns) out.insert(out.end(), turn.response.labels.begin(), turn.response.labels.end());
  return out;
}

void Trajectory::validate() const {
  const auto t = token_count();
  for (const auto& turn : turns)
    if (turn.response.labels.size() != turn.response.tokens.size())
      throw AlignmentError("response labels and tokens differ in length");
  auto check = [&](const std::vector<double>& a, const char* name, bool optional) {
    if (optional && a.empty()) return;
    if (a.size() != t)
      throw AlignmentError(std::string(name) + " has " + std::to_string(a.size()) + " entries, expected " + std::to_string(t));
  };
  check(logp_old, "logp_old", false);
  check(logp_ref, "logp_ref", false);
  check(ref_lse, "ref_lse", false);
  check(ref_entropy, "ref_entropy", true);
  check(values_old, "values_old", true);
  if (!std::isfinite(reward)) throw AlignmentError("trajectory reward is not finite");
}

TokenSeq state_prompt_tokens(std::string_view state_text) {
  TokenSeq out{tok::kUser};
  auto body = vocab().tokenize(state_text);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

ContextLayout context_layout(const Trajectory& traj) {
  ContextLayout layout;
  layout.tokens.push_back(env_token(traj.env));
  for (const auto& turn : traj.turns) {
    auto prompt = state_prompt_tokens(turn.state_text);
    layout.tokens.insert(layout.tokens.end(), prompt.begin(), prompt.end());
    for (Token t : turn.response.tokens) {
      layout.response_positions.push_back(layout.tokens.size());
      layout.tokens.push_back(t);
    }
  }
  return layout;
}

SpanMasks span_masks(const Trajectory& traj) {
  SpanMasks m;
  for (SpanLabel l : traj.labels()) {
    m.think.push_back(l == SpanLabel::Think);
    m.action.push_back(l == SpanLabel::Action);
  }
  return m;
}

double group_variance(const TrajectoryGroup& group) {
  const auto n = group.members.size();
  if (n < 2) throw DegenerateGroupError("group " + std::to_string(group.prompt_id) + " has fewer than 2 members");
  double mean = 0.0;
  for (const auto& m : group.members) mean += m.reward;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (const auto& m : group.members) ss += (m.reward - mean) * (m.reward - mean);
  return ss / static_cast<double>(n);
}

TrajectoryGroup make_group(std::int64_t prompt_id, std::vector<Trajectory> members) {
  for (const auto& m : members)
    if (m.prompt_id != prompt_id) throw AlignmentError("group member has a different prompt id");
  TrajectoryGroup g{prompt_id, std::move(members), 0.0};
  g.sigma_g = group_variance(g);
  return g;
}

}  // namespace actfocus

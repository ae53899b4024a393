#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "actfocus/env.hpp"
#include "actfocus/numerics.hpp"
#include "actfocus/policy.hpp"
#include "actfocus/rng.hpp"
#include "actfocus/trajectory.hpp"
#include "actfocus/vocab.hpp"

namespace fixtures {

using namespace actfocus;

inline PolicyArch small_arch() {
  PolicyArch a;
  a.d_model = 16;
  a.n_heads = 2;
  a.n_layers = 1;
  a.context_window = 320;
  a.mlp_mult = 2;
  return a;
}

inline PolicyParams noisy_params(const PolicyArch& arch, std::uint64_t seed, double scale = 0.3) {
  auto p = PolicyParams::init(arch, RngStream(seed));
  RngStream r(seed ^ 0xABCDEFull);
  for (double& v : p.values) v += scale * r.normal();
  return p;
}

// Random well-formed (or occasionally malformed) response over grid moves.
inline TokenSeq random_response(RngStream& rng, bool malformed = false) {
  const auto& V = vocab();
  TokenSeq t;
  if (!malformed) t.push_back(tok::kThinkOpen);
  const auto n_think = 1 + rng.below(4);
  for (std::uint64_t i = 0; i < n_think; ++i) t.push_back(V.filler()[rng.below(V.filler().size())]);
  t.push_back(tok::kThinkClose);
  t.push_back(tok::kAnswerOpen);
  const auto n_act = 1 + rng.below(2);
  for (std::uint64_t i = 0; i < n_act; ++i) {
    if (i) t.push_back(tok::kSeparator);
    t.push_back(static_cast<Token>(tok::kUp + rng.below(4)));
  }
  t.push_back(tok::kAnswerClose);
  return t;
}

// Multi-turn Sokoban trajectory with caches filled from the given policies.
inline Trajectory make_traj(const PolicyParams& old_policy, const PolicyParams& ref, std::uint64_t seed,
                            int turns = 2, double reward = 0.0) {
  RngStream rng(seed);
  Trajectory tr;
  tr.prompt_id = static_cast<std::int64_t>(seed % 7);
  tr.env = EnvKind::Sokoban;
  const auto state = reset(EnvSpec::defaults(EnvKind::Sokoban), seed);
  for (int k = 0; k < turns; ++k) {
    Turn turn;
    turn.state_text = render_state(state);
    turn.response = parse_response(random_response(rng));
    tr.turns.push_back(turn);
  }
  tr.reward = reward;
  const auto lv = logprob_and_value(old_policy, tr);
  tr.logp_old = lv.logp;
  tr.values_old = lv.value;
  const auto layout = context_layout(tr);
  const auto f = forward(ref, layout.tokens);
  for (std::size_t k = 0; k < layout.response_positions.size(); ++k) {
    const auto row = static_cast<Eigen::Index>(layout.response_positions[k] - 1);
    std::span<const double> logits(f.logits.row(row).data(), static_cast<std::size_t>(f.logits.cols()));
    const double lse = log_sum_exp(logits);
    tr.ref_lse.push_back(lse);
    tr.logp_ref.push_back(logits[static_cast<std::size_t>(tr.response_tokens()[k])] - lse);
    tr.ref_entropy.push_back(softmax_entropy(logits));
  }
  return tr;
}

inline std::vector<const Trajectory*> view(const std::vector<Trajectory>& v) {
  std::vector<const Trajectory*> out;
  for (const auto& t : v) out.push_back(&t);
  return out;
}

}  // namespace fixtures

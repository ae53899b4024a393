#pragma once

// Synthetic trajectory log with planted energy/reward-spread correlations.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "actfocus/rng.hpp"
#include "actfocus/trajectory.hpp"
#include "actfocus/vocab.hpp"

namespace planted {

using namespace actfocus;

// Spearman rho of two permutations of 0..n-1 via 1 - 6 sum d^2 / (n (n^2 - 1)).
inline double rank_rho(const std::vector<int>& a, const std::vector<int>& b) {
  const double n = static_cast<double>(a.size());
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

// Identity with three disjoint swaps of distance 47, 2 and 1: sum d^2 = 4428,
// so rho against the identity is exactly 0.95 for n = 81.
inline std::vector<int> action_ranks() {
  std::vector<int> r(81);
  std::iota(r.begin(), r.end(), 0);
  std::swap(r[0], r[47]);
  std::swap(r[50], r[52]);
  std::swap(r[60], r[61]);
  return r;
}

// First seeded shuffle whose rho against the identity is below 0.02.
inline std::vector<int> think_ranks() {
  std::vector<int> id(81);
  std::iota(id.begin(), id.end(), 0);
  for (std::uint64_t k = 0;; ++k) {
    auto r = id;
    RngStream rng(0x7417ull + k);
    shuffle(r.begin(), r.end(), rng);
    if (std::abs(rank_rho(r, id)) < 0.02) return r;
  }
}

// <think> f*think_len </think> <answer> Up </answer> per turn; tokens carry
// energy think_e on Think/Structural and action_e on the action token.
inline Trajectory member(std::int64_t group, double reward, double think_e, double action_e, int think_len = 5,
                         int turns = 1) {
  Trajectory t;
  t.prompt_id = group;
  t.group_id = group;
  t.env = EnvKind::FrozenLake;
  t.reward = reward;
  const Token filler = vocab().filler()[0];
  for (int k = 0; k < turns; ++k) {
    TokenSeq seq{tok::kThinkOpen};
    for (int i = 0; i < think_len; ++i) seq.push_back(filler);
    seq.insert(seq.end(), {tok::kThinkClose, tok::kAnswerOpen, tok::kUp, tok::kAnswerClose});
    t.turns.push_back({"P_G\n___\n___\nYou have 10 actions left", parse_response(seq)});
  }
  for (auto l : t.labels()) {
    const double e = l == SpanLabel::Action ? action_e : think_e;
    t.ref_lse.push_back(-e);
  }
  t.logp_old.assign(t.ref_lse.size(), -1.0);
  t.logp_ref.assign(t.ref_lse.size(), -1.0);
  return t;
}

// 81 groups of G members. Group g has reward spread 0.1 + 0.05 g, ActionOnly
// energy ranked by action_ranks() and ThinkOnly energy by think_ranks().
inline std::vector<Trajectory> bottleneck_log(int members = 8) {
  const auto ar = action_ranks();
  const auto tr = think_ranks();
  std::vector<Trajectory> log;
  for (int g = 0; g < 81; ++g) {
    const double spread = 0.1 + 0.05 * g;
    for (int m = 0; m < members; ++m) {
      const double reward = (m % 2 == 0 ? 1.0 : -1.0) * spread;
      log.push_back(member(g, reward, 0.5 + 0.01 * tr[g], 2.0 + 0.01 * ar[g]));
    }
  }
  return log;
}

}  // namespace planted

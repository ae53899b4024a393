#pragma once

#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "actfocus/trajectory.hpp"

namespace actfocus {

/// Raw per-token score fed to the action-token weighting.
enum class SignalKind { Energy, Entropy, PolicyNLL, LogProbShift };

std::string_view to_string(SignalKind kind);
SignalKind parse_signal_kind(std::string_view name);

/// Guard added to the variance before the square root.
inline constexpr double kSignalEps = 1e-6;

/// E = -log sum_v exp(f_v) over frozen-reference logits.
double token_energy(std::span<const double> ref_logits);

/// Raw signal at response position t, read from rollout-time caches only:
///   Energy       -ref_lse[t]
///   Entropy      ref_entropy[t]
///   PolicyNLL    -logp_old[t]
///   LogProbShift logp_old[t] - logp_ref[t]
/// Throws CacheError when the needed cache is missing.
double raw_signal(SignalKind kind, const Trajectory& traj, std::size_t t);

struct NormalizedSignal {
  double mean = 0.0;
  double stddev = 0.0;  // sqrt(var + eps)
  std::vector<double> s_tilde;
};

/// sigmoid((s - mean) / sqrt(var + eps)) over the given action-token
/// signals. Throws EmptyBatchError for an empty input.
NormalizedSignal normalize_signal(std::span<const double> signals);

struct TokenCredit {
  SpanLabel label = SpanLabel::Think;
  double signal = 0.0;   // s_t, action tokens only
  double energy = 0.0;   // E_t
  double s_tilde = 0.0;  // action tokens only
  double weight = 1.0;   // w_t
};

using BatchView = std::span<const Trajectory* const>;

struct BatchCredit {
  std::vector<std::vector<TokenCredit>> tokens;  // per trajectory, per response token
  double signal_mean = 0.0;
  double signal_std = 0.0;
  std::size_t action_tokens = 0;
  bool modulated = true;  // false when the batch had no action token
};

/// Think and Structural tokens get alpha; action tokens get 1 + beta * s~,
/// with the normalization statistics taken over every action token of the
/// batch. A batch without action tokens falls back to alpha / 1 and reports
/// modulated=false.
BatchCredit assign_weights(BatchView batch, double alpha, double beta, SignalKind kind);

/// Unit weights for every token.
BatchCredit uniform_weights(BatchView batch);

/// Debug dump: traj_id,pos,label,signal_kind,s_t,s_tilde,w_t[,advantage]
void write_credit_csv(std::ostream& out, BatchView batch, const BatchCredit& credit, SignalKind kind,
                      const std::vector<std::vector<double>>* advantages = nullptr);

}  // namespace actfocus

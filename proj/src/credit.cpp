#include "actfocus/credit.hpp"

#include <cmath>
#include <ostream>

#include "actfocus/errors.hpp"
#include "actfocus/numerics.hpp"

namespace actfocus {

std::string_view to_string(SignalKind kind) {
  switch (kind) {
    case SignalKind::Energy: return "energy";
    case SignalKind::Entropy: return "entropy";
    case SignalKind::PolicyNLL: return "nll";
    case SignalKind::LogProbShift: return "shift";
  }
  return "?";
}

SignalKind parse_signal_kind(std::string_view name) {
  if (name == "energy") return SignalKind::Energy;
  if (name == "entropy") return SignalKind::Entropy;
  if (name == "nll") return SignalKind::PolicyNLL;
  if (name == "shift") return SignalKind::LogProbShift;
  throw ConfigError("unknown signal '" + std::string(name) + "'");
}

double token_energy(std::span<const double> ref_logits) { return -log_sum_exp(ref_logits); }

double raw_signal(SignalKind kind, const Trajectory& traj, std::size_t t) {
  auto need = [&](const std::vector<double>& cache, const char* name) -> double {
    if (t >= cache.size()) throw CacheError(std::string("trajectory has no cached ") + name + " at position " + std::to_string(t));
    return cache[t];
  };
  switch (kind) {
    case SignalKind::Energy: return -need(traj.ref_lse, "ref_lse");
    case SignalKind::Entropy: return need(traj.ref_entropy, "ref_entropy");
    case SignalKind::PolicyNLL: return -need(traj.logp_old, "logp_old");
    case SignalKind::LogProbShift: return need(traj.logp_old, "logp_old") - need(traj.logp_ref, "logp_ref");
  }
  return 0.0;
}

NormalizedSignal normalize_signal(std::span<const double> signals) {
  if (signals.empty()) throw EmptyBatchError("no action tokens to normalize over");
  NormalizedSignal r;
  const double n = static_cast<double>(signals.size());
  for (double s : signals) r.mean += s;
  r.mean /= n;
  double var = 0.0;
  for (double s : signals) var += (s - r.mean) * (s - r.mean);
  var /= n;
  r.stddev = std::sqrt(var + kSignalEps);
  r.s_tilde.reserve(signals.size());
  for (double s : signals) r.s_tilde.push_back(sigmoid((s - r.mean) / r.stddev));
  return r;
}

BatchCredit uniform_weights(BatchView batch) {
  BatchCredit c;
  c.modulated = false;
  for (const Trajectory* t : batch) {
    auto& row = c.tokens.emplace_back();
    const auto labels = t->labels();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      TokenCredit tc;
      tc.label = labels[i];
      tc.energy = i < t->ref_lse.size() ? -t->ref_lse[i] : 0.0;
      tc.weight = 1.0;
      row.push_back(tc);
      if (labels[i] == SpanLabel::Action) ++c.action_tokens;
    }
  }
  return c;
}

BatchCredit assign_weights(BatchView batch, double alpha, double beta, SignalKind kind) {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
  if (beta < 0.0) throw ConfigError("beta must be non-negative");
  BatchCredit c = uniform_weights(batch);
  c.modulated = true;

  std::vector<double> signals;
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t i = 0; i < c.tokens[b].size(); ++i) {
      auto& tc = c.tokens[b][i];
      if (tc.label == SpanLabel::Action) {
        tc.signal = raw_signal(kind, *batch[b], i);
        signals.push_back(tc.signal);
      } else {
        tc.weight = alpha;
      }
    }

  if (signals.empty()) {
    c.modulated = false;
    return c;
  }
  const auto norm = normalize_signal(signals);
  c.signal_mean = norm.mean;
  c.signal_std = norm.stddev;
  std::size_t k = 0;
  for (auto& row : c.tokens)
    for (auto& tc : row)
      if (tc.label == SpanLabel::Action) {
        tc.s_tilde = norm.s_tilde[k++];
        tc.weight = 1.0 + beta * tc.s_tilde;
      }
  return c;
}

void write_credit_csv(std::ostream& out, BatchView batch, const BatchCredit& credit, SignalKind kind,
                      const std::vector<std::vector<double>>* advantages) {
  out << "traj_id,pos,label,signal_kind,s_t,s_tilde,w_t";
  if (advantages) out << ",advantage";
  out << '\n';
  out.precision(17);
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t i = 0; i < credit.tokens[b].size(); ++i) {
      const auto& tc = credit.tokens[b][i];
      out << b << ',' << i << ',' << static_cast<int>(tc.label) << ',' << to_string(kind) << ',' << tc.signal << ','
          << tc.s_tilde << ',' << tc.weight;
      if (advantages) out << ',' << (*advantages)[b][i];
      out << '\n';
    }
}

}  // namespace actfocus

#include "actfocus/objective.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "actfocus/errors.hpp"
#include "actfocus/numerics.hpp"

namespace actfocus {

double clipped_term(double ratio, double advantage, double eps_low, double eps_high) {
  const double clipped = std::clamp(ratio, 1.0 - eps_low, 1.0 + eps_high);
  return std::min(ratio * advantage, clipped * advantage);
}

double weighted_surrogate(std::span<const double> weights, std::span<const double> advantages,
                          std::span<const double> ratios, double eps_low, double eps_high) {
  if (weights.size() != advantages.size() || weights.size() != ratios.size())
    throw AlignmentError("weighted_surrogate: length mismatch");
  double sw = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    sw += weights[i];
    acc += weights[i] * clipped_term(ratios[i], advantages[i], eps_low, eps_high);
  }
  if (sw == 0.0) throw EmptyBatchError("sum of token weights is zero");
  return -acc / sw;
}

double kl_term(std::span<const double> logp, std::span<const double> logp_ref) {
  if (logp.size() != logp_ref.size()) throw AlignmentError("kl_term: length mismatch");
  if (logp.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < logp.size(); ++i) s += logp[i] - logp_ref[i];
  return s / static_cast<double>(logp.size());
}

double entropy_bonus(std::span<const double> entropies) {
  if (entropies.empty()) return 0.0;
  double s = 0.0;
  for (double h : entropies) s += h;
  return s / static_cast<double>(entropies.size());
}

UpdateItem make_update_item(const Trajectory& traj, std::vector<double> weights, std::vector<double> advantages,
                            std::vector<double> value_targets) {
  auto layout = context_layout(traj);
  UpdateItem it;
  it.targets = traj.response_tokens();
  const std::size_t T = it.targets.size();
  if (weights.size() != T || advantages.size() != T || (!value_targets.empty() && value_targets.size() != T))
    throw AlignmentError("update item: per-token arrays must have length " + std::to_string(T));
  it.context = std::move(layout.tokens);
  it.positions = std::move(layout.response_positions);
  it.labels = traj.labels();
  it.weights = std::move(weights);
  it.advantages = std::move(advantages);
  it.logp_old = traj.logp_old;
  it.logp_ref = traj.logp_ref;
  it.value_targets = std::move(value_targets);
  return it;
}

namespace {

struct Totals {
  double sum_w = 0.0;
  std::size_t tokens = 0;
};

Totals totals(std::span<const UpdateItem> batch) {
  Totals t;
  for (const auto& it : batch) {
    for (double w : it.weights) t.sum_w += w;
    t.tokens += it.size();
  }
  if (t.tokens == 0) throw EmptyBatchError("update batch has no response tokens");
  if (t.sum_w == 0.0) throw EmptyBatchError("sum of token weights is zero");
  return t;
}

std::vector<TokenSeq> contexts(std::span<const UpdateItem> batch) {
  std::vector<TokenSeq> seqs;
  seqs.reserve(batch.size());
  for (const auto& it : batch) seqs.push_back(it.context);
  return seqs;
}

// Per-row scratch: log-softmax and softmax of one logits row.
struct RowStats {
  std::vector<double> logp;
  std::vector<double> p;
  double entropy = 0.0;

  void compute(const Mat& logits, Eigen::Index r) {
    const auto n = static_cast<std::size_t>(logits.cols());
    logp.resize(n);
    p.resize(n);
    log_softmax(std::span<const double>(logits.row(r).data(), n), logp);
    entropy = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      p[v] = std::exp(logp[v]);
      entropy -= p[v] * logp[v];
    }
  }
};

// Accumulates the full objective and, when adj is non-null, its adjoint.
LossBreakdown accumulate(std::span<const UpdateItem> batch, std::span<const ForwardOutput> outs,
                         std::span<OutputAdjoint> adj, const ObjectiveConfig& cfg) {
  const Totals tot = totals(batch);
  const double n = static_cast<double>(tot.tokens);
  LossBreakdown lb;
  lb.sum_weights = tot.sum_w;
  lb.tokens = tot.tokens;
  double surr = 0.0, kl = 0.0, ent = 0.0, val = 0.0;
  std::size_t clipped = 0, value_tokens = 0;
  RowStats rs;

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& it = batch[b];
    const auto& o = outs[b];
    const bool with_value = cfg.train_value && !it.value_targets.empty() && o.values.size() > 0;
    if (with_value) value_tokens += it.size();
    if (!adj.empty()) {
      adj[b].dlogits = Mat::Zero(o.logits.rows(), o.logits.cols());
      if (with_value) adj[b].dvalues = Vec::Zero(o.values.size());
    }
    for (std::size_t k = 0; k < it.size(); ++k) {
      const auto row = static_cast<Eigen::Index>(it.positions[k] - 1);
      rs.compute(o.logits, row);
      const auto y = static_cast<std::size_t>(it.targets[k]);
      const double logp = rs.logp[y];
      const double ratio = std::exp(logp - it.logp_old[k]);
      const double A = it.advantages[k];
      const double w = it.weights[k];
      const double unclipped = ratio * A;
      const double clipped_ratio = std::clamp(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
      const bool use_unclipped = unclipped <= clipped_ratio * A;
      if (clipped_ratio != ratio) ++clipped;
      lb.max_ratio_deviation = std::max(lb.max_ratio_deviation, std::abs(ratio - 1.0));
      surr += w * std::min(unclipped, clipped_ratio * A);
      kl += logp - it.logp_ref[k];
      ent += rs.entropy;
      if (adj.empty()) {
        if (with_value) {
          const double d = o.values(row) - it.value_targets[k];
          val += d * d;
        }
        continue;
      }
      // d total / d logp_y from the surrogate and KL terms.
      double g_logp = cfg.kl_coef / n;
      if (use_unclipped) g_logp += -(w / tot.sum_w) * A * ratio;
      auto drow = adj[b].dlogits.row(row);
      for (std::size_t v = 0; v < rs.p.size(); ++v) {
        // d(-coef * H)/dz_v = coef * p_v * (logp_v + H)
        drow(v) += -g_logp * rs.p[v] + (cfg.entropy_coef / n) * rs.p[v] * (rs.logp[v] + rs.entropy);
      }
      drow(y) += g_logp;
      if (with_value) {
        const double d = o.values(row) - it.value_targets[k];
        val += d * d;
      }
    }
  }

  lb.surrogate = -surr / tot.sum_w;
  lb.kl = kl / n;
  lb.entropy = ent / n;
  lb.value = value_tokens ? val / static_cast<double>(value_tokens) : 0.0;
  lb.clip_fraction = static_cast<double>(clipped) / n;
  lb.total = lb.surrogate + cfg.kl_coef * lb.kl - cfg.entropy_coef * lb.entropy + cfg.value_coef * lb.value;

  if (!adj.empty() && value_tokens) {
    const double scale = cfg.value_coef * 2.0 / static_cast<double>(value_tokens);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& it = batch[b];
      if (adj[b].dvalues.size() == 0) continue;
      for (std::size_t k = 0; k < it.size(); ++k) {
        const auto row = static_cast<Eigen::Index>(it.positions[k] - 1);
        adj[b].dvalues(row) += scale * (outs[b].values(row) - it.value_targets[k]);
      }
    }
  }
  return lb;
}

}  // namespace

LossAndGrad loss_and_grad(const PolicyParams& params, std::span<const UpdateItem> batch, const ObjectiveConfig& cfg,
                          int threads) {
  LossBreakdown parts;
  const LossClosure closure = [&](std::span<const ForwardOutput> outs, std::span<OutputAdjoint> adj) {
    parts = accumulate(batch, outs, adj, cfg);
    return parts.total;
  };
  auto g = grad(params, contexts(batch), closure, threads);
  return {parts, std::move(g.grad)};
}

LossBreakdown evaluate_loss(const PolicyParams& params, std::span<const UpdateItem> batch,
                            const ObjectiveConfig& cfg) {
  std::vector<ForwardOutput> outs;
  outs.reserve(batch.size());
  for (const auto& it : batch) outs.push_back(forward(params, it.context));
  return accumulate(batch, outs, {}, cfg);
}

namespace {

// Gradient of -(1/sum_w) * sum_{selected} w A log pi(y).
std::vector<double> masked_pg(const PolicyParams& params, std::span<const UpdateItem> batch, double sum_w,
                              bool action_tokens, int threads) {
  const LossClosure closure = [&](std::span<const ForwardOutput> outs, std::span<OutputAdjoint> adj) {
    double loss = 0.0;
    RowStats rs;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& it = batch[b];
      adj[b].dlogits = Mat::Zero(outs[b].logits.rows(), outs[b].logits.cols());
      for (std::size_t k = 0; k < it.size(); ++k) {
        if ((it.labels[k] == SpanLabel::Action) != action_tokens) continue;
        const auto row = static_cast<Eigen::Index>(it.positions[k] - 1);
        rs.compute(outs[b].logits, row);
        const auto y = static_cast<std::size_t>(it.targets[k]);
        const double c = -it.weights[k] * it.advantages[k] / sum_w;
        loss += c * rs.logp[y];
        for (std::size_t v = 0; v < rs.p.size(); ++v) adj[b].dlogits(row, v) -= c * rs.p[v];
        adj[b].dlogits(row, y) += c;
      }
    }
    return loss;
  };
  return grad(params, contexts(batch), closure, threads).grad;
}

}  // namespace

GradientDecomposition gradient_decomposition_check(const PolicyParams& params, std::span<const UpdateItem> batch,
                                                   double eps_low, double eps_high, int threads) {
  const Totals tot = totals(batch);
  GradientDecomposition d;
  ObjectiveConfig cfg;
  cfg.eps_low = eps_low;
  cfg.eps_high = eps_high;
  cfg.kl_coef = 0.0;
  cfg.entropy_coef = 0.0;
  cfg.value_coef = 0.0;
  cfg.train_value = false;
  d.total = loss_and_grad(params, batch, cfg, threads).grad;
  d.think = masked_pg(params, batch, tot.sum_w, false, threads);
  d.action = masked_pg(params, batch, tot.sum_w, true, threads);
  for (std::size_t i = 0; i < d.total.size(); ++i)
    d.max_abs_residual = std::max(d.max_abs_residual, std::abs(d.total[i] - (d.think[i] + d.action[i])));
  return d;
}

std::vector<double> learning_rates(const Manifest& manifest, const AdamConfig& cfg) {
  std::vector<double> lr(manifest.total(), cfg.actor_lr);
  for (const auto& s : manifest.slots())
    if (s.name.rfind("value.", 0) == 0) std::fill_n(lr.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), cfg.critic_lr);
  return lr;
}

bool adam_step(std::span<double> params, std::span<const double> grad, std::span<const double> lr, AdamState& state,
               const AdamConfig& cfg) {
  if (grad.size() != params.size() || lr.size() != params.size())
    throw AlignmentError("adam_step: parameter, gradient and rate sizes differ");
  for (double g : grad)
    if (!std::isfinite(g)) {
      ++state.rejected;
      return false;
    }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= lr[i] * mhat / (std::sqrt(vhat) + cfg.eps);
  }
  return true;
}

bool adam_step(PolicyParams& params, std::span<const double> grad, AdamState& state, const AdamConfig& cfg) {
  const auto lr = learning_rates(*params.manifest, cfg);
  return adam_step(params.values, grad, lr, state, cfg);
}

}  // namespace actfocus

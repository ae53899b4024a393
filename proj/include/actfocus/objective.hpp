#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "actfocus/policy.hpp"
#include "actfocus/trajectory.hpp"

namespace actfocus {

struct ObjectiveConfig {
  double eps_low = 0.2;
  double eps_high = 0.28;
  double kl_coef = 0.0;
  double entropy_coef = 0.001;
  double value_coef = 0.5;
  bool train_value = true;  // PPO critic regression

  bool operator==(const ObjectiveConfig&) const = default;
};

/// min(rho * A, clip(rho, 1 - eps_low, 1 + eps_high) * A)
double clipped_term(double ratio, double advantage, double eps_low, double eps_high);

/// -(1 / sum w) * sum w_t * clipped_term(rho_t, A_t). Throws EmptyBatchError
/// when sum w is zero and AlignmentError on length mismatch.
double weighted_surrogate(std::span<const double> weights, std::span<const double> advantages,
                          std::span<const double> ratios, double eps_low, double eps_high);

/// Mean k1 estimate log pi - log pi_ref.
double kl_term(std::span<const double> logp, std::span<const double> logp_ref);

/// Mean of per-position policy entropies.
double entropy_bonus(std::span<const double> entropies);

/// One trajectory prepared for the update: context plus aligned per-token data.
struct UpdateItem {
  TokenSeq context;
  std::vector<std::size_t> positions;  // response token positions in context
  std::vector<Token> targets;
  std::vector<SpanLabel> labels;
  std::vector<double> weights;
  std::vector<double> advantages;
  std::vector<double> logp_old;
  std::vector<double> logp_ref;
  std::vector<double> value_targets;  // empty unless the critic is trained

  std::size_t size() const { return targets.size(); }
};

UpdateItem make_update_item(const Trajectory& traj, std::vector<double> weights, std::vector<double> advantages,
                            std::vector<double> value_targets = {});

struct LossBreakdown {
  double surrogate = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
  double value = 0.0;
  double total = 0.0;
  double sum_weights = 0.0;
  double clip_fraction = 0.0;
  double max_ratio_deviation = 0.0;  // max |rho - 1|
  std::size_t tokens = 0;
};

struct LossAndGrad {
  LossBreakdown parts;
  std::vector<double> grad;
};

/// total = surrogate + kl_coef * kl - entropy_coef * entropy + value_coef * value
LossAndGrad loss_and_grad(const PolicyParams& params, std::span<const UpdateItem> batch, const ObjectiveConfig& cfg,
                          int threads = 1);

/// Loss terms only, evaluated through the plain forward pass.
LossBreakdown evaluate_loss(const PolicyParams& params, std::span<const UpdateItem> batch,
                            const ObjectiveConfig& cfg);

struct GradientDecomposition {
  std::vector<double> think;   // -(1/sum w) * sum over non-action tokens of w A grad log pi
  std::vector<double> action;  // -(1/sum w) * sum over action tokens of w A grad log pi
  std::vector<double> total;   // gradient of the weighted surrogate
  double max_abs_residual = 0.0;
};

/// Computes both sides independently; meaningful when params equals the
/// rollout policy so every ratio is 1.
GradientDecomposition gradient_decomposition_check(const PolicyParams& params, std::span<const UpdateItem> batch,
                                                   double eps_low = 0.2, double eps_high = 0.28, int threads = 1);

struct AdamConfig {
  double actor_lr = 3e-4;
  double critic_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamConfig&) const = default;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  std::int64_t rejected = 0;
};

/// Per-element learning rates: critic_lr on value.* slots, actor_lr elsewhere.
std::vector<double> learning_rates(const Manifest& manifest, const AdamConfig& cfg);

/// Bias-corrected Adam. Returns false and leaves params untouched when the
/// gradient has a non-finite entry.
bool adam_step(std::span<double> params, std::span<const double> grad, std::span<const double> lr, AdamState& state,
               const AdamConfig& cfg);
bool adam_step(PolicyParams& params, std::span<const double> grad, AdamState& state, const AdamConfig& cfg);

}  // namespace actfocus

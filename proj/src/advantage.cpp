#include "actfocus/advantage.hpp"

#include <cmath>
#include <string>

#include "actfocus/errors.hpp"

namespace actfocus {

std::string_view to_string(Algorithm a) { return a == Algorithm::PPO ? "ppo" : "grpo"; }

Algorithm parse_algorithm(std::string_view name) {
  if (name == "ppo" || name == "PPO") return Algorithm::PPO;
  if (name == "grpo" || name == "GRPO") return Algorithm::GRPO;
  throw ConfigError("unknown algorithm '" + std::string(name) + "'");
}

GaeResult gae(std::span<const double> values, std::size_t T, double reward, double gamma, double lambda) {
  if (values.size() != T + 1)
    throw AlignmentError("gae: expected " + std::to_string(T + 1) + " values, got " + std::to_string(values.size()));
  GaeResult r;
  r.advantages.assign(T, 0.0);
  r.targets.assign(T, 0.0);
  if (gamma == 1.0 && lambda == 1.0) {
    // Telescoped form: every delta except the last cancels.
    const double ret = reward + values[T];
    for (std::size_t k = 0; k < T; ++k) {
      r.advantages[k] = ret - values[k];
      r.targets[k] = ret;
    }
    return r;
  }
  double running = 0.0;
  for (std::size_t k = T; k-- > 0;) {
    const double rt = (k + 1 == T) ? reward : 0.0;
    const double delta = rt + gamma * values[k + 1] - values[k];
    running = delta + gamma * lambda * running;
    r.advantages[k] = running;
    r.targets[k] = running + values[k];
  }
  return r;
}

GroupAdvantage grpo_advantage(std::span<const double> rewards) {
  if (rewards.size() < 2) throw DegenerateGroupError("group needs at least two rollouts");
  GroupAdvantage g;
  const double n = static_cast<double>(rewards.size());
  for (double r : rewards) g.mean += r;
  g.mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - g.mean) * (r - g.mean);
  g.stddev = std::sqrt(var / n);
  g.per_member.assign(rewards.size(), 0.0);
  if (g.stddev == 0.0) {
    g.degenerate = true;
    return g;
  }
  for (std::size_t i = 0; i < rewards.size(); ++i) g.per_member[i] = (rewards[i] - g.mean) / g.stddev;
  return g;
}

GroupAdvantage grpo_advantage(const TrajectoryGroup& group) {
  std::vector<double> rewards;
  rewards.reserve(group.members.size());
  for (const auto& m : group.members) rewards.push_back(m.reward);
  return grpo_advantage(rewards);
}

void whiten(std::vector<std::vector<double>>& advantages) {
  double n = 0.0, mean = 0.0;
  for (const auto& a : advantages)
    for (double x : a) {
      n += 1.0;
      mean += (x - mean) / n;
    }
  if (n == 0.0) return;
  double var = 0.0;
  for (const auto& a : advantages)
    for (double x : a) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n);
  const double scale = sd > 1e-12 ? 1.0 / sd : 1.0;
  for (auto& a : advantages)
    for (double& x : a) x = (x - mean) * scale;
}

double value_loss(std::span<const double> values, std::span<const double> targets) {
  if (values.size() != targets.size()) throw AlignmentError("value_loss: length mismatch");
  if (values.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) s += (values[i] - targets[i]) * (values[i] - targets[i]);
  return s / static_cast<double>(values.size());
}

}  // namespace actfocus

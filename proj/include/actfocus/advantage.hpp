#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "actfocus/trajectory.hpp"

namespace actfocus {

enum class Algorithm { PPO, GRPO };

std::string_view to_string(Algorithm a);
Algorithm parse_algorithm(std::string_view name);

struct GaeResult {
  std::vector<double> advantages;  // length T
  std::vector<double> targets;     // A_t + V_t, critic regression targets
};

/// Generalized advantage estimation with the sparse reward on the last token.
/// `values` holds V(c_1..c_T) followed by the bootstrap V(c_{T+1}), which is 0
/// at termination. Throws AlignmentError unless values.size() == T + 1.
GaeResult gae(std::span<const double> values, std::size_t T, double reward, double gamma = 1.0,
              double lambda = 1.0);

struct GroupAdvantage {
  std::vector<double> per_member;  // one scalar per trajectory
  double mean = 0.0;
  double stddev = 0.0;
  bool degenerate = false;  // all rewards equal; advantages are zero
};

/// (R_i - mean) / std over the group, population std. Throws
/// DegenerateGroupError for fewer than two members.
GroupAdvantage grpo_advantage(std::span<const double> rewards);
GroupAdvantage grpo_advantage(const TrajectoryGroup& group);

/// Shifts and scales every token advantage in the batch to mean 0 and
/// population std 1. A constant batch is only centred.
void whiten(std::vector<std::vector<double>>& advantages);

/// Mean squared error between predictions and targets.
double value_loss(std::span<const double> values, std::span<const double> targets);

}  // namespace actfocus

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "actfocus/rng.hpp"
#include "actfocus/trajectory.hpp"

namespace actfocus {

enum class Subset { Full, ThinkOnly, ActionOnly };

std::string_view to_string(Subset s);

/// Mean reference energy over the subset's tokens pooled across the group.
/// Structural tokens count in Full only. nullopt when the subset is empty.
std::optional<double> subset_mean_energy(const TrajectoryGroup& group, Subset subset);

/// Tie-averaged ranks, 1-based.
std::vector<double> average_ranks(std::span<const double> x);

struct SpearmanResult {
  double rho = 0.0;
  double p_value = 1.0;
  bool defined = true;  // false when x or y is constant
};

/// Spearman rho without a p-value. Throws AlignmentError on length mismatch
/// and EmptyBatchError for fewer than 3 points.
SpearmanResult spearman_rho(std::span<const double> x, std::span<const double> y);

/// Rho plus a two-sided permutation p-value over `permutations` shuffles of y:
/// (1 + #{|rho_perm| >= |rho|}) / (1 + permutations).
SpearmanResult spearman(std::span<const double> x, std::span<const double> y, RngStream rng,
                        int permutations = 10000);

struct CorrelationReport {
  Subset subset = Subset::Full;
  double rho = 0.0;
  double p_value = 1.0;
  int n_groups = 0;
  bool defined = true;
};

struct CompositionRow {
  std::string env;
  std::string scale_tag;
  double mean_tokens = 0.0;
  double think_pct = 0.0;   // of non-structural tokens
  double action_pct = 0.0;  // of non-structural tokens
  double structural_pct = 0.0;  // of all tokens
};

struct BottleneckReport {
  std::vector<CorrelationReport> correlations;  // Full, ThinkOnly, ActionOnly
  std::vector<CompositionRow> composition;      // one row per environment
  std::size_t groups = 0;
  std::size_t lines = 0;
  std::size_t skipped_lines = 0;
  std::vector<std::string> warnings;
};

/// Groups trajectories by (env, group_id) and correlates each subset's mean
/// energy with the group reward standard deviation. Groups with fewer than two
/// members or an empty subset are left out of that subset's correlation.
BottleneckReport bottleneck_report(std::span<const Trajectory> trajs, std::uint64_t seed,
                                   std::string_view scale_tag = "tiny", int threads = 1);

/// Reads a JSONL log; malformed lines are skipped with a warning and more
/// than 1% of them raises FormatError.
BottleneckReport diagnose_log(const std::filesystem::path& log, std::uint64_t seed, std::string_view scale_tag = "tiny",
                              int threads = 1);

void write_correlations_csv(std::ostream& out, const BottleneckReport& report);
void write_composition_csv(std::ostream& out, const BottleneckReport& report);

/// Writes correlations.csv and composition.csv under `dir`.
void write_report(const std::filesystem::path& dir, const BottleneckReport& report);

}  // namespace actfocus

#include "actfocus/diagnostics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>

#include "actfocus/config.hpp"
#include "actfocus/errors.hpp"
#include "actfocus/policy.hpp"
#include "actfocus/trajectory_io.hpp"

namespace actfocus {

std::string_view to_string(Subset s) {
  switch (s) {
    case Subset::Full: return "full";
    case Subset::ThinkOnly: return "think_only";
    case Subset::ActionOnly: return "action_only";
  }
  return "?";
}

std::optional<double> subset_mean_energy(const TrajectoryGroup& group, Subset subset) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& t : group.members) {
    const auto labels = t.labels();
    if (t.ref_lse.size() != labels.size()) throw CacheError("trajectory is missing cached reference log-sum-exp values");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool take = subset == Subset::Full || (subset == Subset::ThinkOnly && labels[i] == SpanLabel::Think) ||
                        (subset == Subset::ActionOnly && labels[i] == SpanLabel::Action);
      if (!take) continue;
      sum -= t.ref_lse[i];
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

namespace {

void check_pair(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw AlignmentError("spearman inputs differ in length");
  if (x.size() < 3) throw EmptyBatchError("spearman needs at least 3 points");
}

// Pearson correlation of centered vectors.
double centered_corr(std::span<const double> a, std::span<const double> b, double norm) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s / norm;
}

std::vector<double> centered(std::vector<double> v, double* ss) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  *ss = 0.0;
  for (auto& e : v) {
    e -= mean;
    *ss += e * e;
  }
  return v;
}

}  // namespace

SpearmanResult spearman_rho(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  double sx = 0.0, sy = 0.0;
  const auto rx = centered(average_ranks(x), &sx);
  const auto ry = centered(average_ranks(y), &sy);
  SpearmanResult r;
  if (sx == 0.0 || sy == 0.0) {
    r.defined = false;
    return r;
  }
  r.rho = std::clamp(centered_corr(rx, ry, std::sqrt(sx * sy)), -1.0, 1.0);
  return r;
}

SpearmanResult spearman(std::span<const double> x, std::span<const double> y, RngStream rng, int permutations) {
  check_pair(x, y);
  double sx = 0.0, sy = 0.0;
  const auto rx = centered(average_ranks(x), &sx);
  auto ry = centered(average_ranks(y), &sy);
  SpearmanResult r;
  if (sx == 0.0 || sy == 0.0) {
    r.defined = false;
    return r;
  }
  const double norm = std::sqrt(sx * sy);
  r.rho = std::clamp(centered_corr(rx, ry, norm), -1.0, 1.0);
  const double threshold = std::abs(r.rho) - 1e-12;
  int extreme = 0;
  for (int k = 0; k < permutations; ++k) {
    shuffle(ry.begin(), ry.end(), rng);
    if (std::abs(centered_corr(rx, ry, norm)) >= threshold) ++extreme;
  }
  r.p_value = static_cast<double>(1 + extreme) / static_cast<double>(1 + permutations);
  return r;
}

BottleneckReport bottleneck_report(std::span<const Trajectory> trajs, std::uint64_t seed, std::string_view scale_tag,
                                   int threads) {
  BottleneckReport rep;
  // Grouping through an ordered map makes the report independent of log order.
  std::map<std::pair<int, std::int64_t>, TrajectoryGroup> groups;
  for (const auto& t : trajs) {
    auto& g = groups[{static_cast<int>(t.env), t.group_id}];
    g.prompt_id = t.group_id;
    g.members.push_back(t);
  }
  rep.groups = groups.size();
  rep.lines = trajs.size();

  const std::array subsets{Subset::Full, Subset::ThinkOnly, Subset::ActionOnly};
  std::array<std::vector<double>, 3> energy, sigma;
  for (auto& [key, g] : groups) {
    if (g.members.size() < 2) continue;
    // Canonical member order keeps floating-point sums independent of log order.
    std::stable_sort(g.members.begin(), g.members.end(), [](const Trajectory& a, const Trajectory& b) {
      if (a.reward != b.reward) return a.reward < b.reward;
      return a.ref_lse < b.ref_lse;
    });
    const double s = std::sqrt(group_variance(g));
    for (std::size_t k = 0; k < subsets.size(); ++k) {
      if (auto e = subset_mean_energy(g, subsets[k])) {
        energy[k].push_back(*e);
        sigma[k].push_back(s);
      }
    }
  }

  rep.correlations.resize(subsets.size());
  const RngStream root = RngStream(seed).derive(kStreamPermutation);
  parallel_for(subsets.size(), threads, [&](std::size_t k) {
    auto& c = rep.correlations[k];
    c.subset = subsets[k];
    c.n_groups = static_cast<int>(energy[k].size());
    if (c.n_groups < 3) {
      c.defined = false;
      return;
    }
    const auto r = spearman(energy[k], sigma[k], root.derive(k));
    c.rho = r.rho;
    c.p_value = r.p_value;
    c.defined = r.defined;
  });
  for (const auto& c : rep.correlations)
    if (!c.defined)
      rep.warnings.push_back("subset " + std::string(to_string(c.subset)) + ": correlation undefined over " +
                             std::to_string(c.n_groups) + " groups");

  struct Counts {
    std::size_t trajs = 0, think = 0, action = 0, structural = 0;
  };
  std::map<EnvKind, Counts> per_env;
  for (const auto& t : trajs) {
    auto& c = per_env[t.env];
    ++c.trajs;
    for (auto l : t.labels()) {
      if (l == SpanLabel::Think) ++c.think;
      else if (l == SpanLabel::Action) ++c.action;
      else ++c.structural;
    }
  }
  for (const auto& [env, c] : per_env) {
    CompositionRow row;
    row.env = std::string(to_string(env));
    row.scale_tag = std::string(scale_tag);
    const double total = static_cast<double>(c.think + c.action + c.structural);
    const double content = static_cast<double>(c.think + c.action);
    row.mean_tokens = total / static_cast<double>(c.trajs);
    if (content > 0) {
      row.think_pct = 100.0 * static_cast<double>(c.think) / content;
      row.action_pct = 100.0 * static_cast<double>(c.action) / content;
    }
    if (total > 0) row.structural_pct = 100.0 * static_cast<double>(c.structural) / total;
    rep.composition.push_back(std::move(row));
  }
  return rep;
}

BottleneckReport diagnose_log(const std::filesystem::path& log, std::uint64_t seed, std::string_view scale_tag,
                              int threads) {
  auto read = read_jsonl_file(log.string());
  const std::size_t bad = read.warnings.size();
  if (read.lines == 0) throw FormatError("log '" + log.string() + "' has no trajectories");
  if (static_cast<double>(bad) > 0.01 * static_cast<double>(read.lines))
    throw FormatError(std::to_string(bad) + " of " + std::to_string(read.lines) + " log lines are malformed");
  auto rep = bottleneck_report(read.trajectories, seed, scale_tag, threads);
  rep.lines = read.lines;
  rep.skipped_lines = bad;
  rep.warnings.insert(rep.warnings.begin(), read.warnings.begin(), read.warnings.end());
  return rep;
}

void write_correlations_csv(std::ostream& out, const BottleneckReport& report) {
  out << "subset,rho,p_value,n_groups\n" << std::setprecision(10);
  for (const auto& c : report.correlations)
    out << to_string(c.subset) << ',' << c.rho << ',' << c.p_value << ',' << c.n_groups << '\n';
}

void write_composition_csv(std::ostream& out, const BottleneckReport& report) {
  out << "env,scale_tag,mean_tokens,think_pct,action_pct,structural_pct\n" << std::fixed << std::setprecision(2);
  for (const auto& r : report.composition)
    out << r.env << ',' << r.scale_tag << ',' << r.mean_tokens << ',' << r.think_pct << ',' << r.action_pct << ','
        << r.structural_pct << '\n';
}

void write_report(const std::filesystem::path& dir, const BottleneckReport& report) {
  std::filesystem::create_directories(dir);
  std::ofstream corr(dir / "correlations.csv"), comp(dir / "composition.csv");
  if (!corr || !comp) throw Error("cannot write report files under '" + dir.string() + "'");
  write_correlations_csv(corr, report);
  write_composition_csv(comp, report);
}

}  // namespace actfocus

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "actfocus/diagnostics.hpp"
#include "actfocus/errors.hpp"
#include "actfocus/trajectory_io.hpp"
#include "planted.hpp"

using namespace actfocus;

namespace {

// Rank by counting, then Pearson on the ranks.
double oracle_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto rank = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (double w : v) {
        less += w < v[i];
        equal += w == v[i];
      }
      r[i] = less + (equal + 1.0) / 2.0;
    }
    return r;
  };
  const auto rx = rank(x), ry = rank(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i] / n;
    my += ry[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

const CorrelationReport& find(const BottleneckReport& r, Subset s) {
  return *std::find_if(r.correlations.begin(), r.correlations.end(),
                       [&](const CorrelationReport& c) { return c.subset == s; });
}

}  // namespace

TEST_CASE("subset mean energy pools tokens across the group") {
  SUBCASE("constant field") {
    TrajectoryGroup g{0, {planted::member(0, 1, std::log(4.0) * -1, -std::log(4.0)), planted::member(0, 0, -std::log(4.0), -std::log(4.0), 3, 2)}, 0};
    for (auto s : {Subset::Full, Subset::ThinkOnly, Subset::ActionOnly})
      CHECK(*subset_mean_energy(g, s) == doctest::Approx(-std::log(4.0)).epsilon(1e-15));
  }
  SUBCASE("ten percent action tokens") {
    // 10 tokens per turn: 4 tags, 5 filler, 1 action.
    TrajectoryGroup g{0, {planted::member(0, 1, 0.0, 2.0), planted::member(0, 0, 0.0, 2.0, 5, 3)}, 0};
    CHECK(*subset_mean_energy(g, Subset::ActionOnly) == 2.0);
    CHECK(*subset_mean_energy(g, Subset::ThinkOnly) == 0.0);
    CHECK(*subset_mean_energy(g, Subset::Full) == doctest::Approx(0.2).epsilon(1e-14));
  }
  SUBCASE("pooled, not averaged per trajectory") {
    // Action energies 1 (one token) and 4 (three tokens): pooled mean 13/4.
    TrajectoryGroup g{0, {planted::member(0, 0, 0.0, 1.0, 2, 1), planted::member(0, 0, 0.0, 4.0, 2, 3)}, 0};
    CHECK(*subset_mean_energy(g, Subset::ActionOnly) == doctest::Approx(13.0 / 4.0));
  }
  SUBCASE("single member equals its own mean") {
    auto t = planted::member(0, 0, 0.3, 1.7, 4, 2);
    TrajectoryGroup g{0, {t}, 0};
    double s = 0;
    for (double v : t.ref_lse) s -= v;
    CHECK(*subset_mean_energy(g, Subset::Full) == doctest::Approx(s / static_cast<double>(t.ref_lse.size())));
  }
  SUBCASE("empty subset is undefined") {
    auto t = planted::member(0, 0, 0.3, 1.7);
    t.turns[0].response = parse_response(TokenSeq{tok::kThinkOpen, tok::kThinkClose, tok::kAnswerOpen, tok::kAnswerClose});
    t.ref_lse.assign(4, 0.0);
    TrajectoryGroup g{0, {t}, 0};
    CHECK_FALSE(subset_mean_energy(g, Subset::ActionOnly).has_value());
    CHECK_FALSE(subset_mean_energy(g, Subset::ThinkOnly).has_value());
    CHECK(subset_mean_energy(g, Subset::Full).has_value());
  }
  SUBCASE("missing cache") {
    auto t = planted::member(0, 0, 0.3, 1.7);
    t.ref_lse.clear();
    TrajectoryGroup g{0, {t}, 0};
    CHECK_THROWS_AS(subset_mean_energy(g, Subset::Full), CacheError);
  }
}

TEST_CASE("spearman rho") {
  const std::vector<double> x{0.3, -1.2, 4.0, 2.2, 0.9, 7.1};
  std::vector<double> neg(x.size());
  std::transform(x.begin(), x.end(), neg.begin(), [](double v) { return -v; });
  CHECK(spearman_rho(x, x).rho == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(spearman_rho(x, neg).rho == doctest::Approx(-1.0).epsilon(1e-15));

  const std::vector<double> a{1, 2, 2, 3}, b{1, 3, 2, 4};
  CHECK(std::abs(spearman_rho(a, b).rho - oracle_spearman(a, b)) < 1e-12);

  const std::vector<double> c{2, 2, 2, 2};
  CHECK_FALSE(spearman_rho(c, b).defined);
  CHECK(spearman_rho(c, b).rho == 0.0);
  CHECK_THROWS_AS(spearman_rho(std::vector<double>{1, 2}, std::vector<double>{1, 2}), EmptyBatchError);
  CHECK_THROWS_AS(spearman_rho(a, std::vector<double>{1, 2, 3}), AlignmentError);
}

TEST_CASE("spearman matches the rank-then-Pearson oracle and ignores monotone maps") {
  RngStream rng(91);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 3 + rng.below(30);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse values so ties are common.
      x[i] = static_cast<double>(rng.below(6));
      y[i] = 0.5 * x[i] + static_cast<double>(rng.below(4));
    }
    const auto r = spearman_rho(x, y);
    if (!r.defined) continue;
    CHECK(std::abs(r.rho - oracle_spearman(x, y)) < 1e-12);
    std::vector<double> fx(n), gy(n);
    for (std::size_t i = 0; i < n; ++i) {
      fx[i] = std::exp(0.7 * x[i]) - 3.0;
      gy[i] = y[i] * y[i] * y[i] + 2.0 * y[i];
    }
    CHECK(std::abs(spearman_rho(fx, gy).rho - r.rho) < 1e-12);
  }
}

TEST_CASE("permutation p-value") {
  std::vector<double> x(40), y(40), z(40);
  RngStream rng(5);
  for (int i = 0; i < 40; ++i) {
    x[i] = i;
    y[i] = i + 3.0 * rng.normal();
    z[i] = rng.normal();
  }
  const auto strong = spearman(x, y, RngStream(1), 2000);
  CHECK(strong.p_value < 0.01);
  CHECK(strong.p_value >= 1.0 / 2001.0);
  CHECK(strong.rho == spearman_rho(x, y).rho);
  const auto weak = spearman(x, z, RngStream(1), 2000);
  if (std::abs(weak.rho) < 0.1) CHECK(weak.p_value > 0.05);
  // Seeded and reproducible.
  CHECK(spearman(x, z, RngStream(1), 2000).p_value == weak.p_value);
}

TEST_CASE("planted fixture construction") {
  std::vector<int> id(81);
  std::iota(id.begin(), id.end(), 0);
  CHECK(planted::rank_rho(planted::action_ranks(), id) == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(std::abs(planted::rank_rho(planted::think_ranks(), id)) < 0.02);
}

TEST_CASE("bottleneck report recovers the planted correlations") {
  const auto log = planted::bottleneck_log();
  const auto rep = bottleneck_report(log, 0);
  REQUIRE(rep.correlations.size() == 3);
  const auto& act = find(rep, Subset::ActionOnly);
  const auto& think = find(rep, Subset::ThinkOnly);
  CHECK(act.n_groups == 81);
  CHECK(std::abs(act.rho - 0.95) < 1e-12);
  CHECK(act.p_value < 0.01);
  CHECK(std::abs(think.rho) < 0.15);
  CHECK(think.p_value > 0.05);

  SUBCASE("independent of log order") {
    auto shuffled = log;
    RngStream rng(3);
    shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto again = bottleneck_report(shuffled, 0);
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(again.correlations[k].rho == rep.correlations[k].rho);
      CHECK(again.correlations[k].p_value == rep.correlations[k].p_value);
    }
  }
  SUBCASE("composition rows") {
    REQUIRE(rep.composition.size() == 1);
    const auto& row = rep.composition[0];
    CHECK(row.env == "frozenlake");
    CHECK(row.mean_tokens == 10.0);
    CHECK(row.think_pct + row.action_pct == doctest::Approx(100.0).epsilon(1e-3));
    CHECK(row.action_pct == doctest::Approx(100.0 / 6.0));
    CHECK(row.structural_pct == doctest::Approx(40.0));
  }
}

TEST_CASE("diagnose_log skips malformed lines and aborts above one percent") {
  const auto dir = std::filesystem::temp_directory_path() / "actfocus_diag_test";
  std::filesystem::create_directories(dir);
  const auto log = planted::bottleneck_log();  // 648 lines
  auto write = [&](int bad) {
    std::ofstream f(dir / "log.jsonl");
    write_jsonl(f, log);
    for (int i = 0; i < bad; ++i) f << "{not json\n";
  };
  write(3);
  const auto rep = diagnose_log(dir / "log.jsonl", 0);
  CHECK(rep.skipped_lines == 3);
  CHECK(std::abs(find(rep, Subset::ActionOnly).rho - 0.95) < 1e-12);
  write_report(dir / "out", rep);
  std::ifstream corr(dir / "out" / "correlations.csv");
  std::string header;
  std::getline(corr, header);
  CHECK(header == "subset,rho,p_value,n_groups");
  write(10);
  CHECK_THROWS_AS(diagnose_log(dir / "log.jsonl", 0), FormatError);
  std::filesystem::remove_all(dir);
}

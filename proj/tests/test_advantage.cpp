#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "actfocus/advantage.hpp"
#include "actfocus/errors.hpp"
#include "actfocus/rng.hpp"

using namespace actfocus;

namespace {

// Brute-force double sum over TD residuals.
std::vector<double> gae_oracle(const std::vector<double>& v, double R, double g, double l) {
  const std::size_t T = v.size() - 1;
  std::vector<double> out(T);
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t j = t; j < T; ++j) {
      const double r = (j + 1 == T) ? R : 0.0;
      const double delta = r + g * v[j + 1] - v[j];
      s += std::pow(g * l, static_cast<double>(j - t)) * delta;
    }
    out[t] = s;
  }
  return out;
}

}  // namespace

TEST_CASE("gae telescopes with unit discounts") {
  std::vector<double> v{0.3, -0.2, 0.7, 0.1, 0.0};
  const auto r = gae(v, 4, 2.5);
  for (std::size_t t = 0; t < 4; ++t) {
    CHECK(r.advantages[t] == 2.5 - v[t]);
    CHECK(r.targets[t] == 2.5);
  }
  const auto z = gae(std::vector<double>(6, 0.0), 5, 1.0);
  for (double a : z.advantages) CHECK(a == 1.0);
  CHECK_THROWS_AS(gae(v, 3, 1.0), AlignmentError);
}

TEST_CASE("gae matches double-sum oracle") {
  RngStream rng(42);
  for (std::size_t T = 1; T <= 32; ++T) {
    for (int rep = 0; rep < 3; ++rep) {
      std::vector<double> v(T + 1);
      for (std::size_t i = 0; i < T; ++i) v[i] = rng.normal();
      v[T] = 0.0;
      const double R = 3 * rng.normal();
      const double g = rep == 0 ? 0.99 : rng.uniform();
      const double l = rep == 0 ? 0.95 : rng.uniform();
      const auto got = gae(v, T, R, g, l);
      const auto want = gae_oracle(v, R, g, l);
      for (std::size_t t = 0; t < T; ++t) CHECK(got.advantages[t] == doctest::Approx(want[t]).epsilon(1e-12).scale(1.0));
    }
  }
}

TEST_CASE("grpo advantages") {
  const auto a = grpo_advantage(std::vector<double>{1, 0, 1, 0});
  CHECK(a.per_member == std::vector<double>{1, -1, 1, -1});
  const auto d = grpo_advantage(std::vector<double>{2, 2, 2});
  CHECK(d.degenerate);
  for (double x : d.per_member) CHECK(x == 0.0);
  CHECK_THROWS_AS(grpo_advantage(std::vector<double>{1.0}), DegenerateGroupError);

  RngStream rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> r(16);
    for (double& x : r) x = 10 * rng.normal();
    const auto g = grpo_advantage(r);
    const double m = std::accumulate(g.per_member.begin(), g.per_member.end(), 0.0) / 16;
    double var = 0;
    for (double x : g.per_member) var += (x - m) * (x - m);
    CHECK(std::abs(m) < 1e-10);
    CHECK(std::sqrt(var / 16) == doctest::Approx(1.0).epsilon(1e-10));

    // Shift invariance, positive scale invariance, order preservation.
    std::vector<double> shifted(r), scaled(r);
    for (double& x : shifted) x += 5.0;
    for (double& x : scaled) x *= 3.0;
    const auto gs = grpo_advantage(shifted);
    const auto gk = grpo_advantage(scaled);
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(gs.per_member[i] == doctest::Approx(g.per_member[i]).epsilon(1e-9).scale(1.0));
      CHECK(gk.per_member[i] == doctest::Approx(g.per_member[i]).epsilon(1e-9).scale(1.0));
    }
    std::vector<std::size_t> ia(16), ib(16);
    std::iota(ia.begin(), ia.end(), 0);
    ib = ia;
    std::sort(ia.begin(), ia.end(), [&](auto x, auto y) { return r[x] < r[y]; });
    std::sort(ib.begin(), ib.end(), [&](auto x, auto y) { return g.per_member[x] < g.per_member[y]; });
    CHECK(ia == ib);
  }
}

TEST_CASE("value loss") {
  std::vector<double> t{1, 2, 3};
  CHECK(value_loss(t, t) == 0.0);
  std::vector<double> p{2, 3, 4};
  CHECK(value_loss(p, t) == 1.0);
  RngStream rng(5);
  std::vector<double> a(50), b(50);
  for (auto& x : a) x = rng.normal();
  for (auto& x : b) x = rng.normal();
  double s = 0;
  for (int i = 0; i < 50; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(value_loss(a, b) == doctest::Approx(s / 50).epsilon(1e-12));
}

TEST_CASE("whiten gives token-level mean 0 and std 1") {
  std::vector<std::vector<double>> a{{1.0, 2.0, 3.0}, {10.0}, {}, {-4.0, 0.5}};
  whiten(a);
  double n = 0, s = 0, s2 = 0;
  for (const auto& v : a)
    for (double x : v) {
      n += 1;
      s += x;
      s2 += x * x;
    }
  CHECK(n == 6);
  CHECK(std::abs(s / n) < 1e-14);
  CHECK(s2 / n == doctest::Approx(1.0).epsilon(1e-13));
  // Order within the batch is preserved.
  CHECK(a[1][0] > a[0][2]);
  CHECK(a[3][0] < a[0][0]);

  std::vector<std::vector<double>> c{{2.0, 2.0}, {2.0}};
  whiten(c);
  for (const auto& v : c)
    for (double x : v) CHECK(x == 0.0);
}

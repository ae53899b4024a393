#include <doctest.h>

#include <cmath>
#include <sstream>

#include "actfocus/credit.hpp"
#include "actfocus/errors.hpp"
#include "fixtures.hpp"

using namespace actfocus;

TEST_CASE("token energy") {
  const std::vector<double> zeros(4, 0.0);
  CHECK(token_energy(zeros) == doctest::Approx(-std::log(4.0)).epsilon(1e-12));
  CHECK(token_energy(std::vector<double>{0.0}) == 0.0);
  RngStream r(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> f(62), g(62);
    const double c = 20.0 * r.normal();
    for (std::size_t i = 0; i < f.size(); ++i) {
      f[i] = 5.0 * r.normal();
      g[i] = f[i] + c;
    }
    CHECK(token_energy(g) == doctest::Approx(token_energy(f) - c).epsilon(1e-12).scale(1.0));
  }
  // Large logits stay finite.
  CHECK(std::isfinite(token_energy(std::vector<double>{1000.0, 999.0})));
}

TEST_CASE("normalize_signal") {
  const auto eq = normalize_signal(std::vector<double>(10, 3.0));
  for (double s : eq.s_tilde) CHECK(s == 0.5);
  CHECK(eq.stddev == doctest::Approx(std::sqrt(1e-6)));

  std::vector<double> sig{1.0, 2.0, 3.0, 4.0, 7.0};
  const auto n = normalize_signal(sig);
  double mu = 0, var = 0;
  for (double s : sig) mu += s;
  mu /= 5;
  for (double s : sig) var += (s - mu) * (s - mu);
  const double sd = std::sqrt(var / 5 + 1e-6);
  for (std::size_t i = 0; i < sig.size(); ++i)
    CHECK(n.s_tilde[i] == doctest::Approx(1.0 / (1.0 + std::exp(-(sig[i] - mu) / sd))).epsilon(1e-14));

  // A token one std above the mean maps to sigmoid(1).
  std::vector<double> pm{-1.0, 1.0};
  const auto p = normalize_signal(pm);
  CHECK(p.s_tilde[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0 / std::sqrt(1.0 + 1e-6)))).epsilon(1e-12));

  RngStream r(9);
  std::vector<double> gauss(20000);
  for (double& g : gauss) g = r.normal();
  const auto gn = normalize_signal(gauss);
  double m = 0;
  for (double s : gn.s_tilde) m += s;
  CHECK(m / gauss.size() == doctest::Approx(0.5).epsilon(0.02));

  CHECK_THROWS_AS(normalize_signal(std::vector<double>{}), EmptyBatchError);
}

TEST_CASE("assign_weights against scalar oracle") {
  const auto arch = fixtures::small_arch();
  const auto theta = fixtures::noisy_params(arch, 1);
  const auto ref = fixtures::noisy_params(arch, 2);
  std::vector<Trajectory> batch;
  for (int i = 0; i < 6; ++i) batch.push_back(fixtures::make_traj(theta, ref, 100 + i));
  const auto bv = fixtures::view(batch);

  for (auto kind : {SignalKind::Energy, SignalKind::Entropy, SignalKind::PolicyNLL, SignalKind::LogProbShift}) {
    const double alpha = 0.1, beta = 0.5;
    const auto c = assign_weights(bv, alpha, beta, kind);
    // Oracle: gather action signals, normalize, weight.
    std::vector<double> s;
    for (const auto& t : batch) {
      const auto labels = t.labels();
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != SpanLabel::Action) continue;
        double v = 0;
        switch (kind) {
          case SignalKind::Energy: v = -t.ref_lse[i]; break;
          case SignalKind::Entropy: v = t.ref_entropy[i]; break;
          case SignalKind::PolicyNLL: v = -t.logp_old[i]; break;
          case SignalKind::LogProbShift: v = t.logp_old[i] - t.logp_ref[i]; break;
        }
        s.push_back(v);
      }
    }
    double mu = 0, var = 0;
    for (double v : s) mu += v;
    mu /= s.size();
    for (double v : s) var += (v - mu) * (v - mu);
    const double sd = std::sqrt(var / s.size() + 1e-6);
    std::size_t k = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto labels = batch[b].labels();
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const double w = c.tokens[b][i].weight;
        if (labels[i] == SpanLabel::Action) {
          const double expect = 1.0 + beta / (1.0 + std::exp(-(s[k++] - mu) / sd));
          CHECK(w == doctest::Approx(expect).epsilon(1e-14));
          CHECK(w > 1.0);
          CHECK(w < 1.0 + beta);
        } else {
          CHECK(w == alpha);
        }
      }
    }
    // Monotone in the signal.
    std::vector<std::pair<double, double>> sw;
    for (std::size_t b = 0; b < batch.size(); ++b)
      for (const auto& tc : c.tokens[b])
        if (tc.label == SpanLabel::Action) sw.emplace_back(tc.signal, tc.weight);
    for (const auto& [s1, w1] : sw)
      for (const auto& [s2, w2] : sw)
        if (s1 > s2) CHECK(w1 > w2);
  }

  const auto u = assign_weights(bv, 1.0, 0.0, SignalKind::Energy);
  for (const auto& row : u.tokens)
    for (const auto& tc : row) CHECK(tc.weight == 1.0);
}

TEST_CASE("weights at batch-mean signal") {
  const auto arch = fixtures::small_arch();
  const auto p = fixtures::noisy_params(arch, 4);
  std::vector<Trajectory> batch{fixtures::make_traj(p, p, 5)};
  auto& t = batch[0];
  std::fill(t.ref_lse.begin(), t.ref_lse.end(), -2.0);
  const auto c = assign_weights(fixtures::view(batch), 0.1, 0.5, SignalKind::Energy);
  for (const auto& tc : c.tokens[0]) CHECK(tc.weight == (tc.label == SpanLabel::Action ? 1.25 : 0.1));
}

TEST_CASE("signal kind only changes raw values") {
  const auto arch = fixtures::small_arch();
  const auto p = fixtures::noisy_params(arch, 4);
  std::vector<Trajectory> a{fixtures::make_traj(p, p, 5), fixtures::make_traj(p, p, 6)};
  // Inject the same numbers into every cache so all kinds see identical s_t.
  for (auto& t : a) {
    RngStream r(t.prompt_id + 1);
    for (std::size_t i = 0; i < t.token_count(); ++i) {
      const double s = r.normal();
      t.ref_lse[i] = -s;
      t.ref_entropy[i] = s;
      t.logp_old[i] = -s;
      t.logp_ref[i] = -2 * s;
    }
  }
  const auto bv = fixtures::view(a);
  const auto base = assign_weights(bv, 0.1, 0.5, SignalKind::Energy);
  for (auto kind : {SignalKind::Entropy, SignalKind::PolicyNLL, SignalKind::LogProbShift}) {
    const auto c = assign_weights(bv, 0.1, 0.5, kind);
    for (std::size_t b = 0; b < a.size(); ++b)
      for (std::size_t i = 0; i < c.tokens[b].size(); ++i) CHECK(c.tokens[b][i].weight == base.tokens[b][i].weight);
  }
}

TEST_CASE("cached signals and errors") {
  const auto arch = fixtures::small_arch();
  const auto p = fixtures::noisy_params(arch, 7);
  auto t = fixtures::make_traj(p, p, 8);
  for (std::size_t i = 0; i < t.token_count(); ++i) CHECK(raw_signal(SignalKind::LogProbShift, t, i) == doctest::Approx(0.0).scale(1e-9));
  const auto lv = logprob_and_value(p, t);
  for (std::size_t i = 0; i < t.token_count(); ++i)
    CHECK(raw_signal(SignalKind::PolicyNLL, t, i) == doctest::Approx(-lv.logp[i]).epsilon(1e-10));
  t.ref_entropy.clear();
  CHECK_THROWS_AS(raw_signal(SignalKind::Entropy, t, 0), CacheError);
  CHECK_NOTHROW(raw_signal(SignalKind::Energy, t, 0));
}

TEST_CASE("zero-action batch falls back") {
  const auto arch = fixtures::small_arch();
  const auto p = fixtures::noisy_params(arch, 7);
  auto t = fixtures::make_traj(p, p, 8, 1);
  // Drop the opening tag so the response is malformed and has no action span.
  Trajectory m = t;
  auto toks = m.turns[0].response.tokens;
  toks.erase(toks.begin());
  m.turns[0].response = parse_response(toks);
  m.logp_old.pop_back();
  m.logp_ref.pop_back();
  m.ref_lse.pop_back();
  m.ref_entropy.pop_back();
  std::vector<Trajectory> batch{m};
  const auto c = assign_weights(fixtures::view(batch), 0.3, 0.5, SignalKind::Energy);
  CHECK_FALSE(c.modulated);
  for (const auto& tc : c.tokens[0]) CHECK(tc.weight == 0.3);
}

TEST_CASE("credit csv columns") {
  const auto arch = fixtures::small_arch();
  const auto p = fixtures::noisy_params(arch, 7);
  std::vector<Trajectory> batch{fixtures::make_traj(p, p, 8)};
  const auto bv = fixtures::view(batch);
  std::ostringstream os;
  write_credit_csv(os, bv, assign_weights(bv, 0.1, 0.5, SignalKind::Energy), SignalKind::Energy);
  std::string header;
  std::istringstream is(os.str());
  std::getline(is, header);
  CHECK(header == "traj_id,pos,label,signal_kind,s_t,s_tilde,w_t");
}

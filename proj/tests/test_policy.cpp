#include <doctest.h>

#include <cmath>

#include "actfocus/errors.hpp"
#include "actfocus/policy.hpp"

using namespace actfocus;

namespace {

PolicyArch tiny_arch() {
  PolicyArch a;
  a.d_model = 8;
  a.n_heads = 2;
  a.n_layers = 2;
  a.context_window = 16;
  a.mlp_mult = 2;
  return a;
}

PolicyParams randomized(const PolicyArch& a, std::uint64_t seed) {
  auto p = PolicyParams::init(a, RngStream(seed));
  RngStream r(seed + 1);
  for (double& v : p.values) v += 0.3 * r.normal();
  return p;
}

// Loss touching every logit and value through fixed random coefficients.
LossClosure probe_loss(std::uint64_t seed) {
  return [seed](std::span<const ForwardOutput> outs, std::span<OutputAdjoint> adj) {
    RngStream r(seed);
    double loss = 0.0;
    for (std::size_t s = 0; s < outs.size(); ++s) {
      const auto& o = outs[s];
      adj[s].dlogits = Mat(o.logits.rows(), o.logits.cols());
      adj[s].dvalues = Vec(o.values.size());
      for (Eigen::Index i = 0; i < o.logits.rows(); ++i)
        for (Eigen::Index j = 0; j < o.logits.cols(); ++j) {
          const double c = r.normal();
          loss += c * o.logits(i, j);
          adj[s].dlogits(i, j) = c;
        }
      for (Eigen::Index i = 0; i < o.values.size(); ++i) {
        const double c = r.normal();
        loss += c * o.values(i) * o.values(i);
        adj[s].dvalues(i) = 2.0 * c * o.values(i);
      }
    }
    return loss;
  };
}

}  // namespace

TEST_CASE("manifest slots tile the parameter vector") {
  const auto m = Manifest::build(tiny_arch());
  std::size_t off = 0;
  for (const auto& s : m.slots()) {
    CHECK(s.offset == off);
    off += s.size();
  }
  CHECK(off == m.total());
  CHECK(m.at("value.w").name == "value.w");
  CHECK_THROWS(m.at("nope"));
}

TEST_CASE("logits at position i ignore later tokens") {
  const auto p = randomized(tiny_arch(), 3);
  const TokenSeq a{5, 8, 25, 26, 9, 0, 44};
  TokenSeq b = a;
  b[5] = 13;
  b[6] = 12;
  const auto fa = forward(p, a);
  const auto fb = forward(p, b);
  for (int i = 0; i < 5; ++i) {
    CHECK((fa.logits.row(i) - fb.logits.row(i)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(fa.values(i) == fb.values(i));
  }
  CHECK((fa.logits.row(5) - fb.logits.row(5)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("context overflow is reported") {
  const auto p = PolicyParams::init(tiny_arch(), RngStream(1));
  TokenSeq long_seq(17, 44);
  CHECK_THROWS_AS(forward(p, long_seq), ContextOverflowError);
}

TEST_CASE("decoder matches full forward") {
  const auto p = randomized(tiny_arch(), 5);
  const TokenSeq seq{5, 8, 25, 26, 9, 0, 44, 45, 1, 2, 13};
  const auto full = forward(p, seq);
  Decoder d(p);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    d.feed(seq[i]);
    const auto row = d.logits();
    for (std::size_t j = 0; j < row.size(); ++j) CHECK(row[j] == doctest::Approx(full.logits(i, j)).epsilon(1e-12));
    CHECK(d.value() == doctest::Approx(full.values(i)).epsilon(1e-12));
  }
}

TEST_CASE("analytic gradient matches central differences") {
  const auto arch = tiny_arch();
  auto p = randomized(arch, 11);
  const std::vector<TokenSeq> seqs{{5, 8, 25, 26, 9, 0, 44}, {6, 8, 27, 1, 2, 10, 3}};
  const auto closure = probe_loss(99);
  const auto g = grad(p, seqs, closure, 1);
  REQUIRE(g.grad.size() == p.size());

  auto eval = [&](const PolicyParams& q) {
    std::vector<ForwardOutput> outs;
    for (const auto& s : seqs) outs.push_back(forward(q, s));
    std::vector<OutputAdjoint> adj(outs.size());
    return closure(outs, adj);
  };
  RngStream pick(7);
  const double h = 1e-5;
  int checked = 0;
  for (const auto& slot : p.manifest->slots()) {
    for (int k = 0; k < 3; ++k) {
      const std::size_t idx = slot.offset + pick.below(slot.size());
      auto plus = p, minus = p;
      plus.values[idx] += h;
      minus.values[idx] -= h;
      const double fd = (eval(plus) - eval(minus)) / (2 * h);
      INFO(slot.name << "[" << idx - slot.offset << "]");
      CHECK(g.grad[idx] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
      ++checked;
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("gradient is independent of thread count") {
  const auto p = randomized(tiny_arch(), 13);
  std::vector<TokenSeq> seqs;
  for (int i = 0; i < 6; ++i) seqs.push_back({5, 8, Token(25 + i), 26, 9, 0, Token(44 + i)});
  const auto g1 = grad(p, seqs, probe_loss(4), 1);
  const auto g3 = grad(p, seqs, probe_loss(4), 3);
  CHECK(g1.loss == g3.loss);
  CHECK(g1.grad == g3.grad);
}

TEST_CASE("non-finite gradient names the parameter") {
  auto p = randomized(tiny_arch(), 2);
  const std::vector<TokenSeq> seqs{{5, 8, 25}};
  LossClosure bad = [](std::span<const ForwardOutput> outs, std::span<OutputAdjoint> adj) {
    adj[0].dlogits = Mat::Constant(outs[0].logits.rows(), outs[0].logits.cols(), std::nan(""));
    return 0.0;
  };
  try {
    grad(p, seqs, bad, 1);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(!e.parameter().empty());
  }
}

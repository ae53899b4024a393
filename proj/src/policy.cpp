#include "actfocus/policy.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <numbers>
#include <thread>
#include <type_traits>
#include <unordered_map>

#include "actfocus/errors.hpp"
#include "actfocus/numerics.hpp"

namespace actfocus {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.044715;
const double kGeluK = std::sqrt(2.0 / std::numbers::pi);

using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

template <class T>
using MapMat = Eigen::Map<std::conditional_t<std::is_const_v<T>, const Mat, Mat>>;
template <class T>
using MapRow = Eigen::Map<std::conditional_t<std::is_const_v<T>, const RowVec, RowVec>>;

struct LayerSlots {
  const ParamSlot *ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo, *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
};

struct Slots {
  const ParamSlot *tok, *pos;
  std::vector<LayerSlots> layers;
  const ParamSlot *lnf_g, *lnf_b, *head_w, *head_b;
  const ParamSlot* value_w = nullptr;
  const ParamSlot* value_b = nullptr;
};

Slots resolve(const PolicyParams& p) {
  const Manifest& m = *p.manifest;
  Slots s;
  s.tok = &m.at("tok_emb");
  s.pos = &m.at("pos_emb");
  for (int l = 0; l < p.arch.n_layers; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    s.layers.push_back({&m.at(b + "ln1.g"), &m.at(b + "ln1.b"), &m.at(b + "attn.wq"), &m.at(b + "attn.bq"),
                        &m.at(b + "attn.wk"), &m.at(b + "attn.bk"), &m.at(b + "attn.wv"), &m.at(b + "attn.bv"),
                        &m.at(b + "attn.wo"), &m.at(b + "attn.bo"), &m.at(b + "ln2.g"), &m.at(b + "ln2.b"),
                        &m.at(b + "mlp.w1"), &m.at(b + "mlp.b1"), &m.at(b + "mlp.w2"), &m.at(b + "mlp.b2")});
  }
  s.lnf_g = &m.at("lnf.g");
  s.lnf_b = &m.at("lnf.b");
  s.head_w = &m.at("head.w");
  s.head_b = &m.at("head.b");
  if (p.arch.value_head) {
    s.value_w = &m.at("value.w");
    s.value_b = &m.at("value.b");
  }
  return s;
}

template <class T>
MapMat<T> mat(T* base, const ParamSlot* s) {
  return MapMat<T>(base + s->offset, s->shape[0], s->shape[1]);
}
template <class T>
MapRow<T> row(T* base, const ParamSlot* s) {
  return MapRow<T>(base + s->offset, static_cast<Eigen::Index>(s->size()));
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluK * (x + kGeluC * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluK * (x + kGeluC * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * x * x);
}

template <class Derived>
void layernorm_row(const Eigen::MatrixBase<Derived>& x, const MapRow<const double>& g, const MapRow<const double>& b,
                   RowVec& y, RowVec* xhat, double* rstd_out) {
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  RowVec xh = (x.array() - mean) * rstd;
  y = xh.cwiseProduct(g) + b;
  if (xhat) *xhat = std::move(xh);
  if (rstd_out) *rstd_out = rstd;
}

void layernorm(const Mat& x, const MapRow<const double>& g, const MapRow<const double>& b, Mat& y, Mat& xhat,
               Vec& rstd) {
  const auto n = x.rows();
  y.resize(n, x.cols());
  xhat.resize(n, x.cols());
  rstd.resize(n);
  RowVec yr, xr;
  for (Eigen::Index i = 0; i < n; ++i) {
    layernorm_row(x.row(i), g, b, yr, &xr, &rstd(i));
    y.row(i) = yr;
    xhat.row(i) = xr;
  }
}

void layernorm_backward(const Mat& dy, const Mat& xhat, const Vec& rstd, const MapRow<const double>& g, Mat& dx,
                        MapRow<double> dg, MapRow<double> db) {
  const double d = static_cast<double>(dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const RowVec dxhat = dy.row(i).cwiseProduct(g);
    dg += dy.row(i).cwiseProduct(xhat.row(i));
    db += dy.row(i);
    const double m1 = dxhat.sum() / d;
    const double m2 = dxhat.cwiseProduct(xhat.row(i)).sum() / d;
    dx.row(i) += rstd(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2).matrix();
  }
}

struct LayerTape {
  Mat x_in, xhat1, a, q, k, v, attn, x_mid, xhat2, m, u, g;
  Vec rstd1, rstd2;
  std::vector<Mat> probs;
};

struct Tape {
  TokenSeq tokens;
  std::vector<LayerTape> layers;
  Mat xhat_f, hf;
  Vec rstd_f;
};

void check_context(const PolicyArch& arch, std::size_t n) {
  if (n > static_cast<std::size_t>(arch.context_window))
    throw ContextOverflowError("context of " + std::to_string(n) + " tokens exceeds the window of " +
                               std::to_string(arch.context_window));
}

ForwardOutput forward_impl(const PolicyParams& p, const Slots& s, std::span<const Token> tokens, Tape* tape) {
  const auto& arch = p.arch;
  check_context(arch, tokens.size());
  const double* w = p.values.data();
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const int d = arch.d_model;
  const int heads = arch.n_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat x(n, d);
  {
    auto te = mat(w, s.tok);
    auto pe = mat(w, s.pos);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (tokens[i] < 0 || tokens[i] >= arch.vocab_size) throw FormatError("token outside the vocabulary");
      x.row(i) = te.row(tokens[i]) + pe.row(i);
    }
  }

  if (tape) {
    tape->tokens.assign(tokens.begin(), tokens.end());
    tape->layers.assign(s.layers.size(), {});
  }
  LayerTape local;
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const auto& L = s.layers[l];
    LayerTape& c = tape ? tape->layers[l] : local;
    c.x_in = x;
    layernorm(x, row(w, L.ln1_g), row(w, L.ln1_b), c.a, c.xhat1, c.rstd1);
    c.q = c.a * mat(w, L.wq);
    c.q.rowwise() += row(w, L.bq);
    c.k = c.a * mat(w, L.wk);
    c.k.rowwise() += row(w, L.bk);
    c.v = c.a * mat(w, L.wv);
    c.v.rowwise() += row(w, L.bv);
    c.attn.resize(n, d);
    c.probs.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Mat& P = c.probs[h];
      P.noalias() = c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose();
      for (Eigen::Index i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, P(i, j) * scale);
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          P(i, j) = std::exp(P(i, j) * scale - mx);
          sum += P(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < n; ++j) P(i, j) = 0.0;
      }
      c.attn.middleCols(h * dh, dh).noalias() = P * c.v.middleCols(h * dh, dh);
    }
    x.noalias() += c.attn * mat(w, L.wo);
    x.rowwise() += row(w, L.bo);
    c.x_mid = x;
    layernorm(x, row(w, L.ln2_g), row(w, L.ln2_b), c.m, c.xhat2, c.rstd2);
    c.u = c.m * mat(w, L.w1);
    c.u.rowwise() += row(w, L.b1);
    c.g = c.u.unaryExpr(&gelu);
    x.noalias() += c.g * mat(w, L.w2);
    x.rowwise() += row(w, L.b2);
  }

  Mat hf, xhat_f;
  Vec rstd_f;
  layernorm(x, row(w, s.lnf_g), row(w, s.lnf_b), hf, xhat_f, rstd_f);
  ForwardOutput out;
  out.logits = hf * mat(w, s.head_w);
  out.logits.rowwise() += row(w, s.head_b);
  if (s.value_w) {
    out.values = hf * row(w, s.value_w).transpose();
    out.values.array() += w[s.value_b->offset];
  }
  if (tape) {
    tape->hf = std::move(hf);
    tape->xhat_f = std::move(xhat_f);
    tape->rstd_f = std::move(rstd_f);
  }
  return out;
}

void backward_impl(const PolicyParams& p, const Slots& s, const Tape& tape, const OutputAdjoint& adj, double* gbase) {
  const double* w = p.values.data();
  const auto n = static_cast<Eigen::Index>(tape.tokens.size());
  if (n == 0) return;
  const int d = p.arch.d_model;
  const int heads = p.arch.n_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat dhf = Mat::Zero(n, d);
  if (adj.dlogits.size() > 0) {
    if (adj.dlogits.rows() != n || adj.dlogits.cols() != p.arch.vocab_size)
      throw AlignmentError("logit adjoint has the wrong shape");
    dhf.noalias() += adj.dlogits * mat(w, s.head_w).transpose();
    mat(gbase, s.head_w).noalias() += tape.hf.transpose() * adj.dlogits;
    row(gbase, s.head_b) += adj.dlogits.colwise().sum();
  }
  if (adj.dvalues.size() > 0) {
    if (!s.value_w) throw AlignmentError("value adjoint given but the policy has no value head");
    if (adj.dvalues.size() != n) throw AlignmentError("value adjoint has the wrong length");
    dhf.noalias() += adj.dvalues * row(w, s.value_w);
    row(gbase, s.value_w) += adj.dvalues.transpose() * tape.hf;
    gbase[s.value_b->offset] += adj.dvalues.sum();
  }

  Mat dx = Mat::Zero(n, d);
  layernorm_backward(dhf, tape.xhat_f, tape.rstd_f, row(w, s.lnf_g), dx, row(gbase, s.lnf_g), row(gbase, s.lnf_b));

  for (std::size_t li = s.layers.size(); li-- > 0;) {
    const auto& L = s.layers[li];
    const LayerTape& c = tape.layers[li];

    // MLP branch: x_out = x_mid + gelu(LN2(x_mid) W1 + b1) W2 + b2
    mat(gbase, L.w2).noalias() += c.g.transpose() * dx;
    row(gbase, L.b2) += dx.colwise().sum();
    Mat du = (dx * mat(w, L.w2).transpose()).cwiseProduct(c.u.unaryExpr(&gelu_grad));
    mat(gbase, L.w1).noalias() += c.m.transpose() * du;
    row(gbase, L.b1) += du.colwise().sum();
    Mat dm = du * mat(w, L.w1).transpose();
    layernorm_backward(dm, c.xhat2, c.rstd2, row(w, L.ln2_g), dx, row(gbase, L.ln2_g), row(gbase, L.ln2_b));

    // Attention branch: x_mid = x_in + attn Wo + bo
    mat(gbase, L.wo).noalias() += c.attn.transpose() * dx;
    row(gbase, L.bo) += dx.colwise().sum();
    Mat dattn = dx * mat(w, L.wo).transpose();
    Mat dq(n, d), dk(n, d), dv(n, d);
    for (int h = 0; h < heads; ++h) {
      const Mat& P = c.probs[h];
      const auto dO = dattn.middleCols(h * dh, dh);
      Mat dP = dO * c.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = P.transpose() * dO;
      Mat dS = Mat::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        double dot = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) dot += P(i, j) * dP(i, j);
        for (Eigen::Index j = 0; j <= i; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * scale;
      }
      dq.middleCols(h * dh, dh).noalias() = dS * c.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = dS.transpose() * c.q.middleCols(h * dh, dh);
    }
    mat(gbase, L.wq).noalias() += c.a.transpose() * dq;
    row(gbase, L.bq) += dq.colwise().sum();
    mat(gbase, L.wk).noalias() += c.a.transpose() * dk;
    row(gbase, L.bk) += dk.colwise().sum();
    mat(gbase, L.wv).noalias() += c.a.transpose() * dv;
    row(gbase, L.bv) += dv.colwise().sum();
    Mat da = dq * mat(w, L.wq).transpose();
    da.noalias() += dk * mat(w, L.wk).transpose();
    da.noalias() += dv * mat(w, L.wv).transpose();
    layernorm_backward(da, c.xhat1, c.rstd1, row(w, L.ln1_g), dx, row(gbase, L.ln1_g), row(gbase, L.ln1_b));
  }

  auto gte = mat(gbase, s.tok);
  auto gpe = mat(gbase, s.pos);
  for (Eigen::Index i = 0; i < n; ++i) {
    gte.row(tape.tokens[i]) += dx.row(i);
    gpe.row(i) += dx.row(i);
  }
}

}  // namespace

// --------------------------------------------------------------- manifest --

void PolicyArch::validate() const {
  if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (n_layers < 0) throw ConfigError("n_layers must be non-negative");
  if (context_window < 1) throw ConfigError("context_window must be positive");
  if (mlp_mult < 1) throw ConfigError("mlp_mult must be positive");
}

std::size_t ParamSlot::size() const {
  std::size_t s = 1;
  for (int x : shape) s *= static_cast<std::size_t>(x);
  return s;
}

Manifest Manifest::build(const PolicyArch& arch) {
  arch.validate();
  Manifest m;
  auto add = [&](std::string name, std::vector<int> shape) {
    ParamSlot s{std::move(name), m.total_, std::move(shape)};
    m.total_ += s.size();
    m.slots_.push_back(std::move(s));
  };
  const int d = arch.d_model, v = arch.vocab_size, f = arch.mlp_mult * arch.d_model;
  add("tok_emb", {v, d});
  add("pos_emb", {arch.context_window, d});
  for (int l = 0; l < arch.n_layers; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    add(b + "ln1.g", {1, d});
    add(b + "ln1.b", {1, d});
    for (const char* x : {"q", "k", "v", "o"}) {
      add(b + "attn.w" + x, {d, d});
      add(b + "attn.b" + x, {1, d});
    }
    add(b + "ln2.g", {1, d});
    add(b + "ln2.b", {1, d});
    add(b + "mlp.w1", {d, f});
    add(b + "mlp.b1", {1, f});
    add(b + "mlp.w2", {f, d});
    add(b + "mlp.b2", {1, d});
  }
  add("lnf.g", {1, d});
  add("lnf.b", {1, d});
  add("head.w", {d, v});
  add("head.b", {1, v});
  if (arch.value_head) {
    add("value.w", {1, d});
    add("value.b", {1, 1});
  }
  return m;
}

const ParamSlot& Manifest::at(const std::string& name) const {
  for (const auto& s : slots_)
    if (s.name == name) return s;
  throw Error("no parameter named '" + name + "'");
}

const ParamSlot& Manifest::slot_of(std::size_t index) const {
  for (const auto& s : slots_)
    if (index >= s.offset && index < s.offset + s.size()) return s;
  throw Error("parameter index out of range");
}

bool Manifest::operator==(const Manifest& o) const {
  if (total_ != o.total_ || slots_.size() != o.slots_.size()) return false;
  for (std::size_t i = 0; i < slots_.size(); ++i)
    if (slots_[i].name != o.slots_[i].name || slots_[i].offset != o.slots_[i].offset ||
        slots_[i].shape != o.slots_[i].shape)
      return false;
  return true;
}

PolicyParams PolicyParams::zeros(const PolicyArch& arch) {
  PolicyParams p;
  p.arch = arch;
  p.manifest = std::make_shared<const Manifest>(Manifest::build(arch));
  p.values.assign(p.manifest->total(), 0.0);
  return p;
}

PolicyParams PolicyParams::init(const PolicyArch& arch, RngStream rng) {
  PolicyParams p = zeros(arch);
  for (const auto& s : p.manifest->slots()) {
    auto v = p.view(s.name);
    const auto& n = s.name;
    const bool gain = n.ends_with(".g");
    const bool bias = n.ends_with(".b") || n.ends_with(".bq") || n.ends_with(".bk") || n.ends_with(".bv") ||
                      n.ends_with(".bo") || n.ends_with(".b1") || n.ends_with(".b2");
    for (double& x : v) {
      if (n.starts_with("value.") || bias) x = 0.0;
      else if (gain) x = 1.0;
      else x = 0.02 * rng.normal();
    }
  }
  return p;
}

std::span<double> PolicyParams::view(const std::string& name) {
  const auto& s = manifest->at(name);
  return {values.data() + s.offset, s.size()};
}

std::span<const double> PolicyParams::view(const std::string& name) const {
  const auto& s = manifest->at(name);
  return {values.data() + s.offset, s.size()};
}

PolicyParams freeze_reference(const PolicyParams& params) {
  for (std::size_t i = 0; i < params.values.size(); ++i)
    if (!std::isfinite(params.values[i]))
      throw NumericalError("cannot freeze non-finite parameters", params.manifest->slot_of(i).name);
  PolicyParams ref = params;
  ref.role = ParamRole::Reference;
  return ref;
}

// ---------------------------------------------------------------- forward --

ForwardOutput forward(const PolicyParams& params, std::span<const Token> context) {
  return forward_impl(params, resolve(params), context, nullptr);
}

struct Decoder::Impl {
  const PolicyParams* params;
  Slots slots;
  std::vector<Mat> keys, vals;
  std::size_t len = 0;
  RowVec logits;
  double value = 0.0;
};

Decoder::Decoder(const PolicyParams& params) : impl_(std::make_unique<Impl>()) {
  impl_->params = &params;
  impl_->slots = resolve(params);
  const auto& a = params.arch;
  impl_->keys.assign(static_cast<std::size_t>(a.n_layers), Mat(a.context_window, a.d_model));
  impl_->vals.assign(static_cast<std::size_t>(a.n_layers), Mat(a.context_window, a.d_model));
}

Decoder::~Decoder() = default;
Decoder::Decoder(Decoder&&) noexcept = default;
Decoder& Decoder::operator=(Decoder&&) noexcept = default;

void Decoder::feed(Token t) {
  Impl& I = *impl_;
  const PolicyParams& p = *I.params;
  const auto& arch = p.arch;
  check_context(arch, I.len + 1);
  if (t < 0 || t >= arch.vocab_size) throw FormatError("token outside the vocabulary");
  const double* w = p.values.data();
  const Slots& s = I.slots;
  const int d = arch.d_model, heads = arch.n_heads, dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto pos = static_cast<Eigen::Index>(I.len);

  RowVec x = mat(w, s.tok).row(t) + mat(w, s.pos).row(pos);
  RowVec a, o(d), m, u;
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const auto& L = s.layers[l];
    layernorm_row(x, row(w, L.ln1_g), row(w, L.ln1_b), a, nullptr, nullptr);
    const RowVec q = a * mat(w, L.wq) + row(w, L.bq);
    I.keys[l].row(pos) = a * mat(w, L.wk) + row(w, L.bk);
    I.vals[l].row(pos) = a * mat(w, L.wv) + row(w, L.bv);
    for (int h = 0; h < heads; ++h) {
      Vec sc = I.keys[l].block(0, h * dh, pos + 1, dh) * q.segment(h * dh, dh).transpose();
      sc *= scale;
      const double mx = sc.maxCoeff();
      sc = (sc.array() - mx).exp();
      sc /= sc.sum();
      o.segment(h * dh, dh) = sc.transpose() * I.vals[l].block(0, h * dh, pos + 1, dh);
    }
    x += o * mat(w, L.wo) + row(w, L.bo);
    layernorm_row(x, row(w, L.ln2_g), row(w, L.ln2_b), m, nullptr, nullptr);
    u = m * mat(w, L.w1) + row(w, L.b1);
    x += u.unaryExpr(&gelu) * mat(w, L.w2) + row(w, L.b2);
  }
  RowVec hf;
  layernorm_row(x, row(w, s.lnf_g), row(w, s.lnf_b), hf, nullptr, nullptr);
  I.logits = hf * mat(w, s.head_w) + row(w, s.head_b);
  I.value = s.value_w ? hf.dot(row(w, s.value_w)) + w[s.value_b->offset] : 0.0;
  ++I.len;
}

std::span<const double> Decoder::logits() const {
  return {impl_->logits.data(), static_cast<std::size_t>(impl_->logits.size())};
}
double Decoder::value() const { return impl_->value; }
std::size_t Decoder::length() const { return impl_->len; }

// --------------------------------------------------------------- sampling --

SampledResponse sample_response(Decoder& policy, Decoder* reference, double temperature, RngStream& rng,
                                int max_tokens) {
  if (temperature < 0.0 || !std::isfinite(temperature)) throw ConfigError("temperature must be non-negative");
  if (policy.length() == 0) throw ConfigError("sampling needs a non-empty prompt");
  SampledResponse out;
  TokenSeq tokens;
  std::vector<double> scaled;
  for (int k = 0; k < max_tokens; ++k) {
    const auto logits = policy.logits();
    const double lse = log_sum_exp(logits);
    Token pick = 0;
    if (temperature == 0.0) {
      pick = static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      scaled.assign(logits.begin(), logits.end());
      for (double& z : scaled) z /= temperature;
      const double slse = log_sum_exp(scaled);
      const double u = rng.uniform();
      double acc = 0.0;
      pick = static_cast<Token>(scaled.size() - 1);
      for (std::size_t i = 0; i < scaled.size(); ++i) {
        acc += std::exp(scaled[i] - slse);
        if (u < acc) {
          pick = static_cast<Token>(i);
          break;
        }
      }
    }
    tokens.push_back(pick);
    out.logp.push_back(logits[static_cast<std::size_t>(pick)] - lse);
    out.values.push_back(policy.value());
    if (reference) {
      const auto rl = reference->logits();
      const double rlse = log_sum_exp(rl);
      out.ref_lse.push_back(rlse);
      out.ref_logp.push_back(rl[static_cast<std::size_t>(pick)] - rlse);
      out.ref_entropy.push_back(softmax_entropy(rl));
    }
    policy.feed(pick);
    if (reference) reference->feed(pick);
    if (pick == tok::kAnswerClose) break;
  }
  out.response = parse_response(tokens);
  return out;
}

SampledResponse sample_response(const PolicyParams& params, std::span<const Token> prompt, double temperature,
                                RngStream& rng, int max_tokens) {
  Decoder dec(params);
  dec.feed(prompt);
  return sample_response(dec, nullptr, temperature, rng, max_tokens);
}

LogProbValue logprob_and_value(const PolicyParams& params, const Trajectory& traj) {
  const auto layout = context_layout(traj);
  const auto out = forward(params, layout.tokens);
  LogProbValue r;
  for (std::size_t pos : layout.response_positions) {
    const auto i = static_cast<Eigen::Index>(pos - 1);
    const double* rowp = out.logits.row(i).data();
    const double lse = log_sum_exp(std::span<const double>(rowp, static_cast<std::size_t>(out.logits.cols())));
    r.logp.push_back(out.logits(i, layout.tokens[pos]) - lse);
    r.value.push_back(out.values.size() ? out.values(i) : 0.0);
  }
  return r;
}

// --------------------------------------------------------------- gradient --

int default_threads() {
  if (const char* e = std::getenv("ACTFOCUS_THREADS")) {
    const int n = std::atoi(e);
    if (n > 0) return n;
  }
  return 1;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::mutex error_mu;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < std::min(workers, n); ++t)
      pool.emplace_back([&] {
        for (std::size_t i; !failed && (i = next++) < n;) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!error) error = std::current_exception();
            failed = true;
          }
        }
      });
  }
  if (error) std::rethrow_exception(error);
}

GradResult grad(const PolicyParams& params, std::span<const TokenSeq> sequences, const LossClosure& closure,
                int threads) {
  const Slots s = resolve(params);
  const std::size_t n = sequences.size();
  std::vector<Tape> tapes(n);
  std::vector<ForwardOutput> outs(n);
  parallel_for(n, threads, [&](std::size_t i) { outs[i] = forward_impl(params, s, sequences[i], &tapes[i]); });

  std::vector<OutputAdjoint> adjoints(n);
  GradResult r;
  r.loss = closure(outs, adjoints);
  r.grad.assign(params.size(), 0.0);

  auto accumulate = [&](const std::vector<double>& g) {
    for (std::size_t k = 0; k < g.size(); ++k) r.grad[k] += g[k];
  };
  if (threads <= 1) {
    std::vector<double> scratch(params.size());
    for (std::size_t i = 0; i < n; ++i) {
      std::fill(scratch.begin(), scratch.end(), 0.0);
      backward_impl(params, s, tapes[i], adjoints[i], scratch.data());
      accumulate(scratch);
    }
  } else {
    std::vector<std::vector<double>> per(n);
    parallel_for(n, threads, [&](std::size_t i) {
      per[i].assign(params.size(), 0.0);
      backward_impl(params, s, tapes[i], adjoints[i], per[i].data());
    });
    for (const auto& g : per) accumulate(g);
  }

  for (std::size_t k = 0; k < r.grad.size(); ++k)
    if (!std::isfinite(r.grad[k])) throw NumericalError("non-finite gradient", params.manifest->slot_of(k).name);
  return r;
}

}  // namespace actfocus

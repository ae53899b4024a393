#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "actfocus/rng.hpp"
#include "actfocus/trajectory.hpp"
#include "actfocus/vocab.hpp"

namespace actfocus {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

/// Causal self-attention transformer shape.
struct PolicyArch {
  int vocab_size = 62;
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int context_window = 512;
  bool value_head = true;
  int mlp_mult = 4;

  void validate() const;
  bool operator==(const PolicyArch&) const = default;
};

struct ParamSlot {
  std::string name;
  std::size_t offset = 0;
  std::vector<int> shape;
  std::size_t size() const;
};

/// Name -> (offset, shape) map whose slots tile the flat vector exactly.
/// Value-head slots carry the "value." prefix.
class Manifest {
 public:
  static Manifest build(const PolicyArch& arch);

  const std::vector<ParamSlot>& slots() const { return slots_; }
  const ParamSlot& at(const std::string& name) const;
  const ParamSlot& slot_of(std::size_t index) const;
  std::size_t total() const { return total_; }
  bool operator==(const Manifest& o) const;

 private:
  std::vector<ParamSlot> slots_;
  std::size_t total_ = 0;
};

enum class ParamRole { Theta, Old, Reference };

struct PolicyParams {
  PolicyArch arch;
  std::shared_ptr<const Manifest> manifest;
  std::vector<double> values;
  ParamRole role = ParamRole::Theta;

  static PolicyParams zeros(const PolicyArch& arch);
  /// N(0, 0.02) weights, unit LayerNorm gains, zero biases and value head.
  static PolicyParams init(const PolicyArch& arch, RngStream rng);

  std::span<double> view(const std::string& name);
  std::span<const double> view(const std::string& name) const;
  std::size_t size() const { return values.size(); }
};

/// Deep copy tagged as the frozen reference.
PolicyParams freeze_reference(const PolicyParams& params);

/// logits.row(i) holds the next-token logits after reading tokens[0..i], so
/// it depends on tokens at positions <= i only. values(i) is the critic value
/// of the same context (empty without a value head).
struct ForwardOutput {
  Mat logits;
  Vec values;
};

/// Throws ContextOverflowError when the context exceeds the window.
ForwardOutput forward(const PolicyParams& params, std::span<const Token> context);

/// Incremental decoder with cached keys/values; produces the same numbers as
/// forward() up to floating-point reassociation.
class Decoder {
 public:
  explicit Decoder(const PolicyParams& params);
  ~Decoder();
  Decoder(Decoder&&) noexcept;
  Decoder& operator=(Decoder&&) noexcept;

  /// Appends one token; logits()/value() then describe the next position.
  void feed(Token t);
  void feed(std::span<const Token> ts) {
    for (Token t : ts) feed(t);
  }
  std::span<const double> logits() const;
  double value() const;
  std::size_t length() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct SampledResponse {
  Response response;
  std::vector<double> logp;  // untempered log-probabilities of the sampled tokens
  std::vector<double> values;
  std::vector<double> ref_logp;
  std::vector<double> ref_lse;
  std::vector<double> ref_entropy;
};

/// Samples until `</answer>` or max_tokens. temperature == 0 selects argmax
/// decoding. When `reference` is given it is fed the same tokens and its
/// statistics are recorded alongside.
SampledResponse sample_response(Decoder& policy, Decoder* reference, double temperature, RngStream& rng,
                                int max_tokens);

/// Convenience form: builds a decoder and feeds the prompt first.
SampledResponse sample_response(const PolicyParams& params, std::span<const Token> prompt, double temperature,
                                RngStream& rng, int max_tokens);

struct LogProbValue {
  std::vector<double> logp;
  std::vector<double> value;
};

/// Per-response-token log-probabilities and values under `params`.
LogProbValue logprob_and_value(const PolicyParams& params, const Trajectory& traj);

/// Adjoint of one ForwardOutput. Empty members mean zero.
struct OutputAdjoint {
  Mat dlogits;
  Vec dvalues;
};

/// Receives the forward outputs of every sequence, writes dLoss/dOutput into
/// the adjoints and returns the scalar loss.
using LossClosure = std::function<double(std::span<const ForwardOutput>, std::span<OutputAdjoint>)>;

struct GradResult {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Exact reverse-mode gradient of closure(forward(params, seq) for seq in
/// sequences). Per-sequence gradients are reduced in index order, so the
/// result does not depend on `threads`. Throws NumericalError naming the
/// first parameter with a non-finite gradient.
GradResult grad(const PolicyParams& params, std::span<const TokenSeq> sequences, const LossClosure& closure,
                int threads = 1);

/// Worker count from ACTFOCUS_THREADS (default 1).
int default_threads();

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace actfocus

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vnmt/flows.hpp"
#include "vnmt/gaussian.hpp"
#include "vnmt/ops.hpp"
#include "vnmt/rng.hpp"
#include "vnmt/tensor.hpp"

namespace vnmt {

/// none: plain Transformer. static_mean: Z = meanpool(source embeddings), no sampling.
/// variational: Z drawn from an amortized posterior, optionally refined by K flows.
enum class LatentMode { none, static_mean, variational };

enum class Conditioning { source_only, source_and_target };

std::string to_string(LatentMode mode);
LatentMode parse_latent_mode(const std::string& name);
std::string to_string(Conditioning mode);
Conditioning parse_conditioning(const std::string& name);

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t n_layers_enc = 2;
  std::size_t n_layers_dec = 2;
  std::size_t d_ffn = 128;
  LatentMode latent = LatentMode::variational;
  std::size_t latent_dim = 16;
  FlowKind flow_kind = FlowKind::planar;
  std::size_t flow_count = 0;
  std::size_t ortho_columns = 8;
  Conditioning conditioning = Conditioning::source_only;

  /// Throws std::invalid_argument naming the first violated rule.
  void validate() const;
  /// Dimension of the code fed to the gate before projection.
  std::size_t code_dim() const;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct EncoderState {
  Tensor states;              // [T_src x d_model]
  std::vector<bool> valid;    // false at PAD positions
};

struct ConditioningInputs {
  Tensor pooled_src;  // [d_model]
  Tensor pooled_tgt;  // [d_model], required under source_and_target
};

/// Base Gaussian plus its flow stack. Coupling steps carry their amortized context and see the
/// running z when applied.
struct Posterior {
  DiagGaussian base;
  FlowStack flows;
  Conditioning conditioning = Conditioning::source_only;
};

struct GateTrace {
  Tensor gate;             // [T x d_model], every entry in (0, 1)
  double mean_gate = 0.0;  // mean over all entries
};

struct InjectResult {
  Tensor hidden;  // same shape as the input states
  Tensor gate;
};

/// Arithmetic mean of the rows of `rows` whose `valid` flag is set (all rows when empty).
Tensor mean_pool(const Tensor& rows, const std::vector<bool>& valid = {});

/// (1 - gate) * h + gate * z_proj with z_proj broadcast over rows when h is a matrix.
Tensor gated_mix(const Tensor& h, const Tensor& z_proj, const Tensor& gate);

struct GateParams {
  Tensor w_h;  // [d x d]
  Tensor w_z;  // [d x d]
  Tensor b;    // [d]
};

/// gate = sigmoid(h W_h + z_proj W_z + b); returns the mix and the gate.
InjectResult inject_latent(const Tensor& h, const Tensor& z_proj, const GateParams& p);

struct Hypothesis {
  std::vector<int> tokens;  // excludes BOS; ends with EOS unless truncated
  double log_prob = 0.0;
  double score = 0.0;       // log_prob / tokens.size()
  bool truncated = false;
};

class Model {
 public:
  /// Parameters are drawn from Rng::stream(seed, "init").
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  /// Throws std::out_of_range for an unknown name.
  const Tensor& param(const std::string& name) const;
  bool has_param(const std::string& name) const;

  /// Raw token embeddings of `ids` (no positional signal), [T x d_model].
  Tensor token_embeddings(std::span<const int> ids) const;
  /// meanpool over non-PAD token embeddings.
  Tensor pooled_embedding(std::span<const int> ids) const;

  EncoderState encode(std::span<const int> src) const;
  /// Final decoder states for every input position, [T x d_model]. `code` is the latent code
  /// before projection (undefined for LatentMode::none); injection happens after the last layer.
  Tensor decode(const EncoderState& enc, std::span<const int> inputs, const Tensor& code,
                GateTrace* trace = nullptr) const;
  /// Row-wise log-probabilities over the vocabulary, [T x V].
  Tensor output_log_probs(const Tensor& states) const;

  DiagGaussian condition_prior(const Tensor& pooled_src) const;
  /// source_only ignores pooled_tgt; source_and_target throws without it.
  Posterior condition_posterior(const ConditioningInputs& inputs) const;
  /// Flows applied to the base mean with no noise. Throws if the posterior conditions on the target.
  Tensor posterior_mean_latent(const Posterior& posterior) const;
  LatentDraw sample_posterior(const Posterior& posterior, Rng& rng) const;

  /// Code projected to d_model (identity when code_dim() == d_model).
  Tensor project_code(const Tensor& code) const;
  GateParams gate_params() const;

  /// Code used at prediction time: posterior mean under source_only, prior mean under
  /// source_and_target, meanpool(x) for static_mean, undefined for none.
  Tensor prediction_code(std::span<const int> src) const;

  /// Sum of log p(tgt | src, code) under teacher forcing; tgt ends with EOS.
  Tensor sequence_log_prob(std::span<const int> src, std::span<const int> tgt, const Tensor& code) const;

 private:
  void add(const std::string& name, Tensor value);
  Tensor linear(const Tensor& x, const std::string& prefix) const;
  Tensor encoder_layer(const Tensor& x, std::size_t layer, const std::vector<bool>& valid) const;
  Tensor decoder_layer(const Tensor& x, std::size_t layer, const EncoderState& enc) const;
  Tensor attention_block(const Tensor& q_in, const Tensor& kv_in, const std::string& prefix,
                         const ops::AttentionMask& mask) const;
  Tensor feed_forward(const Tensor& x, const std::string& prefix) const;
  Tensor embed_with_positions(std::span<const int> ids) const;
  std::size_t flow_param_count() const;
  std::size_t conditioning_dim() const;

  ModelConfig config_;
  std::vector<NamedTensor> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Length-normalized beam search with a code fixed per sentence. The greedy hypothesis always
/// competes for the final choice, so a wider beam never returns a lower score than beam = 1.
Hypothesis beam_search(const Model& model, std::span<const int> src, const Tensor& code, std::size_t beam,
                       std::size_t max_len);

/// beam_search with the model's prediction_code.
Hypothesis translate(const Model& model, std::span<const int> src, std::size_t beam, std::size_t max_len);

}  // namespace vnmt

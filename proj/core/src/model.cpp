#include "vnmt/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "vnmt/tokens.hpp"

namespace vnmt {

namespace {

[[noreturn]] void invalid(const std::string& what) { throw std::invalid_argument("ModelConfig: " + what); }

Tensor sinusoid_positions(std::size_t length, std::size_t d) {
  std::vector<double> pe(length * d);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      pe[pos * d + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::matrix(length, d, std::move(pe));
}

Tensor random_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor as_matrix(const Tensor& t) { return t.rank() == 2 ? t : ops::reshape(t, {1, t.numel()}); }

}  // namespace

std::string to_string(LatentMode mode) {
  switch (mode) {
    case LatentMode::none: return "none";
    case LatentMode::static_mean: return "static";
    case LatentMode::variational: return "variational";
  }
  return "?";
}

LatentMode parse_latent_mode(const std::string& name) {
  if (name == "none") return LatentMode::none;
  if (name == "static") return LatentMode::static_mean;
  if (name == "variational") return LatentMode::variational;
  throw std::invalid_argument("unknown latent mode '" + name + "' (expected none, static or variational)");
}

std::string to_string(Conditioning mode) {
  return mode == Conditioning::source_only ? "source_only" : "source_and_target";
}

Conditioning parse_conditioning(const std::string& name) {
  if (name == "source_only") return Conditioning::source_only;
  if (name == "source_and_target") return Conditioning::source_and_target;
  throw std::invalid_argument("unknown posterior conditioning '" + name +
                              "' (expected source_only or source_and_target)");
}

void ModelConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kFirstContentId)) invalid("vocab_size must exceed the reserved ids");
  if (d_model == 0 || n_heads == 0) invalid("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) invalid("d_model must be divisible by n_heads");
  if (n_layers_enc == 0 || n_layers_dec == 0) invalid("at least one encoder and one decoder layer");
  if (d_ffn == 0) invalid("d_ffn must be positive");
  if (latent != LatentMode::variational) return;
  if (latent_dim == 0) invalid("latent_dim must be positive");
  if (flow_count == 0) return;
  if (flow_kind == FlowKind::coupling && latent_dim % 2 != 0) invalid("coupling flows need an even latent_dim");
  if (flow_kind == FlowKind::sylvester && (ortho_columns == 0 || ortho_columns > latent_dim)) {
    invalid("sylvester flows need 1 <= ortho_columns <= latent_dim");
  }
}

std::size_t ModelConfig::code_dim() const {
  switch (latent) {
    case LatentMode::none: return 0;
    case LatentMode::static_mean: return d_model;
    case LatentMode::variational: return latent_dim;
  }
  return 0;
}

Tensor mean_pool(const Tensor& rows, const std::vector<bool>& valid) {
  if (rows.rank() != 2) throw ShapeError("mean_pool: expected a matrix, got " + shape_str(rows.shape()));
  const auto t = rows.rows();
  if (!valid.empty() && valid.size() != t) {
    throw ShapeError("mean_pool: mask of " + std::to_string(valid.size()) + " flags for " + shape_str(rows.shape()));
  }
  std::vector<double> weights(t, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < t; ++i) {
    if (valid.empty() || valid[i]) {
      weights[i] = 1.0;
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("mean_pool: every position is masked");
  for (auto& w : weights) w /= static_cast<double>(count);
  return ops::vecmat(Tensor::vector(std::move(weights)), rows);
}

Tensor gated_mix(const Tensor& h, const Tensor& z_proj, const Tensor& gate) {
  if (gate.shape() != h.shape()) throw ShapeError("gated_mix(h, gate)", h.shape(), gate.shape());
  const Tensor z = h.rank() == 2 ? ops::broadcast_rows(z_proj, h.rows()) : z_proj;
  if (z.shape() != h.shape()) throw ShapeError("gated_mix(h, z)", h.shape(), z_proj.shape());
  // h + g (z - h) is exact at g = 0 and at z = h.
  return ops::add(h, ops::mul(gate, ops::sub(z, h)));
}

InjectResult inject_latent(const Tensor& h, const Tensor& z_proj, const GateParams& p) {
  const Tensor hm = as_matrix(h);
  const Tensor from_z = ops::add(ops::vecmat(z_proj, p.w_z), p.b);
  Tensor gate = ops::sigmoid(ops::add_row(ops::matmul(hm, p.w_h), from_z));
  if (h.rank() != 2) gate = ops::reshape(gate, h.shape());
  return {gated_mix(h, z_proj, gate), gate};
}

// ---------------------------------------------------------------------------------------------

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng = Rng::stream(seed, "init");
  const auto d = config_.d_model, v = config_.vocab_size, f = config_.d_ffn;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));

  add("embed", random_normal({v, d}, sd, rng));
  const auto add_attention = [&](const std::string& prefix) {
    for (const char* w : {".wq", ".wk", ".wv", ".wo"}) add(prefix + w, random_normal({d, d}, sd, rng));
  };
  const auto add_norm = [&](const std::string& prefix) {
    add(prefix + ".g", Tensor::full({d}, 1.0, true));
    add(prefix + ".b", Tensor::zeros({d}, true));
  };
  const auto add_ffn = [&](const std::string& prefix) {
    add(prefix + ".w1", random_normal({d, f}, sd, rng));
    add(prefix + ".b1", Tensor::zeros({f}, true));
    add(prefix + ".w2", random_normal({f, d}, 1.0 / std::sqrt(static_cast<double>(f)), rng));
    add(prefix + ".b2", Tensor::zeros({d}, true));
  };
  for (std::size_t l = 0; l < config_.n_layers_enc; ++l) {
    const auto p = "enc" + std::to_string(l);
    add_attention(p + ".self");
    add_norm(p + ".ln1");
    add_ffn(p + ".ffn");
    add_norm(p + ".ln2");
  }
  for (std::size_t l = 0; l < config_.n_layers_dec; ++l) {
    const auto p = "dec" + std::to_string(l);
    add_attention(p + ".self");
    add_norm(p + ".ln1");
    add_attention(p + ".cross");
    add_norm(p + ".ln2");
    add_ffn(p + ".ffn");
    add_norm(p + ".ln3");
  }
  add("out.w", random_normal({d, v}, sd, rng));
  add("out.b", Tensor::zeros({v}, true));

  if (config_.latent == LatentMode::none) return;
  add("gate.wh", random_normal({d, d}, sd, rng));
  add("gate.wz", random_normal({d, d}, sd, rng));
  add("gate.b", Tensor::zeros({d}, true));
  if (config_.latent == LatentMode::static_mean) return;

  const auto dz = config_.latent_dim;
  if (dz != d) {
    add("latent.proj.w", random_normal({dz, d}, 1.0 / std::sqrt(static_cast<double>(dz)), rng));
    add("latent.proj.b", Tensor::zeros({d}, true));
  }
  // Conditioning maps start close to zero so the prior and posterior begin near N(0, I).
  constexpr double kCondScale = 0.01;
  for (const char* head : {"prior.mu", "prior.lv"}) {
    add(std::string(head) + ".w", random_normal({d, dz}, kCondScale, rng));
    add(std::string(head) + ".b", Tensor::zeros({dz}, true));
  }
  const auto in = conditioning_dim();
  for (const char* head : {"post.mu", "post.lv"}) {
    add(std::string(head) + ".w", random_normal({in, dz}, kCondScale, rng));
    add(std::string(head) + ".b", Tensor::zeros({dz}, true));
  }
  const auto count = flow_param_count();
  for (std::size_t k = 0; k < config_.flow_count; ++k) {
    const auto p = "flow" + std::to_string(k);
    add(p + ".w", random_normal({in, count}, kCondScale, rng));
    std::vector<double> bias(count, 0.0);
    switch (config_.flow_kind) {
      case FlowKind::planar:
        for (std::size_t i = 0; i < 2 * dz; ++i) bias[i] = 0.1 * rng.normal();
        break;
      case FlowKind::sylvester: {
        // Q_raw bias starts at the first M identity columns, which orthonormalization keeps fixed.
        const auto m = config_.ortho_columns;
        for (std::size_t c = 0; c < m; ++c) bias[c * m + c] = 1.0;
        for (std::size_t i = dz * m; i < dz * m + 2 * m * m; ++i) bias[i] = 0.1 * rng.normal();
        break;
      }
      case FlowKind::coupling:
        add(p + ".coupling", random_normal({dz / 2, dz}, kCondScale, rng));
        break;
    }
    add(p + ".b", Tensor::from({count}, std::move(bias), true));
  }
}

void Model::add(const std::string& name, Tensor value) {
  index_.emplace(name, params_.size());
  params_.push_back({name, std::move(value)});
}

const Tensor& Model::param(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("model has no parameter '" + name + "'");
  return params_[it->second].value;
}

bool Model::has_param(const std::string& name) const { return index_.count(name) != 0; }

std::size_t Model::conditioning_dim() const {
  return config_.conditioning == Conditioning::source_only ? config_.d_model : 2 * config_.d_model;
}

std::size_t Model::flow_param_count() const {
  const auto dz = config_.latent_dim, m = config_.ortho_columns;
  switch (config_.flow_kind) {
    case FlowKind::planar: return 2 * dz + 1;
    case FlowKind::sylvester: return dz * m + 2 * m * m + m;
    case FlowKind::coupling: return dz;
  }
  return 0;
}

Tensor Model::linear(const Tensor& x, const std::string& prefix) const {
  return ops::add(ops::vecmat(x, param(prefix + ".w")), param(prefix + ".b"));
}

Tensor Model::token_embeddings(std::span<const int> ids) const { return ops::embedding(param("embed"), ids); }

Tensor Model::pooled_embedding(std::span<const int> ids) const {
  std::vector<bool> valid(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != kPad;
  return mean_pool(token_embeddings(ids), valid);
}

Tensor Model::embed_with_positions(std::span<const int> ids) const {
  const auto d = config_.d_model;
  const Tensor scaled = ops::scale(token_embeddings(ids), std::sqrt(static_cast<double>(d)));
  return ops::add(scaled, sinusoid_positions(ids.size(), d));
}

Tensor Model::attention_block(const Tensor& q_in, const Tensor& kv_in, const std::string& prefix,
                              const ops::AttentionMask& mask) const {
  const Tensor q = ops::matmul(q_in, param(prefix + ".wq"));
  const Tensor k = ops::matmul(kv_in, param(prefix + ".wk"));
  const Tensor v = ops::matmul(kv_in, param(prefix + ".wv"));
  return ops::matmul(ops::attention(q, k, v, config_.n_heads, mask), param(prefix + ".wo"));
}

Tensor Model::feed_forward(const Tensor& x, const std::string& prefix) const {
  const Tensor h = ops::relu(ops::add_row(ops::matmul(x, param(prefix + ".w1")), param(prefix + ".b1")));
  return ops::add_row(ops::matmul(h, param(prefix + ".w2")), param(prefix + ".b2"));
}

namespace {

Tensor norm(const Model& m, const Tensor& x, const std::string& prefix) {
  return ops::layer_norm(x, m.param(prefix + ".g"), m.param(prefix + ".b"));
}

}  // namespace

Tensor Model::encoder_layer(const Tensor& x, std::size_t layer, const std::vector<bool>& valid) const {
  const auto p = "enc" + std::to_string(layer);
  ops::AttentionMask mask{false, valid};
  Tensor h = norm(*this, ops::add(x, attention_block(x, x, p + ".self", mask)), p + ".ln1");
  return norm(*this, ops::add(h, feed_forward(h, p + ".ffn")), p + ".ln2");
}

Tensor Model::decoder_layer(const Tensor& x, std::size_t layer, const EncoderState& enc) const {
  const auto p = "dec" + std::to_string(layer);
  Tensor h = norm(*this, ops::add(x, attention_block(x, x, p + ".self", {true, {}})), p + ".ln1");
  h = norm(*this, ops::add(h, attention_block(h, enc.states, p + ".cross", {false, enc.valid})), p + ".ln2");
  return norm(*this, ops::add(h, feed_forward(h, p + ".ffn")), p + ".ln3");
}

EncoderState Model::encode(std::span<const int> src) const {
  if (src.empty()) throw std::invalid_argument("encode: empty source sequence");
  EncoderState enc;
  enc.valid.resize(src.size());
  bool any_valid = false;
  for (std::size_t i = 0; i < src.size(); ++i) {
    enc.valid[i] = src[i] != kPad;
    any_valid = any_valid || enc.valid[i];
  }
  if (!any_valid) throw std::invalid_argument("encode: source consists only of padding");
  Tensor x = embed_with_positions(src);
  for (std::size_t l = 0; l < config_.n_layers_enc; ++l) x = encoder_layer(x, l, enc.valid);
  enc.states = x;
  return enc;
}

Tensor Model::decode(const EncoderState& enc, std::span<const int> inputs, const Tensor& code,
                     GateTrace* trace) const {
  if (inputs.empty()) throw std::invalid_argument("decode: empty decoder input");
  Tensor x = embed_with_positions(inputs);
  for (std::size_t l = 0; l < config_.n_layers_dec; ++l) x = decoder_layer(x, l, enc);
  if (config_.latent == LatentMode::none) return x;
  if (!code.defined()) throw std::invalid_argument("decode: latent model needs a code");
  auto [mixed, gate] = inject_latent(x, project_code(code), gate_params());
  if (trace != nullptr) {
    trace->gate = gate;
    trace->mean_gate = ops::mean(gate).item();
  }
  return mixed;
}

Tensor Model::output_log_probs(const Tensor& states) const {
  return ops::log_softmax_rows(ops::add_row(ops::matmul(states, param("out.w")), param("out.b")));
}

Tensor Model::project_code(const Tensor& code) const {
  if (code.numel() != config_.code_dim()) {
    throw ShapeError("project_code: expected a code of " + std::to_string(config_.code_dim()) + " values, got " +
                     shape_str(code.shape()));
  }
  if (!has_param("latent.proj.w")) return code;
  return linear(code, "latent.proj");
}

GateParams Model::gate_params() const { return {param("gate.wh"), param("gate.wz"), param("gate.b")}; }

DiagGaussian Model::condition_prior(const Tensor& pooled_src) const {
  return {linear(pooled_src, "prior.mu"), linear(pooled_src, "prior.lv")};
}

Posterior Model::condition_posterior(const ConditioningInputs& inputs) const {
  if (config_.latent != LatentMode::variational) throw std::logic_error("condition_posterior: model has no posterior");
  const bool with_target = config_.conditioning == Conditioning::source_and_target;
  if (with_target && !inputs.pooled_tgt.defined()) {
    throw std::invalid_argument("condition_posterior: source_and_target needs pooled_tgt");
  }
  const Tensor x = with_target ? ops::concat({inputs.pooled_src, inputs.pooled_tgt}) : inputs.pooled_src;
  Posterior post;
  post.conditioning = config_.conditioning;
  post.base = {linear(x, "post.mu"), linear(x, "post.lv")};
  post.flows.kind = config_.flow_kind;
  const auto dz = config_.latent_dim, m = config_.ortho_columns;
  for (std::size_t k = 0; k < config_.flow_count; ++k) {
    const auto prefix = "flow" + std::to_string(k);
    const Tensor p = linear(x, prefix);
    switch (config_.flow_kind) {
      case FlowKind::planar:
        post.flows.steps.emplace_back(
            PlanarParams{ops::slice(p, 0, dz), ops::slice(p, dz, dz), ops::reshape(ops::slice(p, 2 * dz, 1), {})});
        break;
      case FlowKind::sylvester: {
        const Tensor q_raw = ops::reshape(ops::slice(p, 0, dz * m), {dz, m});
        const Tensor r1 = ops::reshape(ops::slice(p, dz * m, m * m), {m, m});
        const Tensor r2 = ops::reshape(ops::slice(p, dz * m + m * m, m * m), {m, m});
        post.flows.steps.emplace_back(make_sylvester_params(q_raw, r1, r2, ops::slice(p, dz * m + 2 * m * m, m)));
        break;
      }
      case FlowKind::coupling:
        post.flows.steps.emplace_back(CouplingStep{param(prefix + ".coupling"), p, parity_for_step(k)});
        break;
    }
  }
  return post;
}

Tensor Model::posterior_mean_latent(const Posterior& posterior) const {
  if (posterior.conditioning == Conditioning::source_and_target) {
    throw std::invalid_argument("posterior_mean_latent: posterior conditions on the target, unknown at prediction");
  }
  return stack_forward(posterior.base.mu, Tensor::scalar(0.0), posterior.flows).zk;
}

LatentDraw Model::sample_posterior(const Posterior& posterior, Rng& rng) const {
  const auto s = gaussian_sample(posterior.base, rng);
  return stack_forward(s.z, s.log_q0, posterior.flows);
}

Tensor Model::prediction_code(std::span<const int> src) const {
  switch (config_.latent) {
    case LatentMode::none: return {};
    case LatentMode::static_mean: return pooled_embedding(src);
    case LatentMode::variational: {
      const Tensor pooled = pooled_embedding(src);
      if (config_.conditioning == Conditioning::source_and_target) return condition_prior(pooled).mu;
      return posterior_mean_latent(condition_posterior({pooled, {}}));
    }
  }
  return {};
}

Tensor Model::sequence_log_prob(std::span<const int> src, std::span<const int> tgt, const Tensor& code) const {
  if (tgt.empty()) throw std::invalid_argument("sequence_log_prob: empty target");
  std::vector<int> inputs{kBos};
  inputs.insert(inputs.end(), tgt.begin(), tgt.end() - 1);
  const Tensor lp = output_log_probs(decode(encode(src), inputs, code));
  return ops::sum(ops::pick(lp, tgt));
}

// ---------------------------------------------------------------------------------------------

namespace {

struct Partial {
  std::vector<int> tokens;
  double log_prob = 0.0;
};

double normalized(const Partial& p) { return p.log_prob / static_cast<double>(p.tokens.size()); }

Hypothesis finish(const Partial& p, bool truncated) { return {p.tokens, p.log_prob, normalized(p), truncated}; }

std::vector<double> next_token_log_probs(const Model& model, const EncoderState& enc, const Partial& p,
                                         const Tensor& code) {
  std::vector<int> inputs{kBos};
  inputs.insert(inputs.end(), p.tokens.begin(), p.tokens.end());
  const Tensor lp = model.output_log_probs(model.decode(enc, inputs, code));
  const auto v = lp.cols();
  const auto all = lp.values();
  return {all.end() - static_cast<std::ptrdiff_t>(v), all.end()};
}

Hypothesis search(const Model& model, const EncoderState& enc, const Tensor& code, std::size_t beam,
                  std::size_t max_len) {
  std::vector<Partial> alive{Partial{}};
  std::vector<Partial> done;
  for (std::size_t t = 0; t < max_len && !alive.empty() && done.size() < beam; ++t) {
    std::vector<Partial> candidates;
    for (const auto& p : alive) {
      const auto lp = next_token_log_probs(model, enc, p, code);
      std::vector<int> order(lp.size());
      std::iota(order.begin(), order.end(), 0);
      const auto keep = std::min(beam, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                        [&](int a, int b) { return lp[a] > lp[b] || (lp[a] == lp[b] && a < b); });
      for (std::size_t i = 0; i < keep; ++i) {
        Partial next = p;
        next.tokens.push_back(order[i]);
        next.log_prob += lp[order[i]];
        candidates.push_back(std::move(next));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Partial& a, const Partial& b) { return a.log_prob > b.log_prob; });
    alive.clear();
    for (std::size_t i = 0; i < std::min(beam, candidates.size()); ++i) {
      (candidates[i].tokens.back() == kEos ? done : alive).push_back(std::move(candidates[i]));
    }
  }
  const auto better = [](const Partial& a, const Partial& b) { return normalized(a) > normalized(b); };
  if (!done.empty()) return finish(*std::min_element(done.begin(), done.end(), better), false);
  return finish(*std::min_element(alive.begin(), alive.end(), better), true);
}

}  // namespace

Hypothesis beam_search(const Model& model, std::span<const int> src, const Tensor& code, std::size_t beam,
                       std::size_t max_len) {
  if (beam == 0) throw std::invalid_argument("beam_search: beam must be at least 1");
  if (max_len == 0) throw std::invalid_argument("beam_search: max_len must be at least 1");
  NoGradGuard no_grad;
  const EncoderState enc = model.encode(src);
  Hypothesis best = search(model, enc, code, beam, max_len);
  if (beam == 1) return best;
  const Hypothesis greedy = search(model, enc, code, 1, max_len);
  const bool prefer_greedy =
      greedy.score > best.score || (greedy.score == best.score && best.truncated && !greedy.truncated);
  return prefer_greedy ? greedy : best;
}

Hypothesis translate(const Model& model, std::span<const int> src, std::size_t beam, std::size_t max_len) {
  NoGradGuard no_grad;
  return beam_search(model, src, model.prediction_code(src), beam, max_len);
}

}  // namespace vnmt

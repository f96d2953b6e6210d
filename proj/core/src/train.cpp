#include "vnmt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "vnmt/objective.hpp"
#include "vnmt/tokens.hpp"

namespace vnmt {

// ---------------------------------------------------------------------------------------------
// Optimizer

Adam::Adam(double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

double Adam::clip_grad_norm(std::span<NamedTensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.value.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (auto& p : params)
      for (double& g : p.value.node_ptr()->grad) g *= factor;
  }
  return norm;
}

void Adam::step(std::span<NamedTensor> params) {
  if (state_.m.size() != params.size()) {
    state_.m.assign(params.size(), {});
    state_.v.assign(params.size(), {});
  }
  ++state_.t;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.t));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto grad = params[i].value.grad();
    if (grad.empty()) continue;
    auto values = params[i].value.mutable_values();
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    if (m.size() != values.size()) {
      m.assign(values.size(), 0.0);
      v.assign(values.size(), 0.0);
    }
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * grad[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * grad[j] * grad[j];
      values[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------------------------
// Metrics

namespace {

std::vector<int> strip_eos(const std::vector<int>& s) {
  if (!s.empty() && s.back() == kEos) return {s.begin(), s.end() - 1};
  return s;
}

std::map<std::vector<int>, std::size_t> ngram_counts(const std::vector<int>& s, std::size_t n) {
  std::map<std::vector<int>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[std::vector<int>(s.begin() + i, s.begin() + i + n)];
  return counts;
}

}  // namespace

EvalMetrics evaluate_hypotheses(const std::vector<std::vector<int>>& hypotheses,
                                const std::vector<std::vector<int>>& references) {
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("evaluate: " + std::to_string(hypotheses.size()) + " hypotheses for " +
                                std::to_string(references.size()) + " references");
  }
  EvalMetrics m;
  if (hypotheses.empty()) return m;
  constexpr std::size_t kMaxOrder = 4;
  std::array<std::size_t, kMaxOrder> matched{}, total{};
  std::size_t hyp_len = 0, ref_len = 0, correct = 0, exact = 0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto hyp = strip_eos(hypotheses[s]);
    const auto ref = strip_eos(references[s]);
    hyp_len += hyp.size();
    ref_len += ref.size();
    if (hyp == ref) ++exact;
    for (std::size_t i = 0; i < std::min(hyp.size(), ref.size()); ++i) correct += hyp[i] == ref[i];
    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
      const auto hc = ngram_counts(hyp, n);
      const auto rc = ngram_counts(ref, n);
      for (const auto& [gram, c] : hc) {
        total[n - 1] += c;
        if (const auto it = rc.find(gram); it != rc.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  m.token_accuracy = ref_len == 0 ? 1.0 : static_cast<double>(correct) / static_cast<double>(ref_len);
  m.exact_match = static_cast<double>(exact) / static_cast<double>(hypotheses.size());
  // Orders with no hypothesis n-grams at all (every sentence shorter than n) are left out of the mean.
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    if (total[n] == 0) continue;
    if (matched[n] == 0) return m;
    log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
    ++orders;
  }
  if (orders == 0 || hyp_len == 0) return m;
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  m.overlap = 100.0 * bp * std::exp(log_sum / static_cast<double>(orders));
  return m;
}

std::string metrics_csv_header() {
  return "step,loss,recon_nll,kl_est,beta_effective,mean_gate,dev_token_accuracy,dev_exact_match,dev_overlap";
}

std::string metrics_csv_row(const MetricsRecord& r) {
  std::ostringstream out;
  out.precision(17);
  out << r.step << ',' << r.loss << ',' << r.recon_nll << ',' << r.kl_est << ',' << r.beta_effective << ','
      << r.mean_gate << ',' << r.dev_token_accuracy << ',' << r.dev_exact_match << ',' << r.dev_overlap;
  return out.str();
}

std::vector<MetricsRecord> load_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != metrics_csv_header()) {
    throw std::runtime_error("metrics file " + path.string() + " lacks the expected header");
  }
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() != 9) throw std::runtime_error("metrics row with " + std::to_string(v.size()) + " columns");
    out.push_back({static_cast<std::size_t>(v[0]), v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]});
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'V', 'N', 'M', 'T', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void pod(const T& v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void u64(std::uint64_t v) { pod(v); }
  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void doubles(std::span<const double> v) {
    u64(v.size());
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}
  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    check();
    return v;
  }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::string str() {
    const auto n = bounded(u64());
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  std::vector<double> doubles() {
    const auto n = bounded(u64());
    std::vector<double> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    check();
    return v;
  }

 private:
  void check() {
    if (!in_) throw CheckpointError("checkpoint is truncated");
  }
  static std::size_t bounded(std::uint64_t n) {
    if (n > (std::uint64_t{1} << 32)) throw CheckpointError("checkpoint field length is implausible");
    return static_cast<std::size_t>(n);
  }
  std::istream& in_;
};

}  // namespace

void save_checkpoint(const TrainingState& state, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    Writer w(out);
    out.write(kMagic, sizeof kMagic);
    w.pod(kCheckpointVersion);
    w.str(serialize_config(state.config));
    w.u64(state.step);
    for (auto s : state.sample_rng) w.u64(s);
    for (auto s : state.batch_rng) w.u64(s);
    w.pod(state.best_overlap);
    w.u64(state.adam.t);
    w.u64(state.params.size());
    for (std::size_t i = 0; i < state.params.size(); ++i) {
      const auto& p = state.params[i];
      w.str(p.name);
      w.u64(p.value.rank());
      for (auto d : p.value.shape()) w.u64(d);
      w.doubles(p.value.values());
      const bool has_moments = i < state.adam.m.size();
      w.doubles(has_moments ? std::span<const double>(state.adam.m[i]) : std::span<const double>{});
      w.doubles(has_moments ? std::span<const double>(state.adam.v[i]) : std::span<const double>{});
    }
    if (!out) throw CheckpointError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainingState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  Reader r(in);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  TrainingState state;
  state.config = parse_config(r.str());
  state.step = r.u64();
  for (auto& s : state.sample_rng) s = r.u64();
  for (auto& s : state.batch_rng) s = r.u64();
  state.best_overlap = r.pod<double>();
  state.adam.t = r.u64();
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor p;
    p.name = r.str();
    const auto rank = r.u64();
    if (rank > 2) throw CheckpointError("parameter " + p.name + " has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.u64()));
    auto values = r.doubles();
    if (values.size() != shape_numel(shape)) throw CheckpointError("parameter " + p.name + " has a bad size");
    p.value = Tensor::from(shape, std::move(values), true);
    state.adam.m.push_back(r.doubles());
    state.adam.v.push_back(r.doubles());
    state.params.push_back(std::move(p));
  }
  return state;
}

Model model_from_checkpoint(const TrainingState& state) {
  Model model(state.config.model, state.config.seed);
  std::map<std::string, const Tensor*> saved;
  for (const auto& p : state.params) saved.emplace(p.name, &p.value);
  for (auto& p : model.parameters()) {
    const auto it = saved.find(p.name);
    if (it == saved.end()) throw CheckpointError("checkpoint lacks parameter " + p.name);
    if (it->second->shape() != p.value.shape()) {
      throw CheckpointError("parameter " + p.name + " has shape " + shape_str(it->second->shape()) + ", model expects " +
                            shape_str(p.value.shape()));
    }
    const auto src = it->second->values();
    std::copy(src.begin(), src.end(), p.value.mutable_values().begin());
  }
  if (saved.size() != model.parameters().size()) throw CheckpointError("checkpoint has parameters the model lacks");
  return model;
}

// ---------------------------------------------------------------------------------------------
// Training

namespace {

void check_vocab(const Corpus& corpus, std::size_t vocab_size, const std::string& what) {
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    for (const auto* side : {&corpus.pairs[i].src, &corpus.pairs[i].tgt}) {
      for (int id : *side) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
          throw std::invalid_argument(what + " pair " + std::to_string(i + 1) + " has token id " + std::to_string(id) +
                                      " outside the model vocabulary of " + std::to_string(vocab_size));
        }
      }
    }
  }
}

// Dev data uses a seed far from the training seed's neighbours.
constexpr std::uint64_t kDevSeedOffset = 0x9E3779B97F4A7C15ULL;

}  // namespace

Corpus training_corpus(const RunConfig& config) {
  Corpus c = config.train_corpus.empty() ? generate_corpus(config.task, config.train_size, config.seed)
                                         : load_corpus(config.train_corpus);
  if (c.pairs.empty()) throw std::invalid_argument("training corpus is empty");
  check_vocab(c, config.model.vocab_size, "training corpus");
  return c;
}

Corpus dev_corpus(const RunConfig& config) {
  Corpus c;
  if (!config.dev_corpus.empty()) c = load_corpus(config.dev_corpus);
  else if (config.dev_size > 0) c = generate_corpus(config.task, config.dev_size, config.seed ^ kDevSeedOffset);
  check_vocab(c, config.model.vocab_size, "dev corpus");
  return c;
}

EvalMetrics evaluate_model(const Model& model, const Corpus& data, std::size_t beam, std::size_t max_len) {
  std::vector<std::vector<int>> hyps, refs;
  std::map<std::vector<int>, std::vector<int>> cache;
  for (const auto& p : data.pairs) {
    auto it = cache.find(p.src);
    if (it == cache.end()) it = cache.emplace(p.src, translate(model, p.src, beam, max_len).tokens).first;
    hyps.push_back(it->second);
    refs.push_back(p.tgt);
  }
  return evaluate_hypotheses(hyps, refs);
}

TrainResult train(const RunConfig& config, const TrainOptions& options) {
  config.validate();
  const Corpus train_data = training_corpus(config);
  const Corpus dev_data = dev_corpus(config);

  Model model(config.model, config.seed);
  Adam adam(config.learning_rate);
  Rng sample_rng = Rng::stream(config.seed, "sample");
  Rng batch_rng = Rng::stream(config.seed, "batch");
  std::size_t step = 0;
  double best = -1.0;

  if (options.resume) {
    const TrainingState state = load_checkpoint(*options.resume);
    for (const char* key : {"vocab_size", "d_model", "n_heads", "n_layers_enc", "n_layers_dec", "d_ffn", "latent",
                            "latent_dim", "flow_kind", "flow_count", "ortho_columns", "posterior_conditioning"}) {
      if (get_config_value(state.config, key) != get_config_value(config, key)) {
        throw std::invalid_argument(std::string("resume: checkpoint differs from the config in ") + key);
      }
    }
    model = model_from_checkpoint(state);
    adam.set_state(state.adam);
    sample_rng.set_state(state.sample_rng);
    batch_rng.set_state(state.batch_rng);
    step = state.step;
    best = state.best_overlap;
  }

  const std::filesystem::path out_dir = config.out_dir;
  std::ofstream metrics;
  if (options.write_files) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "config.txt") << serialize_config(config);
    const bool append = options.resume.has_value() && std::filesystem::exists(out_dir / "metrics.csv");
    metrics.open(out_dir / "metrics.csv", append ? std::ios::app : std::ios::trunc);
    if (!append) metrics << metrics_csv_header() << '\n';
    metrics.flush();
  }

  const auto snapshot = [&] {
    return TrainingState{config, model.parameters(), adam.state(), step, sample_rng.state(), batch_rng.state(), best};
  };

  TrainResult result{model, {}, 0.0, 0, {}};
  const auto limit = std::min(config.steps, options.stop_at.value_or(config.steps));
  MetricsRecord acc;
  std::size_t acc_steps = 0;
  std::vector<SentencePair> batch(config.batch_size);
  auto& params = model.parameters();

  while (step < limit) {
    for (auto& pair : batch) pair = train_data.pairs[batch_rng.below(train_data.size())];
    const double beta = anneal_beta(step, config.schedule);
    const ElboTerms terms = elbo_loss(model, batch, config.schedule, beta, sample_rng);
    if (!std::isfinite(terms.loss.item())) {
      const auto dump = out_dir / ("nonfinite_step" + std::to_string(step) + ".txt");
      if (options.write_files) {
        Corpus offending{batch, train_data.meta};
        save_corpus(offending, dump);
      }
      throw NonFiniteLossError("non-finite loss at step " + std::to_string(step) + " (recon " +
                                   std::to_string(terms.recon_nll) + ", kl " + std::to_string(terms.kl_est) +
                                   "); offending batch written to " + dump.string(),
                               dump);
    }
    backward(terms.loss);
    Adam::clip_grad_norm(params, config.clip_norm);
    adam.step(params);
    for (auto& p : params) p.value.node_ptr()->grad.clear();
    ++step;

    acc.loss += terms.loss.item();
    acc.recon_nll += terms.recon_nll;
    acc.kl_est += terms.kl_est;
    acc.mean_gate += terms.mean_gate;
    ++acc_steps;

    if (step % config.eval_interval == 0 || step == config.steps) {
      const double n = static_cast<double>(acc_steps);
      MetricsRecord rec{step, acc.loss / n, acc.recon_nll / n, acc.kl_est / n, beta, acc.mean_gate / n, 0, 0, 0};
      if (!dev_data.pairs.empty()) {
        const auto dev = evaluate_model(model, dev_data, config.eval_beam, config.decode_limit());
        rec.dev_token_accuracy = dev.token_accuracy;
        rec.dev_exact_match = dev.exact_match;
        rec.dev_overlap = dev.overlap;
      }
      acc = {};
      acc_steps = 0;
      const bool improved = rec.dev_overlap > best;
      if (improved) best = rec.dev_overlap;
      result.records.push_back(rec);
      if (options.on_eval) options.on_eval(rec);
      if (options.write_files) {
        metrics << metrics_csv_row(rec) << '\n';
        metrics.flush();
        const auto state = snapshot();
        if (improved) save_checkpoint(state, out_dir / "best.ckpt");
        save_checkpoint(state, out_dir / "last.ckpt");
      }
    }
  }
  result.model = model;
  result.best_overlap = std::max(best, 0.0);
  result.steps = step;
  result.final_state = snapshot();
  return result;
}

// ---------------------------------------------------------------------------------------------

std::string to_string(CollapseStatus status) { return status == CollapseStatus::healthy ? "healthy" : "collapsed"; }

CollapseStatus collapse_monitor(std::span<const MetricsRecord> records, std::size_t anneal_steps, double threshold,
                                std::size_t patience) {
  std::size_t run = 0;
  for (const auto& r : records) {
    if (r.step < anneal_steps) continue;
    run = r.kl_est < threshold ? run + 1 : 0;
    if (run >= patience) return CollapseStatus::collapsed;
  }
  return CollapseStatus::healthy;
}

}  // namespace vnmt

#include "vnmt/objective.hpp"

#include <cmath>
#include <stdexcept>

#include "vnmt/ops.hpp"

namespace vnmt {

void TrainSchedule::validate() const {
  if (!(beta >= 0.0)) throw std::invalid_argument("TrainSchedule: beta must be >= 0");
  if (!(kl_target >= 0.0)) throw std::invalid_argument("TrainSchedule: kl_target must be >= 0");
  if (!(word_dropout >= 0.0 && word_dropout <= 1.0)) {
    throw std::invalid_argument("TrainSchedule: word_dropout must lie in [0, 1]");
  }
  if (mc_samples == 0) throw std::invalid_argument("TrainSchedule: mc_samples must be >= 1");
}

Tensor mc_kl_estimate(std::span<const LatentDraw> draws, const DiagGaussian& prior) {
  if (draws.empty()) throw std::invalid_argument("mc_kl_estimate: need at least one draw");
  std::vector<Tensor> terms;
  terms.reserve(draws.size());
  for (const auto& d : draws) terms.push_back(ops::sub(d.log_q, gaussian_log_density(prior, d.zk)));
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
  return ops::scale(total, 1.0 / static_cast<double>(draws.size()));
}

Tensor beta_c_kl(const Tensor& kl, double beta, double c) { return ops::scale(ops::abs(ops::add_scalar(kl, -c)), beta); }

double beta_c_kl(double kl, double beta, double c) { return beta * std::fabs(kl - c); }

double anneal_beta(std::size_t step, const TrainSchedule& schedule) {
  if (schedule.anneal_steps == 0 || step >= schedule.anneal_steps) return schedule.beta;
  return schedule.beta * static_cast<double>(step) / static_cast<double>(schedule.anneal_steps);
}

std::vector<int> word_dropout(std::span<const int> tokens, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("word_dropout: rate must lie in [0, 1]");
  std::vector<int> out(tokens.begin(), tokens.end());
  if (rate == 0.0) return out;
  for (auto& t : out) {
    if (!is_special(t) && rng.bernoulli(rate)) t = kUnk;
  }
  return out;
}

namespace {

struct SentenceTerms {
  Tensor recon_nll;  // scalar
  Tensor kl;         // scalar, undefined without a posterior
  double mean_gate = 0.0;
};

std::vector<int> decoder_inputs(const std::vector<int>& tgt, double dropout, Rng& rng) {
  const auto history = word_dropout(std::span<const int>(tgt).first(tgt.size() - 1), dropout, rng);
  std::vector<int> inputs{kBos};
  inputs.insert(inputs.end(), history.begin(), history.end());
  return inputs;
}

SentenceTerms sentence_terms(const Model& model, const SentencePair& pair, double dropout, std::size_t samples,
                             Rng& rng) {
  if (pair.tgt.empty() || pair.src.empty()) throw std::invalid_argument("elbo: empty sentence in batch");
  const auto& cfg = model.config();
  const EncoderState enc = model.encode(pair.src);
  const auto inputs = decoder_inputs(pair.tgt, dropout, rng);

  const auto reconstruct = [&](const Tensor& code, double& gate_acc) {
    GateTrace trace;
    const Tensor lp = model.output_log_probs(model.decode(enc, inputs, code, &trace));
    gate_acc += trace.mean_gate;
    return ops::neg(ops::sum(ops::pick(lp, pair.tgt)));
  };

  SentenceTerms out;
  double gate_acc = 0.0;
  if (cfg.latent != LatentMode::variational) {
    const Tensor code = cfg.latent == LatentMode::static_mean ? model.pooled_embedding(pair.src) : Tensor{};
    out.recon_nll = reconstruct(code, gate_acc);
    out.mean_gate = gate_acc;
    return out;
  }

  const Tensor pooled_src = model.pooled_embedding(pair.src);
  const Tensor pooled_tgt =
      cfg.conditioning == Conditioning::source_and_target ? model.pooled_embedding(pair.tgt) : Tensor{};
  const DiagGaussian prior = model.condition_prior(pooled_src);
  const Posterior post = model.condition_posterior({pooled_src, pooled_tgt});
  std::vector<LatentDraw> draws;
  Tensor recon;
  for (std::size_t l = 0; l < samples; ++l) {
    draws.push_back(model.sample_posterior(post, rng));
    const Tensor r = reconstruct(draws.back().zk, gate_acc);
    recon = recon.defined() ? ops::add(recon, r) : r;
  }
  const double inv = 1.0 / static_cast<double>(samples);
  out.recon_nll = ops::scale(recon, inv);
  out.kl = mc_kl_estimate(draws, prior);
  out.mean_gate = gate_acc * inv;
  return out;
}

}  // namespace

ElboTerms elbo_loss(const Model& model, std::span<const SentencePair> batch, const TrainSchedule& schedule,
                    double beta_effective, Rng& rng) {
  schedule.validate();
  if (batch.empty()) throw std::invalid_argument("elbo_loss: empty batch");
  ElboTerms terms;
  terms.beta_effective = beta_effective;
  Tensor recon, kl;
  double gate = 0.0;
  for (const auto& pair : batch) {
    const auto s = sentence_terms(model, pair, schedule.word_dropout, schedule.mc_samples, rng);
    recon = recon.defined() ? ops::add(recon, s.recon_nll) : s.recon_nll;
    if (s.kl.defined()) {
      kl = kl.defined() ? ops::add(kl, s.kl) : s.kl;
      terms.sentence_kl.push_back(s.kl.item());
    }
    gate += s.mean_gate;
    terms.tokens += pair.tgt.size();
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  const Tensor mean_recon = ops::scale(recon, inv);
  terms.recon_nll = mean_recon.item();
  terms.mean_gate = gate * inv;
  if (!kl.defined()) {
    terms.loss = mean_recon;
    return terms;
  }
  const Tensor mean_kl = ops::scale(kl, inv);
  const Tensor penalty = beta_c_kl(mean_kl, beta_effective, schedule.kl_target);
  terms.kl_est = mean_kl.item();
  terms.modified_kl = penalty.item();
  terms.loss = ops::add(mean_recon, penalty);
  return terms;
}

HeldOutElbo heldout_elbo(const Model& model, std::span<const SentencePair> data, std::size_t samples,
                         double input_dropout, Rng& rng) {
  if (samples == 0) throw std::invalid_argument("heldout_elbo: samples must be >= 1");
  NoGradGuard no_grad;
  HeldOutElbo out;
  double elbo = 0.0, recon = 0.0, kl_sum = 0.0;
  std::size_t tokens = 0;
  for (const auto& pair : data) {
    double sentence_elbo = 0.0, sentence_recon = 0.0, sentence_kl = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      const auto t = sentence_terms(model, pair, input_dropout, 1, rng);
      const double kl = t.kl.defined() ? t.kl.item() : 0.0;
      sentence_recon -= t.recon_nll.item();
      sentence_kl += kl;
      sentence_elbo += -t.recon_nll.item() - kl;
    }
    const double inv = 1.0 / static_cast<double>(samples);
    elbo += sentence_elbo * inv;
    recon += sentence_recon * inv;
    kl_sum += sentence_kl * inv;
    out.sentence_kl.push_back(sentence_kl * inv);
    tokens += pair.tgt.size();
  }
  if (tokens > 0) {
    out.elbo_per_token = elbo / static_cast<double>(tokens);
    out.recon_per_token = recon / static_cast<double>(tokens);
  }
  if (!data.empty()) out.kl_per_sentence = kl_sum / static_cast<double>(data.size());
  return out;
}

}  // namespace vnmt

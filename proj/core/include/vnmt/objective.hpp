#pragma once

#include <span>
#include <vector>

#include "vnmt/flows.hpp"
#include "vnmt/gaussian.hpp"
#include "vnmt/model.hpp"
#include "vnmt/rng.hpp"
#include "vnmt/tokens.hpp"

namespace vnmt {

struct TrainSchedule {
  double beta = 1.0;
  double kl_target = 0.1;  // C, per sentence
  std::size_t anneal_steps = 2000;
  double word_dropout = 0.0;
  std::size_t mc_samples = 1;  // L

  void validate() const;
};

/// (1/L) sum_l [log_q(zK_l) - log p(zK_l)] over the draws.
Tensor mc_kl_estimate(std::span<const LatentDraw> draws, const DiagGaussian& prior);

/// beta * |kl - C|
Tensor beta_c_kl(const Tensor& kl, double beta, double c);
double beta_c_kl(double kl, double beta, double c);

/// Linear ramp from 0 at step 0 to beta at anneal_steps, constant afterwards.
double anneal_beta(std::size_t step, const TrainSchedule& schedule);

/// Non-special tokens replaced by UNK independently with probability `rate`.
std::vector<int> word_dropout(std::span<const int> tokens, double rate, Rng& rng);

/// Batch-mean terms. loss = recon_nll + beta_effective * |kl_est - C| for latent-variable models;
/// models without a posterior have kl_est = modified_kl = 0 and loss = recon_nll.
struct ElboTerms {
  Tensor loss;
  double recon_nll = 0.0;    // mean over sentences of summed token NLL
  double kl_est = 0.0;       // mean over sentences
  double modified_kl = 0.0;  // beta_effective * |kl_est - C|
  double beta_effective = 0.0;
  double mean_gate = 0.0;
  std::size_t tokens = 0;
  std::vector<double> sentence_kl;
};

/// Teacher-forced reconstruction with word dropout on decoder inputs, zK from the posterior,
/// and the beta_C KL term. Draws come from `rng` in sentence order.
ElboTerms elbo_loss(const Model& model, std::span<const SentencePair> batch, const TrainSchedule& schedule,
                    double beta_effective, Rng& rng);

struct HeldOutElbo {
  double elbo_per_token = 0.0;  // sum over sentences of (log p(y | x, zK) - KL) / total target tokens
  double recon_per_token = 0.0;
  double kl_per_sentence = 0.0;
  std::vector<double> sentence_kl;
};

/// Single-sample ELBO estimate on a held-out set, averaged over `samples` draws per sentence.
/// `input_dropout` applies word dropout to decoder inputs exactly as in training.
HeldOutElbo heldout_elbo(const Model& model, std::span<const SentencePair> data, std::size_t samples,
                         double input_dropout, Rng& rng);

}  // namespace vnmt

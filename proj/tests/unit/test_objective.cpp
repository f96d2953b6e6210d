#include <gtest/gtest.h>

#include <cmath>

#include "model_fixtures.hpp"
#include "oracles.hpp"
#include "vnmt/grad_check.hpp"
#include "vnmt/objective.hpp"

using namespace vnmt;
using namespace vnmt::oracle;
namespace o = vnmt::ops;

namespace {

struct Moments {
  double mean = 0.0;
  double se = 0.0;
  double var = 0.0;
};

/// Sample mean and standard error of the L-sample estimator with K = 0.
Moments kl_study(const DiagGaussian& q, const DiagGaussian& p, std::size_t n, std::size_t l, Rng& rng) {
  NoGradGuard no_grad;
  double sum = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<LatentDraw> draws;
    for (std::size_t j = 0; j < l; ++j) {
      const auto s = gaussian_sample(q, rng);
      draws.push_back({s.z, s.z, s.log_q0});
    }
    const double v = mc_kl_estimate(draws, p).item();
    sum += v;
    sq += v * v;
  }
  Moments m;
  m.mean = sum / static_cast<double>(n);
  m.var = sq / static_cast<double>(n) - m.mean * m.mean;
  m.se = std::sqrt(m.var / static_cast<double>(n));
  return m;
}

DiagGaussian gauss(std::vector<double> mu, std::vector<double> lv) {
  return {Tensor::vector(std::move(mu)), Tensor::vector(std::move(lv))};
}

std::vector<SentencePair> toy_batch() { return {{{4, 5, 6, kEos}, {7, 8, kEos}}, {{9, 4, kEos}, {5, 10, 11, kEos}}}; }

std::vector<Tensor> leaves(const Model& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.value);
  return out;
}

void zero_grads(Model& m) {
  for (auto& p : m.parameters()) p.value.zero_grad();
}

}  // namespace

TEST(Schedule, Validation) {
  TrainSchedule s;
  EXPECT_NO_THROW(s.validate());
  s.word_dropout = 1.5;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = {};
  s.mc_samples = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = {};
  s.beta = -1.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(McKl, IdenticalGaussiansAverageZero) {
  Rng rng(1);
  const auto q = gauss({0.3, -0.2}, {0.1, -0.4});
  const auto m = kl_study(q, q, 100000, 1, rng);
  EXPECT_EQ(m.mean, 0.0);
}

TEST(McKl, UnitShiftAveragesOneHalf) {
  Rng rng(2);
  const auto m = kl_study(gauss({1.0}, {0.0}), gauss({0.0}, {0.0}), 100000, 1, rng);
  EXPECT_NEAR(m.mean, 0.5, 3.0 * m.se);
  EXPECT_DOUBLE_EQ(gaussian_kl({1.0}, {0.0}, {0.0}, {0.0}), 0.5);
}

TEST(McKl, MoreSamplesSameMeanLessVariance) {
  Rng rng(3);
  const auto q = gauss({0.5, -1.0}, {0.3, -0.5});
  const auto p = gauss({0.0, 0.2}, {0.0, 0.4});
  const auto one = kl_study(q, p, 20000, 1, rng);
  const auto hundred = kl_study(q, p, 2000, 100, rng);
  EXPECT_NEAR(one.mean, hundred.mean, 3.0 * std::hypot(one.se, hundred.se));
  EXPECT_LT(hundred.var, one.var / 20.0);
}

TEST(McKl, UnbiasedOnRandomPairs) {
  Rng rng(4);
  for (int pair = 0; pair < 5; ++pair) {
    const std::size_t d = 1 + rng.below(4);
    Vec mq(d), lq(d), mp(d), lp(d);
    for (std::size_t i = 0; i < d; ++i) {
      mq[i] = rng.normal();
      lq[i] = 0.5 * rng.normal();
      mp[i] = rng.normal();
      lp[i] = 0.5 * rng.normal();
    }
    const auto m = kl_study(gauss(mq, lq), gauss(mp, lp), 100000, 1, rng);
    EXPECT_NEAR(m.mean, gaussian_kl(mq, lq, mp, lp), 3.0 * m.se) << "pair " << pair;
  }
}

TEST(BetaC, Examples) {
  EXPECT_DOUBLE_EQ(beta_c_kl(0.1, 1.0, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(beta_c_kl(0.5, 1.0, 0.1), 0.4);
  EXPECT_DOUBLE_EQ(beta_c_kl(0.0, 1.0, 0.1), 0.1);
  EXPECT_DOUBLE_EQ(beta_c_kl(Tensor::scalar(0.5), 2.0, 0.1).item(), 0.8);
}

TEST(BetaC, ZeroExactlyAtTarget) {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double c = rng.uniform();
    const double kl = rng.uniform();
    EXPECT_EQ(beta_c_kl(c, 1.0, c), 0.0);
    if (kl != c) EXPECT_GT(beta_c_kl(kl, 1.0, c), 0.0);
  }
}

TEST(Anneal, LinearRamp) {
  TrainSchedule s;
  s.beta = 1.0;
  s.anneal_steps = 1000;
  EXPECT_EQ(anneal_beta(0, s), 0.0);
  EXPECT_DOUBLE_EQ(anneal_beta(500, s), 0.5);
  EXPECT_EQ(anneal_beta(1000, s), 1.0);
  EXPECT_EQ(anneal_beta(5000, s), 1.0);
  double prev = 0.0;
  for (std::size_t step = 0; step < 1200; ++step) {
    const double b = anneal_beta(step, s);
    EXPECT_GE(b, prev);
    prev = b;
  }
  s.anneal_steps = 0;
  EXPECT_EQ(anneal_beta(0, s), 1.0);
}

TEST(WordDropout, Extremes) {
  Rng rng(6);
  const std::vector<int> t{kBos, 4, 5, kUnk, 6, kEos, kPad};
  EXPECT_EQ(word_dropout(t, 0.0, rng), t);
  EXPECT_EQ(word_dropout(t, 1.0, rng), (std::vector<int>{kBos, kUnk, kUnk, kUnk, kUnk, kEos, kPad}));
  EXPECT_THROW(word_dropout(t, -0.1, rng), std::invalid_argument);
}

TEST(WordDropout, RateConcentration) {
  Rng rng(7);
  const std::vector<int> t(100000, 9);
  const auto out = word_dropout(t, 0.2, rng);
  const auto dropped = std::count(out.begin(), out.end(), kUnk);
  EXPECT_NEAR(static_cast<double>(dropped) / 1e5, 0.2, 0.005);
}

TEST(WordDropout, TargetsUntouched) {
  const Model m(tiny_config(LatentMode::none), 1);
  const auto batch = toy_batch();
  const auto copy = batch;
  TrainSchedule s;
  s.word_dropout = 1.0;
  Rng rng(8);
  const auto terms = elbo_loss(m, batch, s, 0.0, rng);
  EXPECT_EQ(batch, copy);
  double expected = 0.0;
  for (const auto& pair : batch) {
    std::vector<int> inputs{kBos};
    for (std::size_t i = 0; i + 1 < pair.tgt.size(); ++i) inputs.push_back(is_special(pair.tgt[i]) ? pair.tgt[i] : kUnk);
    const Tensor lp = m.output_log_probs(m.decode(m.encode(pair.src), inputs, {}));
    for (std::size_t t = 0; t < pair.tgt.size(); ++t) expected -= lp.at(t, static_cast<std::size_t>(pair.tgt[t]));
  }
  EXPECT_NEAR(terms.recon_nll, expected / 2.0, 1e-12);
}

TEST(Elbo, ClosedGateAndZeroBetaIsPlainCrossEntropy) {
  Model latent(tiny_config(LatentMode::variational, 2), 9);
  Model plain(tiny_config(LatentMode::none), 9);
  for (auto& p : plain.parameters()) set_param(plain, p.name, latent.param(p.name).to_vector());
  fill_param(latent, "gate.b", -1e6);
  Rng r1(1), r2(1);
  const auto a = elbo_loss(latent, toy_batch(), {}, 0.0, r1);
  const auto b = elbo_loss(plain, toy_batch(), {}, 0.0, r2);
  EXPECT_NEAR(a.loss.item(), b.loss.item(), 1e-9);
  EXPECT_EQ(b.kl_est, 0.0);
  EXPECT_EQ(b.loss.item(), b.recon_nll);
}

TEST(Elbo, PosteriorEqualToPriorPaysBetaC) {
  Model m(tiny_config(), 10);
  for (const char* head : {"prior.mu", "prior.lv", "post.mu", "post.lv"}) {
    fill_param(m, std::string(head) + ".w", 0.0);
    fill_param(m, std::string(head) + ".b", 0.0);
  }
  TrainSchedule s;
  s.kl_target = 0.1;
  Rng rng(2);
  const auto t = elbo_loss(m, toy_batch(), s, 1.0, rng);
  EXPECT_NEAR(t.kl_est, 0.0, 1e-12);
  EXPECT_NEAR(t.modified_kl, 0.1, 1e-12);
  EXPECT_NEAR(t.loss.item(), t.recon_nll + 0.1, 1e-12);
}

TEST(Elbo, TermsSatisfyLossIdentity) {
  for (auto kind : {FlowKind::planar, FlowKind::sylvester, FlowKind::coupling}) {
    const Model m(tiny_config(LatentMode::variational, 2, kind), 11);
    TrainSchedule s;
    s.kl_target = 0.3;
    s.mc_samples = 2;
    Rng rng(3);
    const auto t = elbo_loss(m, toy_batch(), s, 0.7, rng);
    EXPECT_GE(t.recon_nll, 0.0);
    EXPECT_NEAR(t.loss.item(), t.recon_nll + 0.7 * std::fabs(t.kl_est - 0.3), 1e-12);
    EXPECT_EQ(t.sentence_kl.size(), 2u);
    EXPECT_NEAR((t.sentence_kl[0] + t.sentence_kl[1]) / 2.0, t.kl_est, 1e-12);
    EXPECT_EQ(t.tokens, 7u);
  }
}

TEST(Elbo, GradCheckEachFlowFamily) {
  for (auto kind : {FlowKind::planar, FlowKind::sylvester, FlowKind::coupling}) {
    auto cfg = tiny_config(LatentMode::variational, 2, kind);
    cfg.conditioning = Conditioning::source_and_target;
    const Model m(cfg, 12);
    TrainSchedule s;
    s.kl_target = 0.05;
    const auto loss = [&] {
      Rng rng(4);
      return elbo_loss(m, toy_batch(), s, 1.0, rng).loss;
    };
    EXPECT_LE(grad_check(loss, leaves(m)), 1e-3) << to_string(kind);
  }
}

TEST(Elbo, ZeroBetaGivesKlNoGradient) {
  Model m(tiny_config(LatentMode::variational, 2), 13);
  const auto batch = toy_batch();
  Rng r1(5);
  backward(elbo_loss(m, batch, {}, 0.0, r1).loss);
  std::vector<std::vector<double>> full;
  for (const auto& p : m.parameters()) full.emplace_back(p.value.grad().begin(), p.value.grad().end());
  zero_grads(m);

  // Reconstruction alone, drawing the same noise in the same order.
  Rng r2(5);
  Tensor recon;
  for (const auto& pair : batch) {
    const Tensor pooled = m.pooled_embedding(pair.src);
    const auto draw = m.sample_posterior(m.condition_posterior({pooled, {}}), r2);
    std::vector<int> inputs{kBos};
    inputs.insert(inputs.end(), pair.tgt.begin(), pair.tgt.end() - 1);
    const Tensor lp = m.output_log_probs(m.decode(m.encode(pair.src), inputs, draw.zk));
    const Tensor nll = o::neg(o::sum(o::pick(lp, pair.tgt)));
    recon = recon.defined() ? o::add(recon, nll) : nll;
  }
  backward(o::scale(recon, 0.5));
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto& p = m.parameters()[i];
    const bool kl_side = p.name.rfind("flow", 0) == 0 || p.name.rfind("post.", 0) == 0 || p.name.rfind("prior.", 0) == 0;
    if (!kl_side) continue;
    const auto g = p.value.grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double f = j < full[i].size() ? full[i][j] : 0.0;
      EXPECT_NEAR(f, g[j], 1e-12) << p.name;
      if (p.name.rfind("prior.", 0) == 0) EXPECT_EQ(f, 0.0) << p.name;
    }
  }
}

TEST(HeldOut, ElboIsReconMinusKl) {
  const Model m(tiny_config(LatentMode::variational, 1), 14);
  Rng rng(6);
  const auto h = heldout_elbo(m, toy_batch(), 3, 0.0, rng);
  EXPECT_EQ(h.sentence_kl.size(), 2u);
  EXPECT_NEAR(h.elbo_per_token * 7.0, h.recon_per_token * 7.0 - 2.0 * h.kl_per_sentence, 1e-9);
  EXPECT_LT(h.recon_per_token, 0.0);
}

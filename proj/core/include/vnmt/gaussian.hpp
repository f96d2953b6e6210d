#pragma once

#include "vnmt/rng.hpp"
#include "vnmt/tensor.hpp"

namespace vnmt {

/// Diagonal Gaussian N(mu, diag(exp(log_var))).
struct DiagGaussian {
  Tensor mu;
  Tensor log_var;

  std::size_t dim() const { return mu.numel(); }
};

struct GaussianSample {
  Tensor z;
  Tensor log_q0;
};

/// sum_i [-ln(2 pi)/2 - log_var_i/2 - (z_i - mu_i)^2 / (2 exp(log_var_i))]
Tensor gaussian_log_density(const DiagGaussian& g, const Tensor& z);

/// z = mu + exp(log_var / 2) * noise, differentiable in mu and log_var. `noise` is a constant.
GaussianSample gaussian_reparameterize(const DiagGaussian& g, const Tensor& noise);

/// Reparameterized draw with noise from `rng`.
GaussianSample gaussian_sample(const DiagGaussian& g, Rng& rng);

}  // namespace vnmt

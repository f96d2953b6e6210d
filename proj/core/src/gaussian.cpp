#include "vnmt/gaussian.hpp"

#include <cmath>

#include "vnmt/ops.hpp"

namespace vnmt {

namespace {

void validate(const DiagGaussian& g) {
  if (g.mu.shape() != g.log_var.shape() || g.mu.rank() != 1) {
    throw ShapeError("DiagGaussian(mu, log_var)", g.mu.shape(), g.log_var.shape());
  }
  for (double v : g.log_var.values()) {
    if (!std::isfinite(v)) throw NumericError("DiagGaussian: log_var is not finite");
  }
  for (double v : g.mu.values()) {
    if (!std::isfinite(v)) throw NumericError("DiagGaussian: mu is not finite");
  }
}

}  // namespace

Tensor gaussian_log_density(const DiagGaussian& g, const Tensor& z) {
  validate(g);
  if (z.shape() != g.mu.shape()) throw ShapeError("gaussian_log_density", g.mu.shape(), z.shape());
  const double half_log_2pi = 0.5 * std::log(2.0 * M_PI);
  const Tensor diff = ops::sub(z, g.mu);
  const Tensor quad = ops::mul(ops::square(diff), ops::exp(ops::neg(g.log_var)));
  const Tensor per_dim = ops::add_scalar(ops::scale(ops::add(g.log_var, quad), -0.5), -half_log_2pi);
  return ops::sum(per_dim);
}

GaussianSample gaussian_reparameterize(const DiagGaussian& g, const Tensor& noise) {
  validate(g);
  if (noise.shape() != g.mu.shape()) throw ShapeError("gaussian_reparameterize", g.mu.shape(), noise.shape());
  const Tensor std_dev = ops::exp(ops::scale(g.log_var, 0.5));
  const Tensor z = ops::add(g.mu, ops::mul(std_dev, noise));
  return {z, gaussian_log_density(g, z)};
}

GaussianSample gaussian_sample(const DiagGaussian& g, Rng& rng) {
  std::vector<double> eps(g.dim());
  for (auto& e : eps) e = rng.normal();
  return gaussian_reparameterize(g, Tensor::vector(std::move(eps)));
}

}  // namespace vnmt

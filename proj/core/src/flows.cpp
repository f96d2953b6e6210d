#include "vnmt/flows.hpp"

#include <cmath>
#include <stdexcept>

#include "vnmt/linalg.hpp"
#include "vnmt/ops.hpp"

namespace vnmt {

namespace {

void require_vector(const char* op, const Tensor& z) {
  if (z.rank() != 1) throw ShapeError(std::string(op) + ": expected a vector, got " + shape_str(z.shape()));
}

void require_finite(const char* op, const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite intermediate value");
  }
}

// 1 - tanh(x)^2 from h = tanh(x)
Tensor tanh_derivative(const Tensor& h) { return ops::add_scalar(ops::neg(ops::square(h)), 1.0); }

}  // namespace

std::string to_string(FlowKind kind) {
  switch (kind) {
    case FlowKind::planar: return "planar";
    case FlowKind::sylvester: return "sylvester";
    case FlowKind::coupling: return "coupling";
  }
  return "?";
}

FlowKind parse_flow_kind(const std::string& name) {
  if (name == "planar") return FlowKind::planar;
  if (name == "sylvester") return FlowKind::sylvester;
  if (name == "coupling") return FlowKind::coupling;
  throw std::invalid_argument("unknown flow kind '" + name + "' (expected planar, sylvester or coupling)");
}

Tensor planar_u_hat(const Tensor& u, const Tensor& w) {
  if (u.shape() != w.shape()) throw ShapeError("planar_u_hat", u.shape(), w.shape());
  const Tensor w_sq = ops::dot(w, w);
  // w = 0 makes the flow the identity whatever u is, and there is nothing to constrain.
  if (w_sq.item() == 0.0) return u;
  const Tensor wu = ops::dot(w, u);
  // m(a) - a = softplus(-a) - 1 + margin, free of cancellation for large a.
  const Tensor shift = ops::add_scalar(ops::softplus(ops::neg(wu)), -1.0 + kPlanarMargin);
  const Tensor coef = ops::div(shift, w_sq);
  return ops::add(u, ops::scale_by(w, coef));
}

FlowOutput planar_forward(const Tensor& z, const PlanarParams& p) {
  require_vector("planar_forward", z);
  if (p.w.shape() != z.shape()) throw ShapeError("planar_forward(z, w)", z.shape(), p.w.shape());
  if (p.b.numel() != 1) throw ShapeError("planar_forward: bias must be a scalar, got " + shape_str(p.b.shape()));
  const Tensor b = p.b.rank() == 0 ? p.b : ops::reshape(p.b, {});
  const Tensor u_hat = planar_u_hat(p.u, p.w);
  const Tensor h = ops::tanh(ops::add(ops::dot(p.w, z), b));
  const Tensor out = ops::add(z, ops::scale_by(u_hat, h));
  const Tensor arg = ops::add_scalar(ops::mul(tanh_derivative(h), ops::dot(p.w, u_hat)), 1.0);
  if (!(arg.item() > 0.0)) throw NumericError("planar_forward: log-det argument is not positive");
  const Tensor log_det = ops::log(arg);
  require_finite("planar_forward", out);
  require_finite("planar_forward", log_det);
  return {out, log_det};
}

Tensor squash_triangular(const Tensor& raw) {
  if (raw.rank() != 2 || raw.rows() != raw.cols()) {
    throw ShapeError("squash_triangular: expected a square matrix, got " + shape_str(raw.shape()));
  }
  const auto m = raw.rows();
  std::vector<double> strict_upper(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) strict_upper[i * m + j] = 1.0;
  const Tensor off = ops::mul(raw, Tensor::matrix(m, m, std::move(strict_upper)));
  return ops::add(off, ops::diag_embed(ops::scale(ops::tanh(ops::diag(raw)), kSquashBound)));
}

SylvesterParams make_sylvester_params(const Tensor& q_raw, const Tensor& r1_raw, const Tensor& r2_raw,
                                      const Tensor& b) {
  return {orthonormalize(q_raw), squash_triangular(r1_raw), squash_triangular(r2_raw), b};
}

FlowOutput sylvester_forward(const Tensor& z, const SylvesterParams& p) {
  require_vector("sylvester_forward", z);
  if (p.q.rank() != 2 || p.q.rows() != z.numel()) throw ShapeError("sylvester_forward(z, Q)", z.shape(), p.q.shape());
  const auto m = p.q.cols();
  const Shape square{m, m};
  if (p.r1.shape() != square) throw ShapeError("sylvester_forward(Q, R1)", p.q.shape(), p.r1.shape());
  if (p.r2.shape() != square) throw ShapeError("sylvester_forward(Q, R2)", p.q.shape(), p.r2.shape());
  if (p.b.shape() != Shape{m}) throw ShapeError("sylvester_forward(Q, b)", p.q.shape(), p.b.shape());
  if (const double err = orthonormality_error(p.q); err > 1e-4) {
    throw std::invalid_argument("sylvester_forward: Q^T Q deviates from identity by " + std::to_string(err));
  }
  const Tensor d1 = ops::diag(p.r1);
  const Tensor d2 = ops::diag(p.r2);
  for (std::size_t i = 0; i < m; ++i) {
    if (!(d1[i] * d2[i] > -1.0)) {
      throw std::invalid_argument("sylvester_forward: R1[i,i] * R2[i,i] <= -1 at i = " + std::to_string(i));
    }
  }
  const Tensor h = ops::tanh(ops::add(ops::matvec(p.r2, ops::vecmat(z, p.q)), p.b));
  const Tensor out = ops::add(z, ops::matvec(p.q, ops::matvec(p.r1, h)));
  const Tensor terms = ops::add_scalar(ops::mul(tanh_derivative(h), ops::mul(d1, d2)), 1.0);
  const Tensor log_det = ops::sum(ops::log(terms));
  require_finite("sylvester_forward", out);
  require_finite("sylvester_forward", log_det);
  return {out, log_det};
}

FlowOutput sylvester_general_forward(const Tensor& z, const Tensor& a, const Tensor& bmat, const Tensor& b) {
  require_vector("sylvester_general_forward", z);
  if (a.rank() != 2 || a.rows() != z.numel()) throw ShapeError("sylvester_general_forward(z, A)", z.shape(), a.shape());
  if (bmat.rank() != 2 || bmat.rows() != a.cols() || bmat.cols() != z.numel()) {
    throw ShapeError("sylvester_general_forward(A, B)", a.shape(), bmat.shape());
  }
  const auto m = a.cols();
  const Tensor h = ops::tanh(ops::add(ops::matvec(bmat, z), b));
  const Tensor out = ops::add(z, ops::matvec(a, h));
  const Tensor inner = ops::add(Tensor::identity(m), ops::scale_rows(ops::matmul(bmat, a), tanh_derivative(h)));
  const Tensor log_det = log_abs_det(inner);
  require_finite("sylvester_general_forward", out);
  require_finite("sylvester_general_forward", log_det);
  return {out, log_det};
}

Parity parity_for_step(std::size_t step) {
  return step % 2 == 0 ? Parity::first_identity : Parity::second_identity;
}

namespace {

std::size_t half_dim(const char* op, const Tensor& z) {
  require_vector(op, z);
  if (z.numel() % 2 != 0) {
    throw std::invalid_argument(std::string(op) + ": coupling needs an even dimension, got " + std::to_string(z.numel()));
  }
  return z.numel() / 2;
}

Tensor transformed_half(const Tensor& z, Parity parity) {
  const auto h = z.numel() / 2;
  return ops::slice(z, parity == Parity::first_identity ? h : 0, h);
}

Tensor join(const Tensor& identity, const Tensor& transformed, Parity parity) {
  return parity == Parity::first_identity ? ops::concat({identity, transformed}) : ops::concat({transformed, identity});
}

void check_coupling_params(const char* op, std::size_t half, const CouplingParams& p) {
  if (p.s.shape() != Shape{half}) throw ShapeError(std::string(op) + "(z half, s)", Shape{half}, p.s.shape());
  if (p.t.shape() != Shape{half}) throw ShapeError(std::string(op) + "(z half, t)", Shape{half}, p.t.shape());
}

}  // namespace

Tensor identity_half(const Tensor& z, Parity parity) {
  const auto h = half_dim("identity_half", z);
  return ops::slice(z, parity == Parity::first_identity ? 0 : h, h);
}

FlowOutput coupling_forward(const Tensor& z, const CouplingParams& p) {
  const auto half = half_dim("coupling_forward", z);
  check_coupling_params("coupling_forward", half, p);
  const Tensor moved = ops::add(ops::mul(transformed_half(z, p.parity), ops::exp(p.s)), p.t);
  const Tensor out = join(identity_half(z, p.parity), moved, p.parity);
  require_finite("coupling_forward", out);
  return {out, ops::sum(p.s)};
}

Tensor coupling_inverse(const Tensor& z_out, const CouplingParams& p) {
  const auto half = half_dim("coupling_inverse", z_out);
  check_coupling_params("coupling_inverse", half, p);
  const Tensor moved = ops::mul(ops::sub(transformed_half(z_out, p.parity), p.t), ops::exp(ops::neg(p.s)));
  return join(identity_half(z_out, p.parity), moved, p.parity);
}

CouplingParams coupling_condition(const CouplingStep& step, const Tensor& z) {
  const auto half = half_dim("coupling_condition", z);
  if (step.weight.shape() != Shape{half, 2 * half}) {
    throw ShapeError("coupling_condition(z half, weight)", Shape{half}, step.weight.shape());
  }
  const Tensor raw = ops::add(ops::vecmat(identity_half(z, step.parity), step.weight), step.context);
  const Tensor s = ops::scale(ops::tanh(ops::scale(ops::slice(raw, 0, half), 1.0 / kCouplingScaleBound)),
                              kCouplingScaleBound);
  return {s, ops::slice(raw, half, half), step.parity};
}

FlowOutput apply_step(const Tensor& z, const FlowStep& step) {
  return std::visit(
      [&z](const auto& params) -> FlowOutput {
        using T = std::decay_t<decltype(params)>;
        if constexpr (std::is_same_v<T, PlanarParams>) {
          return planar_forward(z, params);
        } else if constexpr (std::is_same_v<T, SylvesterParams>) {
          return sylvester_forward(z, params);
        } else {
          return coupling_forward(z, coupling_condition(params, z));
        }
      },
      step);
}

LatentDraw stack_forward(const Tensor& z0, const Tensor& log_q0, const FlowStack& stack) {
  Tensor z = z0;
  Tensor log_q = log_q0.rank() == 0 ? log_q0 : ops::reshape(log_q0, {});
  for (const auto& step : stack.steps) {
    auto [next, log_det] = apply_step(z, step);
    log_q = ops::sub(log_q, log_det);
    z = std::move(next);
  }
  return {z0, z, log_q};
}

}  // namespace vnmt

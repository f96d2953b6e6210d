#pragma once

#include <string>
#include <variant>
#include <vector>

#include "vnmt/gaussian.hpp"
#include "vnmt/tensor.hpp"

namespace vnmt {

enum class FlowKind { planar, sylvester, coupling };

std::string to_string(FlowKind kind);
FlowKind parse_flow_kind(const std::string& name);

/// Output of one invertible transform: the new point and log |det df/dz| at the input.
struct FlowOutput {
  Tensor z;
  Tensor log_det;
};

// ---------------------------------------------------------------------------------------------
// Planar: f(z) = z + u_hat * tanh(w^T z + b)

struct PlanarParams {
  Tensor u;  // [D], raw
  Tensor w;  // [D]
  Tensor b;  // scalar
};

/// u_hat = u + (m(w^T u) - w^T u) w / |w|^2 with m(a) = -1 + margin + softplus(a), so
/// w^T u_hat >= -1 + margin even where softplus underflows.
inline constexpr double kPlanarMargin = 1e-6;
Tensor planar_u_hat(const Tensor& u, const Tensor& w);

FlowOutput planar_forward(const Tensor& z, const PlanarParams& p);

// ---------------------------------------------------------------------------------------------
// Orthogonal Sylvester: f(z) = z + Q R1 tanh(R2 Q^T z + b)

struct SylvesterParams {
  Tensor q;   // [D x M], orthonormal columns
  Tensor r1;  // [M x M], upper triangular
  Tensor r2;  // [M x M], upper triangular
  Tensor b;   // [M]
};

/// Upper triangle of `raw` with the diagonal mapped to kSquashBound * tanh(raw_ii). The bound
/// sits below 1 so that saturated tanh still leaves every r1_ii * r2_ii > -1.
inline constexpr double kSquashBound = 1.0 - 1e-6;
Tensor squash_triangular(const Tensor& raw);

/// Builds constrained parameters from unconstrained ones (orthonormalizes q_raw).
SylvesterParams make_sylvester_params(const Tensor& q_raw, const Tensor& r1_raw, const Tensor& r2_raw,
                                      const Tensor& b);

/// log_det uses det(I + diag(h') R2 R1) = prod_i (1 + h'_i r1_ii r2_ii) for triangular R1, R2.
/// Throws if Q^T Q deviates from I by more than 1e-4 or a diagonal product is <= -1.
FlowOutput sylvester_forward(const Tensor& z, const SylvesterParams& p);

/// Unconstrained Sylvester map f(z) = z + A tanh(B z + b), A [D x M], B [M x D]. The log-det
/// goes through the Sylvester determinant identity det(I_D + A H B) = det(I_M + H B A) and a
/// dense M x M log|det|.
FlowOutput sylvester_general_forward(const Tensor& z, const Tensor& a, const Tensor& bmat, const Tensor& b);

// ---------------------------------------------------------------------------------------------
// Affine coupling: identity on one half, z_half * exp(s) + t on the other.

enum class Parity {
  first_identity,   // z[0, D/2) passes through, z[D/2, D) is transformed
  second_identity,  // z[D/2, D) passes through, z[0, D/2) is transformed
};

Parity parity_for_step(std::size_t step);

struct CouplingParams {
  Tensor s;  // [D/2]
  Tensor t;  // [D/2]
  Parity parity = Parity::first_identity;
};

FlowOutput coupling_forward(const Tensor& z, const CouplingParams& p);
Tensor coupling_inverse(const Tensor& z_out, const CouplingParams& p);

/// Half of z that passes through unchanged under `parity`.
Tensor identity_half(const Tensor& z, Parity parity);

/// Amortized coupling step: [s_raw; t] = identity_half(z) W + context, s = bound * tanh(s_raw / bound).
struct CouplingStep {
  Tensor weight;   // [D/2 x D]
  Tensor context;  // [D], data-dependent part of the affine map
  Parity parity = Parity::first_identity;
};

inline constexpr double kCouplingScaleBound = 4.0;

CouplingParams coupling_condition(const CouplingStep& step, const Tensor& z);

// ---------------------------------------------------------------------------------------------

using FlowStep = std::variant<PlanarParams, SylvesterParams, CouplingStep>;

struct FlowStack {
  FlowKind kind = FlowKind::planar;
  std::vector<FlowStep> steps;

  std::size_t size() const { return steps.size(); }
};

/// One reparameterized posterior sample pushed through the stack.
struct LatentDraw {
  Tensor z0;
  Tensor zk;
  Tensor log_q;  // log q0(z0) - sum_k log_det_k
};

FlowOutput apply_step(const Tensor& z, const FlowStep& step);

LatentDraw stack_forward(const Tensor& z0, const Tensor& log_q0, const FlowStack& stack);

}  // namespace vnmt

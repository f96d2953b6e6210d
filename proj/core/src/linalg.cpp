#include "vnmt/linalg.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "vnmt/ops.hpp"

namespace vnmt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMat to_eigen(const Tensor& t) {
  return Eigen::Map<const RowMat>(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                                  static_cast<Eigen::Index>(t.cols()));
}

RowMat gram(const Tensor& q) {
  const RowMat m = to_eigen(q);
  return m.transpose() * m;
}

}  // namespace

double orthonormality_error(const Tensor& q) {
  const RowMat g = gram(q);
  return (g - RowMat::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff();
}

Tensor orthonormalize(const Tensor& raw, const OrthoOptions& options) {
  if (raw.rank() != 2 || raw.cols() > raw.rows()) {
    throw ShapeError("orthonormalize: expected D x M with M <= D, got " + shape_str(raw.shape()));
  }
  const auto m = raw.cols();
  // Scale so the largest singular value is at most 1: sigma_max^2 <= ||Q^T Q||_inf.
  // The scale is 1 for an orthonormal input, which keeps the procedure idempotent.
  const RowMat g0 = gram(raw);
  const double bound = g0.cwiseAbs().rowwise().sum().maxCoeff();
  if (!(bound > 0.0) || !std::isfinite(bound)) throw RankError("orthonormalize: zero or non-finite input");
  Tensor q = bound > 1.0 ? ops::scale(raw, 1.0 / std::sqrt(bound)) : raw;

  // Converge well past the tolerance; the iteration is quadratic near the fixed point.
  const double target = std::min(options.tolerance, 1e-13);
  const Tensor three_i = ops::scale(Tensor::identity(m), 3.0);
  for (int it = 0; it < options.max_iterations; ++it) {
    if (orthonormality_error(q) <= target) break;
    const Tensor qtq = ops::matmul(ops::transpose(q), q);
    q = ops::scale(ops::matmul(q, ops::sub(three_i, qtq)), 0.5);
  }

  if (orthonormality_error(q) > options.tolerance) {
    const RowMat g = gram(q);
    Eigen::Index worst = 0;
    double worst_dev = -1.0;
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const double dev = std::fabs(g(i, i) - 1.0);
      if (dev > worst_dev) {
        worst_dev = dev;
        worst = i;
      }
    }
    throw RankError("orthonormalize: no convergence after " + std::to_string(options.max_iterations) +
                    " iterations; column " + std::to_string(worst) + " is rank-deficient (|q^T q - 1| = " +
                    std::to_string(worst_dev) + ")");
  }
  return q;
}

Tensor log_abs_det(const Tensor& m) {
  if (m.rank() != 2 || m.rows() != m.cols()) {
    throw ShapeError("log_abs_det: expected a square matrix, got " + shape_str(m.shape()));
  }
  const auto n = m.rows();
  const RowMat a = to_eigen(m);
  Eigen::PartialPivLU<RowMat> lu(a);
  const RowMat& packed = lu.matrixLU();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < packed.rows(); ++i) {
    const double u = packed(i, i);
    if (u == 0.0) throw RankError("log_abs_det: matrix is exactly singular (zero pivot at " + std::to_string(i) + ")");
    acc += std::log(std::fabs(u));
  }
  return detail::make_result({}, {acc}, {m}, [n, lu](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    const RowMat inv_t = lu.inverse().transpose();
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] += self.grad[0] * inv_t(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  });
}

}  // namespace vnmt

#pragma once

#include <stdexcept>

#include "vnmt/tensor.hpp"

namespace vnmt {

/// Raised when a matrix is singular or too close to rank-deficient for the requested operation.
class RankError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OrthoOptions {
  double tolerance = 1e-6;
  int max_iterations = 50;
};

/// Maps a D x M matrix (M <= D) to one with orthonormal columns by the iterative refinement
/// Q <- Q (3I - Q^T Q) / 2. Recorded on the tape, so gradients flow through every iteration.
/// Inputs that are already orthonormal to machine precision come back unchanged.
Tensor orthonormalize(const Tensor& raw, const OrthoOptions& options = {});

/// max |Q^T Q - I| over entries.
double orthonormality_error(const Tensor& q);

/// log |det M| through LU with partial pivoting. Differentiable: d/dM = M^{-T}.
Tensor log_abs_det(const Tensor& m);

}  // namespace vnmt

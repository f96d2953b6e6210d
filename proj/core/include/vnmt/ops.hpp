#pragma once

#include <span>
#include <vector>

#include "vnmt/tensor.hpp"

// Differentiable primitives. Shapes are exact: the only broadcasts are the named ones
// (add_row, broadcast_rows, scale_by, the scalar-constant helpers).
namespace vnmt::ops {

// elementwise, identical shapes
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);
/// a * s where s is a rank-0 tensor.
Tensor scale_by(const Tensor& a, const Tensor& s);

Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
/// Subgradient 0 at the kink.
Tensor abs(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);

// linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);
/// A [m x n] times x [n] -> [m]
Tensor matvec(const Tensor& a, const Tensor& x);
/// x [m] times W [m x n] -> [n]
Tensor vecmat(const Tensor& x, const Tensor& w);
Tensor transpose(const Tensor& a);

// layout
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts);
Tensor slice(const Tensor& a, std::size_t offset, std::size_t length);
Tensor row(const Tensor& a, std::size_t r);
Tensor stack_rows(const std::vector<Tensor>& rows);
/// X [R x C] + b [C] for every row.
Tensor add_row(const Tensor& x, const Tensor& b);
/// v [C] repeated into [R x C].
Tensor broadcast_rows(const Tensor& v, std::size_t rows);
/// X [R x C] with row r scaled by v[r].
Tensor scale_rows(const Tensor& x, const Tensor& v);
Tensor diag(const Tensor& m);
Tensor diag_embed(const Tensor& v);

// sequence-model blocks
/// Rows of table [V x d] selected by ids.
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor log_softmax_rows(const Tensor& x);
/// out[r] = x[r, index[r]]
Tensor pick(const Tensor& x, std::span<const int> index);

struct AttentionMask {
  bool causal = false;
  /// Empty means every key is visible; otherwise one flag per key row.
  std::vector<bool> key_valid;
};

/// Multi-head scaled dot-product attention on pre-projected Q [Tq x d], K, V [Tk x d].
/// Heads are contiguous column blocks of width d / heads.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const AttentionMask& mask);

}  // namespace vnmt::ops

#include "vnmt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace vnmt::ops {

using detail::make_result;
using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MutMap as_mut(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

// Elementwise unary op; `deriv(x, y)` is dy/dx.
template <class F, class D>
Tensor unary(const Tensor& a, F f, D deriv) {
  std::vector<double> out(a.numel());
  const auto in = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(a.shape(), std::move(out), {a}, [deriv](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  });
}

double stable_softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = parent(self, k);
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (auto& p = parent(self, 0); p.requires_grad) {
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (auto& p = parent(self, 1); p.requires_grad) {
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same("div", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] / b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / pb.value[i];
    }
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1 || s.rank() != 0) throw ShapeError("scale_by", a.shape(), s.shape());
  const double k = s.item();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * k;
  return make_result(a.shape(), std::move(out), {a, s}, [](Node& self) {
    auto& pa = parent(self, 0);
    auto& ps = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ps.value[0];
    }
    if (ps.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa.value[i];
      ps.grad_buffer()[0] += acc;
    }
  });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(a, stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make_result({}, {acc}, {a}, [](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    for (auto& g : p.grad_buffer()) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor " + shape_str(a.shape()));
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_same("dot", a, b);
  require_rank("dot", a, 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.values()[i] * b.values()[i];
  return make_result({}, {acc}, {a, b}, [](Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    const double g0 = self.grad[0];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * pa.value[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.cols() != b.rows()) throw ShapeError("matmul", a.shape(), b.shape());
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  as_mut(out, m, n).noalias() = as_mat(a.node_ptr()->value, m, k) * as_mat(b.node_ptr()->value, k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    const auto g = as_mat(self.grad, m, n);
    if (pa.requires_grad) as_mut(pa.grad_buffer(), m, k).noalias() += g * as_mat(pb.value, k, n).transpose();
    if (pb.requires_grad) as_mut(pb.grad_buffer(), k, n).noalias() += as_mat(pa.value, m, k).transpose() * g;
  });
}

Tensor matvec(const Tensor& a, const Tensor& x) {
  require_rank("matvec", a, 2);
  require_rank("matvec", x, 1);
  if (a.cols() != x.numel()) throw ShapeError("matvec", a.shape(), x.shape());
  const auto m = a.rows(), n = a.cols();
  std::vector<double> out(m);
  as_mut(out, m, 1).noalias() = as_mat(a.node_ptr()->value, m, n) * as_mat(x.node_ptr()->value, n, 1);
  return make_result({m}, std::move(out), {a, x}, [m, n](Node& self) {
    auto& pa = parent(self, 0);
    auto& px = parent(self, 1);
    const auto g = as_mat(self.grad, m, 1);
    if (pa.requires_grad) as_mut(pa.grad_buffer(), m, n).noalias() += g * as_mat(px.value, 1, n);
    if (px.requires_grad) as_mut(px.grad_buffer(), n, 1).noalias() += as_mat(pa.value, m, n).transpose() * g;
  });
}

Tensor vecmat(const Tensor& x, const Tensor& w) {
  require_rank("vecmat", x, 1);
  require_rank("vecmat", w, 2);
  if (w.rows() != x.numel()) throw ShapeError("vecmat", x.shape(), w.shape());
  const auto m = w.rows(), n = w.cols();
  std::vector<double> out(n);
  as_mut(out, 1, n).noalias() = as_mat(x.node_ptr()->value, 1, m) * as_mat(w.node_ptr()->value, m, n);
  return make_result({n}, std::move(out), {x, w}, [m, n](Node& self) {
    auto& px = parent(self, 0);
    auto& pw = parent(self, 1);
    const auto g = as_mat(self.grad, 1, n);
    if (px.requires_grad) as_mut(px.grad_buffer(), 1, m).noalias() += g * as_mat(pw.value, m, n).transpose();
    if (pw.requires_grad) as_mut(pw.grad_buffer(), m, n).noalias() += as_mat(px.value, m, 1) * g;
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const auto m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  as_mut(out, n, m) = as_mat(a.node_ptr()->value, m, n).transpose();
  return make_result({n, m}, std::move(out), {a}, [m, n](Node& self) {
    auto& p = parent(self, 0);
    if (p.requires_grad) as_mut(p.grad_buffer(), m, n) += as_mat(self.grad, n, m).transpose();
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  return make_result(std::move(shape), a.to_vector(), {a}, [](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts) {
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.rank() > 1) throw ShapeError("concat: expected vectors, got " + shape_str(p.shape()));
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  const auto n = out.size();
  return make_result({n}, std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& pp : self.parents) {
      const auto len = pp->value.size();
      if (pp->requires_grad) {
        auto& g = pp->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

Tensor slice(const Tensor& a, std::size_t offset, std::size_t length) {
  require_rank("slice", a, 1);
  if (offset + length > a.numel()) {
    throw ShapeError("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                     ") outside " + shape_str(a.shape()));
  }
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(offset),
                          a.values().begin() + static_cast<std::ptrdiff_t>(offset + length));
  return make_result({length}, std::move(out), {a}, [offset](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
  });
}

Tensor row(const Tensor& a, std::size_t r) {
  require_rank("row", a, 2);
  if (r >= a.rows()) throw ShapeError("row: index " + std::to_string(r) + " outside " + shape_str(a.shape()));
  const auto c = a.cols();
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(r * c),
                          a.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
  return make_result({c}, std::move(out), {a}, [r, c](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < c; ++i) g[r * c + i] += self.grad[i];
  });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const auto c = rows.front().numel();
  std::vector<double> out;
  out.reserve(rows.size() * c);
  for (const auto& r : rows) {
    if (r.rank() != 1 || r.numel() != c) throw ShapeError("stack_rows", rows.front().shape(), r.shape());
    out.insert(out.end(), r.values().begin(), r.values().end());
  }
  return make_result({rows.size(), c}, std::move(out), rows, [c](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < c; ++i) g[i] += self.grad[k * c + i];
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& b) {
  require_rank("add_row", x, 2);
  require_rank("add_row", b, 1);
  if (x.cols() != b.numel()) throw ShapeError("add_row", x.shape(), b.shape());
  const auto r = x.rows(), c = x.cols();
  std::vector<double> out(x.to_vector());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b.values()[j];
  return make_result(x.shape(), std::move(out), {x, b}, [r, c](Node& self) {
    auto& px = parent(self, 0);
    auto& pb = parent(self, 1);
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
    }
  });
}

Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  require_rank("broadcast_rows", v, 1);
  const auto c = v.numel();
  std::vector<double> out(rows * c);
  for (std::size_t i = 0; i < rows; ++i) std::copy(v.values().begin(), v.values().end(), out.begin() + static_cast<std::ptrdiff_t>(i * c));
  return make_result({rows, c}, std::move(out), {v}, [rows, c](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& v) {
  require_rank("scale_rows", x, 2);
  require_rank("scale_rows", v, 1);
  if (x.rows() != v.numel()) throw ShapeError("scale_rows", x.shape(), v.shape());
  const auto r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] * v.values()[i];
  return make_result(x.shape(), std::move(out), {x, v}, [r, c](Node& self) {
    auto& px = parent(self, 0);
    auto& pv = parent(self, 1);
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] * pv.value[i];
    }
    if (pv.requires_grad) {
      auto& g = pv.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i] += self.grad[i * c + j] * px.value[i * c + j];
    }
  });
}

Tensor diag(const Tensor& m) {
  require_rank("diag", m, 2);
  if (m.rows() != m.cols()) throw ShapeError("diag: expected a square matrix, got " + shape_str(m.shape()));
  const auto n = m.rows();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = m.values()[i * n + i];
  return make_result({n}, std::move(out), {m}, [n](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[i * n + i] += self.grad[i];
  });
}

Tensor diag_embed(const Tensor& v) {
  require_rank("diag_embed", v, 1);
  const auto n = v.numel();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = v.values()[i];
  return make_result({n, n}, std::move(out), {v}, [n](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i * n + i];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank("embedding", table, 2);
  const auto v = table.rows(), d = table.cols();
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t t = 0; t < idx.size(); ++t) {
    if (idx[t] < 0 || static_cast<std::size_t>(idx[t]) >= v) {
      throw std::out_of_range("embedding: token id " + std::to_string(idx[t]) + " outside vocabulary of " +
                              std::to_string(v));
    }
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(idx[t] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  return make_result({idx.size(), d}, std::move(out), {table}, [idx, d](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t t = 0; t < idx.size(); ++t)
      for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idx[t]) * d + j] += self.grad[t * d + j];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank("layer_norm", x, 2);
  if (gain.shape() != Shape{x.cols()}) throw ShapeError("layer_norm", x.shape(), gain.shape());
  if (bias.shape() != Shape{x.cols()}) throw ShapeError("layer_norm", x.shape(), bias.shape());
  const auto r = x.rows(), c = x.cols();
  std::vector<double> xhat(r * c), inv_std(r), out(r * c);
  const auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv[i * c + j] - mu) * (xv[i * c + j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xv[i * c + j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gain.values()[j] + bias.values()[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias}, [r, c, xhat, inv_std](Node& self) {
    auto& px = parent(self, 0);
    auto& pg = parent(self, 1);
    auto& pb = parent(self, 2);
    const auto& go = self.grad;
    if (pg.requires_grad || pb.requires_grad) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          if (pg.requires_grad) pg.grad_buffer()[j] += go[i * c + j] * xhat[i * c + j];
          if (pb.requires_grad) pb.grad_buffer()[j] += go[i * c + j];
        }
    }
    if (!px.requires_grad) return;
    auto& gx = px.grad_buffer();
    const double inv_c = 1.0 / static_cast<double>(c);
    for (std::size_t i = 0; i < r; ++i) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double dxh = go[i * c + j] * pg.value[j];
        s1 += dxh;
        s2 += dxh * xhat[i * c + j];
      }
      for (std::size_t j = 0; j < c; ++j) {
        const double dxh = go[i * c + j] * pg.value[j];
        gx[i * c + j] += inv_std[i] * (dxh - inv_c * s1 - xhat[i * c + j] * inv_c * s2);
      }
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_rank("log_softmax_rows", x, 2);
  const auto r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  const auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, xv[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(xv[i * c + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] - lse;
  }
  return make_result(x.shape(), std::move(out), {x}, [r, c](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] - std::exp(self.value[i * c + j]) * gs;
    }
  });
}

Tensor pick(const Tensor& x, std::span<const int> index) {
  require_rank("pick", x, 2);
  if (index.size() != x.rows()) {
    throw ShapeError("pick: " + std::to_string(index.size()) + " indices for " + shape_str(x.shape()));
  }
  const auto r = x.rows(), c = x.cols();
  std::vector<int> idx(index.begin(), index.end());
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= c) {
      throw std::out_of_range("pick: index " + std::to_string(idx[i]) + " outside " + shape_str(x.shape()));
    }
    out[i] = x.values()[i * c + static_cast<std::size_t>(idx[i])];
  }
  return make_result({r}, std::move(out), {x}, [idx, c](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * c + static_cast<std::size_t>(idx[i])] += self.grad[i];
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const AttentionMask& mask) {
  require_rank("attention", q, 2);
  require_rank("attention", k, 2);
  require_rank("attention", v, 2);
  if (k.shape() != v.shape()) throw ShapeError("attention(keys, values)", k.shape(), v.shape());
  if (q.cols() != k.cols()) throw ShapeError("attention(queries, keys)", q.shape(), k.shape());
  const auto tq = q.rows(), tk = k.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible into " + std::to_string(heads) + " heads");
  }
  if (!mask.key_valid.empty() && mask.key_valid.size() != tk) {
    throw ShapeError("attention: key mask of length " + std::to_string(mask.key_valid.size()) + " for " +
                     std::to_string(tk) + " keys");
  }
  const auto dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto visible = [&](std::size_t i, std::size_t j) {
    if (mask.causal && j > i) return false;
    return mask.key_valid.empty() || mask.key_valid[j];
  };

  // probs[h][i * tk + j]
  std::vector<double> probs(heads * tq * tk, 0.0);
  std::vector<double> out(tq * d, 0.0);
  const auto qv = q.values(), kv = k.values(), vv = v.values();
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      double* p = &probs[(h * tq + i) * tk];
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < tk; ++j) {
        if (!visible(i, j)) continue;
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) s += qv[i * d + off + e] * kv[j * d + off + e];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) {
        throw std::invalid_argument("attention: query " + std::to_string(i) + " has no visible key");
      }
      double z = 0.0;
      for (std::size_t j = 0; j < tk; ++j) {
        if (!visible(i, j)) { p[j] = 0.0; continue; }
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < tk; ++j) p[j] /= z;
      for (std::size_t j = 0; j < tk; ++j) {
        if (p[j] == 0.0) continue;
        for (std::size_t e = 0; e < dh; ++e) out[i * d + off + e] += p[j] * vv[j * d + off + e];
      }
    }
  }

  return make_result({tq, d}, std::move(out), {q, k, v},
                     [probs = std::move(probs), heads, tq, tk, d, dh, inv_sqrt](Node& self) {
    auto& pq = parent(self, 0);
    auto& pk = parent(self, 1);
    auto& pv = parent(self, 2);
    const auto& go = self.grad;
    std::vector<double> dp(tk);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto off = h * dh;
      for (std::size_t i = 0; i < tq; ++i) {
        const double* p = &probs[(h * tq + i) * tk];
        double dot_pd = 0.0;
        for (std::size_t j = 0; j < tk; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += go[i * d + off + e] * pv.value[j * d + off + e];
          dp[j] = s;
          dot_pd += s * p[j];
        }
        for (std::size_t j = 0; j < tk; ++j) {
          if (p[j] == 0.0) continue;
          if (pv.requires_grad) {
            auto& gv = pv.grad_buffer();
            for (std::size_t e = 0; e < dh; ++e) gv[j * d + off + e] += p[j] * go[i * d + off + e];
          }
          const double ds = p[j] * (dp[j] - dot_pd) * inv_sqrt;
          if (pq.requires_grad) {
            auto& gq = pq.grad_buffer();
            for (std::size_t e = 0; e < dh; ++e) gq[i * d + off + e] += ds * pk.value[j * d + off + e];
          }
          if (pk.requires_grad) {
            auto& gk = pk.grad_buffer();
            for (std::size_t e = 0; e < dh; ++e) gk[j * d + off + e] += ds * pq.value[i * d + off + e];
          }
        }
      }
    }
  });
}

}  // namespace vnmt::ops

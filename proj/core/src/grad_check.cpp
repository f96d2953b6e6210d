#include "vnmt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vnmt {

namespace {

double eval_finite(const std::function<Tensor()>& f) {
  const double v = f().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

}  // namespace

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw std::invalid_argument("grad_check: eps must be positive");
  auto leaves = params;
  for (auto& p : leaves) {
    if (!p.is_leaf() || !p.requires_grad()) {
      throw std::invalid_argument("grad_check: parameters must be leaves that require gradients");
    }
    p.zero_grad();
  }
  const Tensor out = f();
  if (!std::isfinite(out.item())) throw NumericError("grad_check: function value is not finite");
  backward(out);

  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& p : leaves) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = eval_finite(f);
      values[i] = saved - eps;
      const double down = eval_finite(f);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      if (!std::isfinite(a)) throw NumericError("grad_check: analytic gradient is not finite");
      worst = std::max(worst, std::fabs(a - numeric));
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = Tensor::from(x.shape(), x.to_vector(), true);
  return grad_check([&] { return f(leaf); }, std::vector<Tensor>{leaf}, eps);
}

}  // namespace vnmt

#include "qcnmt/grad_check.hpp"

#include <cmath>
#include <stdexcept>

#include "qcnmt/ops.hpp"

namespace qcnmt {

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  double epsilon) {
  if (epsilon <= 0.0) throw std::runtime_error("grad_check: epsilon must be positive");

  Tensor out = f();
  if (out.numel() != 1) throw std::runtime_error("grad_check: f must be scalar-valued");
  if (!std::isfinite(out.item())) throw std::runtime_error("grad_check: f is not finite");
  backward(out);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    if (!p.requires_grad()) throw std::runtime_error("grad_check: parameter does not require grad");
    analytic.push_back(p.grad());
  }

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto& v = p.values_mut();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      double plus, minus;
      {
        NoGradGuard ng;
        v[i] = saved + epsilon;
        plus = f().item();
        v[i] = saved - epsilon;
        minus = f().item();
        v[i] = saved;
      }
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw std::runtime_error("grad_check: f is not finite near the evaluation point");
      }
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double err = std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace qcnmt

#include "constcl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace constcl {

double gradcheck(const TensorFn& fn, const std::vector<Tensor>& inputs, double eps) {
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].dtype() != DType::F64)
      throw std::invalid_argument("gradcheck: input " + std::to_string(i) + " must be f64");
    Tensor leaf = inputs[i].detach();
    leaf.mark_trainable("gradcheck_in" + std::to_string(i));
    leaves.push_back(leaf);
  }

  Tensor loss = fn(leaves);
  if (loss.numel() != 1)
    throw std::invalid_argument("gradcheck: fn must return a scalar, got shape " +
                                shape_str(loss.shape()));
  GradMap grads = backward(loss, leaves);

  double max_rel = 0.0;
  for (auto& leaf : leaves) {
    const Tensor& analytic = grads.at(leaf);
    std::vector<double> values = leaf.to_f64();
    for (size_t k = 0; k < values.size(); ++k) {
      const double orig = values[k];
      values[k] = orig + eps;
      leaf.overwrite_data(values);
      const double fplus = fn(leaves).item();
      values[k] = orig - eps;
      leaf.overwrite_data(values);
      const double fminus = fn(leaves).item();
      values[k] = orig;
      leaf.overwrite_data(values);
      const double fd = (fplus - fminus) / (2.0 * eps);
      const double a = analytic.at(static_cast<int64_t>(k));
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace constcl

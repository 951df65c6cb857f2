#pragma once

#include <functional>
#include <vector>

#include "constcl/tensor.hpp"

namespace constcl {

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Central-difference check of reverse-mode gradients. `fn` must map the given
// f64 inputs to a scalar. Returns the max over all coordinates of
//   |analytic - fd| / max(|analytic|, |fd|, 1e-8).
double gradcheck(const TensorFn& fn, const std::vector<Tensor>& inputs, double eps = 1e-5);

}  // namespace constcl

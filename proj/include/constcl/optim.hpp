#pragma once

#include <cstdint>
#include <unordered_map>

#include "constcl/params.hpp"
#include "constcl/tensor.hpp"

namespace constcl {

struct ScheduleConfig {
  double peak_lr = 0.2;
  int64_t warmup_steps = 50;
  int64_t total_steps = 500;
};

// Linear warmup to peak over warmup_steps, then half-period cosine decay to 0
// at total_steps.
double lr_at_step(int64_t step, const ScheduleConfig& cfg);

struct OptimizerState {
  std::unordered_map<std::string, Tensor> velocity;  // keyed by parameter name
  int64_t step = 0;
};

// g~ = g + weight_decay * w (kernel weights only); v <- momentum * v + g~;
// w <- w - lr * v. Parameters the step's graph never touched are skipped.
void sgd_momentum_step(ParamStore& params, const GradMap& grads, OptimizerState& state, double lr,
                       double momentum, double weight_decay);

}  // namespace constcl

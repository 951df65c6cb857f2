#include "constcl/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace constcl {

double lr_at_step(int64_t step, const ScheduleConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw std::invalid_argument("lr_at_step: step " + std::to_string(step) +
                                " outside [0," + std::to_string(cfg.total_steps) + "]");
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const int64_t decay_span = cfg.total_steps - cfg.warmup_steps;
  if (decay_span <= 0) return cfg.peak_lr;
  const double t = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(decay_span);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

void sgd_momentum_step(ParamStore& params, const GradMap& grads, OptimizerState& state, double lr,
                       double momentum, double weight_decay) {
  for (const auto& entry : params.entries()) {
    if (!grads.touched(entry.tensor)) continue;
    const Tensor& g = grads.at(entry.tensor);
    if (g.shape() != entry.tensor.shape())
      throw std::invalid_argument("sgd: gradient shape " + shape_str(g.shape()) +
                                  " mismatches parameter " + entry.name + " " +
                                  shape_str(entry.tensor.shape()));
    auto vit = state.velocity.find(entry.name);
    if (vit == state.velocity.end())
      vit = state.velocity
                .emplace(entry.name, Tensor::zeros(entry.tensor.shape(), entry.tensor.dtype()))
                .first;
    std::vector<double> w = entry.tensor.to_f64();
    std::vector<double> v = vit->second.to_f64();
    std::vector<double> gv = g.to_f64();
    for (size_t i = 0; i < w.size(); ++i) {
      const double adj = entry.decay ? gv[i] + weight_decay * w[i] : gv[i];
      v[i] = momentum * v[i] + adj;
      w[i] = w[i] - lr * v[i];
    }
    vit->second.overwrite_data(v);
    entry.tensor.overwrite_data(w);
  }
}

}  // namespace constcl

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "constcl/backbone.hpp"
#include "constcl/heads.hpp"
#include "constcl/losses.hpp"
#include "constcl/optim.hpp"
#include "constcl/region.hpp"
#include "constcl/sampling.hpp"

namespace constcl {

struct ModelConfig {
  BackboneConfig backbone;
  int64_t global_hidden = 128;
  int64_t global_out = 128;
  int64_t region_hidden = 128;
  AttentionSpec attention{3, 3, 126, 4};
  int64_t roialign_bins = 4;
  uint64_t seed = 0;
  DType dtype = DType::F32;
};

// Backbone plus the three projection heads over one parameter store. Both
// region heads always exist (context_length routing picks one at step time),
// so the parameter set is identical across loss modes.
struct Model {
  ModelConfig cfg;
  ParamStore params;
  Backbone backbone;
  GlobalHead global_head;
  VanillaRegionHead vanilla_head;
  ContextHead context_head;

  explicit Model(const ModelConfig& cfg);

  EndpointSet forward_clips(const Tensor& clips, const std::vector<ClipMeta>& meta,
                            bool training = true);
};

struct TrainConfig {
  ScheduleConfig schedule;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  int64_t batch_size = 4;
  uint64_t seed = 0;
  LossConfig loss;
  SamplingConfig sampling;
  RegionGenConfig regions;
};

inline double lr_at_step(int64_t step, const TrainConfig& cfg) {
  return lr_at_step(step, cfg.schedule);
}

// Builds one step's scalar objective (global + weighted region loss) without
// touching parameters. When omega == 0 the region path is skipped entirely.
Tensor training_objective(Model& model, const TrainConfig& cfg,
                          const std::vector<Tensor>& batch_videos, int64_t step,
                          LossReport* report = nullptr);

// One optimization step over a batch of raw videos ([T,H,W,3] each): forward
// both views, global loss on C5_g, region loss on C5_r with cross-video
// negatives, backward, SGD update. With omega == 0 the region path is skipped
// entirely and the region-branch parameters stay untouched.
LossReport train_step(Model& model, OptimizerState& opt, const TrainConfig& cfg,
                      const std::vector<Tensor>& batch_videos);

// Central-difference check of d(objective)/d(theta) over every parameter of
// the model; intended for f64 toy configurations.
double model_objective_gradcheck(Model& model, const TrainConfig& cfg,
                                 const std::vector<Tensor>& batch_videos, double eps = 1e-5);

// Runs `steps` train_steps with deterministic batch selection from `dataset`;
// appends one JSON line per step to `log` when given.
std::vector<LossReport> train_loop(Model& model, OptimizerState& opt, const TrainConfig& cfg,
                                   const std::vector<Tensor>& dataset, int64_t steps,
                                   std::ostream* log = nullptr);

std::string loss_report_jsonl(const LossReport& report);

// Checkpoint directory: manifest.json (name -> offset/shape/dtype, plus the
// step counter) and tensors.bin holding CSTT records at those offsets.
// save -> load -> save is byte-identical.
void checkpoint_save(const std::string& dir, const Model& model, const OptimizerState& opt);
void checkpoint_load(const std::string& dir, Model& model, OptimizerState& opt);

}  // namespace constcl

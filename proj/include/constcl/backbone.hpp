#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "constcl/nn.hpp"
#include "constcl/params.hpp"
#include "constcl/tensor.hpp"

namespace constcl {

// Maps a feature (or input) frame index t to the source video frame
// source_start + t * frame_stride.
struct ClipMeta {
  int64_t source_start = 0;
  int64_t frame_stride = 1;
};

struct FeatureMap {
  Tensor values;               // [N,T,H,W,C]
  std::vector<ClipMeta> meta;  // one entry per sample

  int64_t frames() const { return values.shape()[1]; }
  int64_t video_frame_of(int64_t sample, int64_t t) const;
  // inverse of video_frame_of; throws if the frame is not on this map's grid
  int64_t feature_index_of(int64_t sample, int64_t video_frame) const;
};

struct EndpointSet {
  FeatureMap c4;
  FeatureMap c5_g;
  FeatureMap c5_r;
};

struct StageSpec {
  int64_t width = 0;
  int64_t blocks = 1;
  int64_t stride_t = 1;
  int64_t stride_s = 1;
};

struct BackboneConfig {
  int64_t in_channels = 3;
  StageSpec stem{8, 0, 1, 2};  // plain conv + norm + relu
  std::vector<StageSpec> stages{{16, 1, 2, 2}, {32, 1, 2, 2}, {32, 1, 1, 1}};  // trunk -> C4
  StageSpec branch{64, 1, 1, 1};  // replicated for C5_g and C5_r
  NormMode norm = NormMode::Group;
  int64_t groups = 4;
};

// Shared trunk through C4, then two structurally identical res5 branches with
// independently initialized parameters (prefixes "res5g." / "res5r.").
class Backbone {
 public:
  Backbone(ParamStore& params, const BackboneConfig& cfg);

  EndpointSet forward(const Tensor& clips, const std::vector<ClipMeta>& input_meta,
                      bool training = true);

  int64_t trunk_temporal_stride() const;   // input frame -> C4 frame
  int64_t branch_temporal_stride() const;  // input frame -> C5 frame
  int64_t c4_channels() const { return cfg_.stages.back().width; }
  int64_t c5_channels() const { return cfg_.branch.width; }
  const BackboneConfig& config() const { return cfg_; }

 private:
  struct ConvLayer {
    ConvSpec spec;
    Tensor w, b;
  };
  struct Block {
    ConvLayer conv1, conv2;
    NormState norm1, norm2;
    std::optional<ConvLayer> proj;
    std::optional<NormState> proj_norm;
  };

  ConvLayer make_conv(ParamStore& params, const std::string& name, const ConvSpec& spec);
  std::vector<Block> make_stage(ParamStore& params, const std::string& prefix,
                                const StageSpec& spec, int64_t in_ch);
  Tensor run_stage(std::vector<Block>& stage, const Tensor& x, bool training);

  BackboneConfig cfg_;
  ConvLayer stem_;
  NormState stem_norm_;
  std::vector<std::vector<Block>> trunk_;
  std::vector<Block> branch_g_, branch_r_;
};

}  // namespace constcl

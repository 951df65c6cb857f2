#include "constcl/backbone.hpp"

#include <stdexcept>

namespace constcl {

int64_t FeatureMap::video_frame_of(int64_t sample, int64_t t) const {
  const ClipMeta& m = meta[static_cast<size_t>(sample)];
  return m.source_start + t * m.frame_stride;
}

int64_t FeatureMap::feature_index_of(int64_t sample, int64_t video_frame) const {
  const ClipMeta& m = meta[static_cast<size_t>(sample)];
  const int64_t off = video_frame - m.source_start;
  if (off < 0 || off % m.frame_stride != 0 || off / m.frame_stride >= frames())
    throw std::invalid_argument("FeatureMap: video frame " + std::to_string(video_frame) +
                                " is out of range of this map");
  return off / m.frame_stride;
}

Backbone::ConvLayer Backbone::make_conv(ParamStore& params, const std::string& name,
                                        const ConvSpec& spec) {
  ConvLayer layer;
  layer.spec = spec;
  const int64_t fan_in = spec.kt * spec.kh * spec.kw * spec.in_ch;
  layer.w = params.create(name + ".w", {spec.kt, spec.kh, spec.kw, spec.in_ch, spec.out_ch},
                          Init::FanInUniform, fan_in, true);
  // every conv here feeds a norm layer, which absorbs any bias
  layer.b = Tensor::zeros({spec.out_ch}, params.dtype());
  return layer;
}

std::vector<Backbone::Block> Backbone::make_stage(ParamStore& params, const std::string& prefix,
                                                  const StageSpec& spec, int64_t in_ch) {
  if (spec.width < 1 || spec.blocks < 1 || spec.stride_t < 1 || spec.stride_s < 1)
    throw std::invalid_argument("backbone: invalid stage spec at " + prefix);
  if (spec.width % cfg_.groups != 0 && cfg_.norm == NormMode::Group)
    throw std::invalid_argument("backbone: stage width " + std::to_string(spec.width) +
                                " not divisible by " + std::to_string(cfg_.groups) + " groups");
  std::vector<Block> blocks;
  int64_t cin = in_ch;
  for (int64_t b = 0; b < spec.blocks; ++b) {
    const std::string p = prefix + ".block" + std::to_string(b);
    const int64_t st = b == 0 ? spec.stride_t : 1;
    const int64_t ss = b == 0 ? spec.stride_s : 1;
    Block blk;
    ConvSpec c1{3, 3, 3, st, ss, ss, 1, 1, 1, cin, spec.width};
    ConvSpec c2{3, 3, 3, 1, 1, 1, 1, 1, 1, spec.width, spec.width};
    blk.conv1 = make_conv(params, p + ".conv1", c1);
    blk.conv2 = make_conv(params, p + ".conv2", c2);
    blk.norm1 = make_norm_state(params, p + ".norm1", spec.width, cfg_.norm, cfg_.groups);
    blk.norm2 = make_norm_state(params, p + ".norm2", spec.width, cfg_.norm, cfg_.groups);
    if (cin != spec.width || st != 1 || ss != 1) {
      ConvSpec proj{1, 1, 1, st, ss, ss, 0, 0, 0, cin, spec.width};
      blk.proj = make_conv(params, p + ".proj", proj);
      blk.proj_norm = make_norm_state(params, p + ".proj_norm", spec.width, cfg_.norm, cfg_.groups);
    }
    blocks.push_back(std::move(blk));
    cin = spec.width;
  }
  return blocks;
}

Backbone::Backbone(ParamStore& params, const BackboneConfig& cfg) : cfg_(cfg) {
  if (cfg_.stages.empty()) throw std::invalid_argument("backbone: no trunk stages");
  if (cfg_.norm == NormMode::Group && cfg_.stem.width % cfg_.groups != 0)
    throw std::invalid_argument("backbone: stem width not divisible by groups");
  ConvSpec stem_spec{3, 3,
                     3, cfg_.stem.stride_t,
                     cfg_.stem.stride_s, cfg_.stem.stride_s,
                     1, 1,
                     1, cfg_.in_channels,
                     cfg_.stem.width};
  stem_ = make_conv(params, "stem.conv", stem_spec);
  stem_norm_ = make_norm_state(params, "stem.norm", cfg_.stem.width, cfg_.norm, cfg_.groups);

  int64_t cin = cfg_.stem.width;
  for (size_t s = 0; s < cfg_.stages.size(); ++s) {
    trunk_.push_back(make_stage(params, "stage" + std::to_string(s + 1), cfg_.stages[s], cin));
    cin = cfg_.stages[s].width;
  }
  branch_g_ = make_stage(params, "res5g", cfg_.branch, cin);
  branch_r_ = make_stage(params, "res5r", cfg_.branch, cin);
}

Tensor Backbone::run_stage(std::vector<Block>& stage, const Tensor& x, bool training) {
  Tensor cur = x;
  for (auto& blk : stage) {
    Tensor y = conv3d(cur, blk.conv1.spec, blk.conv1.w, blk.conv1.b);
    y = relu(norm_layer(y, blk.norm1, training));
    y = conv3d(y, blk.conv2.spec, blk.conv2.w, blk.conv2.b);
    y = norm_layer(y, blk.norm2, training);
    Tensor shortcut = cur;
    if (blk.proj) {
      shortcut = conv3d(cur, blk.proj->spec, blk.proj->w, blk.proj->b);
      shortcut = norm_layer(shortcut, *blk.proj_norm, training);
    }
    cur = relu(add(y, shortcut));
  }
  return cur;
}

int64_t Backbone::trunk_temporal_stride() const {
  int64_t s = cfg_.stem.stride_t;
  for (const auto& st : cfg_.stages) s *= st.stride_t;
  return s;
}

int64_t Backbone::branch_temporal_stride() const {
  return trunk_temporal_stride() * cfg_.branch.stride_t;
}

EndpointSet Backbone::forward(const Tensor& clips, const std::vector<ClipMeta>& input_meta,
                              bool training) {
  if (clips.rank() != 5 || clips.shape()[4] != cfg_.in_channels)
    throw std::invalid_argument("backbone: expects [N,T,H,W," + std::to_string(cfg_.in_channels) +
                                "], got " + shape_str(clips.shape()));
  if (input_meta.size() != static_cast<size_t>(clips.shape()[0]))
    throw std::invalid_argument("backbone: clip_meta must cover every sample");

  Tensor x = relu(norm_layer(conv3d(clips, stem_.spec, stem_.w, stem_.b), stem_norm_, training));
  for (auto& stage : trunk_) x = run_stage(stage, x, training);
  Tensor c5g = run_stage(branch_g_, x, training);
  Tensor c5r = run_stage(branch_r_, x, training);

  auto scaled_meta = [&](int64_t accum) {
    std::vector<ClipMeta> out(input_meta);
    for (auto& m : out) m.frame_stride *= accum;
    return out;
  };
  EndpointSet set;
  set.c4 = FeatureMap{x, scaled_meta(trunk_temporal_stride())};
  set.c5_g = FeatureMap{c5g, scaled_meta(branch_temporal_stride())};
  set.c5_r = FeatureMap{c5r, scaled_meta(branch_temporal_stride())};
  return set;
}

}  // namespace constcl

#pragma once

#include <cstdint>
#include <utility>

#include "constcl/backbone.hpp"
#include "constcl/heads.hpp"
#include "constcl/rng.hpp"
#include "constcl/tensor.hpp"

namespace constcl {

struct AugRecord {
  double crop_y0 = 0, crop_x0 = 0;  // normalized crop rectangle
  double crop_h = 1, crop_w = 1;
  bool flip = false;
  int64_t offset = 0;  // temporal offset into the source video
};

struct VideoClip {
  Tensor frames;  // [T,H,W,3] f32 in [0,1]
  int64_t source_start = 0;
  int64_t frame_stride = 1;
};

struct ViewPair {
  VideoClip x, x_prime;
  AugRecord aug_x, aug_x_prime;
};

enum class SliceStrategy { Random, Center, Nearest };

struct SamplingConfig {
  SliceStrategy strategy = SliceStrategy::Center;
  int64_t context_length = 4;
  int64_t clip_len = 16;
  int64_t frame_stride = 2;
  int64_t out_h = 32, out_w = 32;
  double crop_area_min = 0.3, crop_area_max = 1.0;
  double crop_aspect_min = 0.5, crop_aspect_max = 2.0;
  bool flip_enabled = true;
  uint64_t seed = 0;
};

// Two temporally independent clips from one video, each with a single crop
// rectangle, resize, and flip decision applied identically to all its frames.
// The two views draw their augmentations independently.
ViewPair sample_view_pair(const Tensor& video, const SamplingConfig& cfg, uint64_t key);

// Un-augmented clip at a fixed temporal offset (full-frame crop, no flip),
// resized to the configured output size. Used by the evaluation probes.
VideoClip render_identity_clip(const Tensor& video, const SamplingConfig& cfg, int64_t offset);

// Picks the contrastive feature-frame pair. `random`: independent uniform;
// `center`: floor(T/2) in each map; `nearest`: the pair whose mapped video
// frames are closest (exhaustive, ties to the earliest indices), which for
// disjoint clips is the two facing ends.
std::pair<int64_t, int64_t> select_slice_pair(SliceStrategy strategy, const ClipMeta& meta_a,
                                              int64_t frames_a, const ClipMeta& meta_b,
                                              int64_t frames_b, Rng& rng);

// L feature frames centered on `center` (window clamped inside the map); all
// their voxels become context tokens with (t,y,x) feature-grid positions.
// L = 0 returns an empty set.
ContextSet sample_context_frames(const FeatureMap& fmap, int64_t sample, int64_t center,
                                 int64_t context_length);

}  // namespace constcl

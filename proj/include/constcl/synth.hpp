#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "constcl/region.hpp"
#include "constcl/sampling.hpp"
#include "constcl/train.hpp"

namespace constcl {

enum class SpriteShape { Square, Disc, Triangle, Ring };

struct SpriteWorld {
  int64_t canvas_h = 64, canvas_w = 64;
  int64_t sprite_count = 4;
  int64_t frames = 64;
  double half_size_min = 6.0, half_size_max = 10.0;
  double speed_min = 0.5, speed_max = 0.68;
  // sprite i's hue = base_hue + jitter + hue_spread * i / sprite_count; the
  // default is a fixed palette shared by every video, lightly jittered
  double base_hue = 0.0;
  double base_hue_jitter = 0.03;
  double hue_spread = 1.0;
  int64_t direction_classes = 4;
  double direction_jitter = 0.15;  // radians around the shared heading
  double background_contrast = 0.1;
  double background_flicker = 0.0;  // per-frame noise amplitude
  uint64_t texture_seed = 0;
};

struct GtRegion {
  int64_t frame = 0;
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;
  int64_t id = 0;

  Region region() const { return {frame, xmin, ymin, xmax, ymax}; }
};

struct LabeledVideo {
  Tensor frames;  // [T,H,W,3] f32 in [0,1]
  std::vector<GtRegion> regions;  // sprite_count entries per frame
  int64_t label = 0;  // heading sector of the mean velocity
};

// Deterministic moving-sprite rendering: per-video random sprite colors and
// sizes, a shared heading (within force_class's sector when >= 0), border
// reflection, seeded background texture. Ground-truth boxes are the exact
// sprite extents.
LabeledVideo generate_sprite_video(const SpriteWorld& world, uint64_t seed,
                                   int64_t force_class = -1);

// `videos` clips with class-balanced headings (video i forced to class i % K).
std::vector<LabeledVideo> make_sprite_dataset(const SpriteWorld& world, int64_t videos,
                                              uint64_t seed, int64_t threads = 1);

void save_dataset(const std::string& dir, const std::vector<LabeledVideo>& videos,
                  int64_t classes);
std::vector<LabeledVideo> load_dataset(const std::string& dir);

struct EvalConfig {
  int64_t pairs = 200;
  double train_fraction = 0.75;
  int64_t probe_steps = 300;
  double probe_lr = 1.0;
  int64_t track_grid = 16;
  uint64_t seed = 0;
  // correspondence pairs use mild crops/flips (ground-truth boxes are mapped
  // through the augmentation); the linear probe and tracker read identity clips
  SamplingConfig sampling = [] {
    SamplingConfig s;
    s.crop_area_min = 0.5;
    s.crop_area_max = 1.0;
    s.crop_aspect_min = 0.8;
    s.crop_aspect_max = 1.25;
    s.flip_enabled = true;
    return s;
  }();
};

double iou(const Region& a, const Region& b);

// fraction of rows in a whose argmax-cosine match in b carries the same id
double match_accuracy(const Tensor& h_rows_a, const std::vector<int64_t>& ids_a,
                      const Tensor& h_rows_b, const std::vector<int64_t>& ids_b);

// Pools ground-truth regions of two views on C5_r and checks whether argmax
// matching recovers sprite identity. Backbone parameters are left untouched.
double correspondence_accuracy(Model& model, const std::vector<LabeledVideo>& dataset,
                               const EvalConfig& cfg);

// Single linear classifier on frozen pooled C5_g features for the heading
// label; returns held-out accuracy.
double linear_probe_eval(Model& model, const std::vector<LabeledVideo>& dataset,
                         const EvalConfig& cfg);

// Template-matching tracker on one feature map: template pooled at `init`,
// argmax cosine over a grid of same-sized candidate boxes per later frame
// (previous prediction always among the candidates).
std::vector<Region> track_from_map(const FeatureMap& fmap, int64_t sample, const Region& init,
                                   int64_t grid, int64_t bins);

double toy_track_eval(Model& model, const LabeledVideo& video, const Region& init,
                      const EvalConfig& cfg);

}  // namespace constcl

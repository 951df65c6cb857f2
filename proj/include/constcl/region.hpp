#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "constcl/rng.hpp"
#include "constcl/tensor.hpp"

namespace constcl {

// One bounding box on one frame; coordinates normalized to [0,1],
// t is a source-video frame index.
struct Region {
  int64_t t = 0;
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return width() * height(); }
  bool valid() const {
    return 0.0 <= xmin && xmin < xmax && xmax <= 1.0 && 0.0 <= ymin && ymin < ymax && ymax <= 1.0;
  }
};

enum class RegionMethod { Random, Slic, Fh };

struct RegionGenConfig {
  RegionMethod method = RegionMethod::Random;
  int64_t boxes_per_frame = 8;
  double aspect_min = 0.5, aspect_max = 2.0;
  double size_min = 0.1, size_max = 0.5;
  bool size_is_area = true;  // false: sqrt(w*h) fraction instead of area fraction
  int64_t slic_k = 16;
  double slic_compactness = 10.0;
  int64_t slic_iters = 10;
  double fh_scale = 500.0;
  int64_t fh_min_size = 500;
  double filter_lo = 0.05, filter_hi = 0.7;
  uint64_t seed = 0;
};

// Per-pixel labels for one frame; labels are contiguous from 0.
struct SegmentLabels {
  int64_t height = 0, width = 0;
  std::vector<int32_t> labels;
  int32_t num_segments = 0;

  int32_t at(int64_t y, int64_t x) const { return labels[static_cast<size_t>(y * width + x)]; }
};

// Rejection-samples boxes satisfying aspect in [aspect_min, aspect_max] and
// size in [size_min, size_max].
std::vector<Region> gen_random_boxes(int64_t frame_height, int64_t frame_width,
                                     const RegionGenConfig& cfg, Rng& rng, int64_t frame = 0);

// k-means over (rgb, x, y) with distance |color| + (m/S)|xy|, S = sqrt(H*W/k),
// grid-initialized centers, window-restricted assignment, connectivity
// enforced by merging orphan components into the largest adjacent label.
// image: [H,W,3] values row-major.
SegmentLabels slic_segment(std::span<const double> image, int64_t height, int64_t width,
                           int64_t k, double compactness, int64_t iters);

// Felzenszwalb-Huttenlocher graph segmentation on the 8-connected grid with
// Euclidean RGB edge weights, followed by the minimum-size merge pass.
SegmentLabels fh_segment(std::span<const double> image, int64_t height, int64_t width,
                         double scale, int64_t min_size);

// One minimal bounding box per label, keeping only boxes with width and
// height ratios inside [filter_lo, filter_hi].
std::vector<Region> segments_to_boxes(const SegmentLabels& labels, double filter_lo,
                                      double filter_hi, int64_t frame = 0);

// Runs the configured method on one frame image ([H,W,3] in [0,1]).
std::vector<Region> generate_regions(std::span<const double> image, int64_t height, int64_t width,
                                     const RegionGenConfig& cfg, Rng& rng, int64_t frame = 0);

// JSON Lines box files: {"frame": int, "xmin": f, "ymin": f, "xmax": f, "ymax": f}
void write_regions_jsonl(std::ostream& os, const std::vector<Region>& regions);
std::vector<Region> read_regions_jsonl(std::istream& is, const std::string& source_name);

}  // namespace constcl

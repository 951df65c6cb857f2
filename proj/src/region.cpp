#include "constcl/region.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace constcl {

namespace {

using json = nlohmann::json;

// contiguous labels in scan-order of first occurrence
void relabel_contiguous(SegmentLabels& seg) {
  std::vector<int32_t> remap(seg.labels.size(), -1);
  int32_t next = 0;
  for (auto& l : seg.labels) {
    if (remap[static_cast<size_t>(l)] < 0) remap[static_cast<size_t>(l)] = next++;
    l = remap[static_cast<size_t>(l)];
  }
  seg.num_segments = next;
}

struct Dsu {
  std::vector<int32_t> parent;
  std::vector<int64_t> size;
  explicit Dsu(int64_t n) : parent(static_cast<size_t>(n)), size(static_cast<size_t>(n), 1) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int32_t find(int32_t a) {
    while (parent[static_cast<size_t>(a)] != a) {
      parent[static_cast<size_t>(a)] = parent[static_cast<size_t>(parent[static_cast<size_t>(a)])];
      a = parent[static_cast<size_t>(a)];
    }
    return a;
  }
  int32_t unite(int32_t a, int32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return a;
    if (size[static_cast<size_t>(a)] < size[static_cast<size_t>(b)]) std::swap(a, b);
    parent[static_cast<size_t>(b)] = a;
    size[static_cast<size_t>(a)] += size[static_cast<size_t>(b)];
    return a;
  }
};

}  // namespace

std::vector<Region> gen_random_boxes(int64_t frame_height, int64_t frame_width,
                                     const RegionGenConfig& cfg, Rng& rng, int64_t frame) {
  (void)frame_height;
  (void)frame_width;
  std::vector<Region> out;
  out.reserve(static_cast<size_t>(cfg.boxes_per_frame));
  for (int64_t i = 0; i < cfg.boxes_per_frame; ++i) {
    double w = 0, h = 0;
    // rejection sampling; for the paper's ranges the acceptance set is the
    // whole sample space, other configs may need retries
    for (int tries = 0; tries < 1000; ++tries) {
      const double aspect = rng.uniform(cfg.aspect_min, cfg.aspect_max);
      const double size = rng.uniform(cfg.size_min, cfg.size_max);
      if (cfg.size_is_area) {
        w = std::sqrt(size * aspect);
        h = std::sqrt(size / aspect);
      } else {
        w = size * std::sqrt(aspect);
        h = size / std::sqrt(aspect);
      }
      if (w <= 1.0 && h <= 1.0) break;
      w = h = 0;
    }
    if (w == 0) throw std::runtime_error("gen_random_boxes: no feasible box for config");
    Region r;
    r.t = frame;
    r.xmin = rng.uniform(0.0, 1.0 - w);
    r.ymin = rng.uniform(0.0, 1.0 - h);
    r.xmax = r.xmin + w;
    r.ymax = r.ymin + h;
    out.push_back(r);
  }
  return out;
}

// ------------------------------------------------------------------- SLIC

SegmentLabels slic_segment(std::span<const double> image, int64_t height, int64_t width,
                           int64_t k, double compactness, int64_t iters) {
  const int64_t n_pix = height * width;
  if (k < 1 || k > n_pix)
    throw std::invalid_argument("slic: k=" + std::to_string(k) + " exceeds pixel count " +
                                std::to_string(n_pix));
  if (image.size() != static_cast<size_t>(n_pix * 3))
    throw std::invalid_argument("slic: image buffer size mismatch");

  const double S = std::sqrt(static_cast<double>(n_pix) / static_cast<double>(k));

  // grid init: gy x gx cells, first k taken row-major
  int64_t gy = std::max<int64_t>(
      1, std::llround(std::sqrt(static_cast<double>(k) * static_cast<double>(height) /
                                static_cast<double>(width))));
  int64_t gx = (k + gy - 1) / gy;
  struct Center {
    double r, g, b, y, x;
    int64_t count;
  };
  std::vector<Center> centers;
  centers.reserve(static_cast<size_t>(k));
  for (int64_t i = 0; i < gy && static_cast<int64_t>(centers.size()) < k; ++i)
    for (int64_t j = 0; j < gx && static_cast<int64_t>(centers.size()) < k; ++j) {
      const double cy = (static_cast<double>(i) + 0.5) * static_cast<double>(height) /
                        static_cast<double>(gy);
      const double cx = (static_cast<double>(j) + 0.5) * static_cast<double>(width) /
                        static_cast<double>(gx);
      const int64_t py = std::min<int64_t>(height - 1, static_cast<int64_t>(cy));
      const int64_t px = std::min<int64_t>(width - 1, static_cast<int64_t>(cx));
      const double* p = image.data() + (py * width + px) * 3;
      centers.push_back({p[0], p[1], p[2], cy, cx, 0});
    }

  std::vector<int32_t> labels(static_cast<size_t>(n_pix), -1);
  std::vector<double> dist(static_cast<size_t>(n_pix), 0.0);
  const double spatial_w = compactness / S;

  auto assign = [&]() {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    std::fill(labels.begin(), labels.end(), -1);
    for (size_t c = 0; c < centers.size(); ++c) {
      const Center& ct = centers[c];
      const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(ct.y - 2 * S)));
      const int64_t y1 = std::min<int64_t>(height, static_cast<int64_t>(std::ceil(ct.y + 2 * S)));
      const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(ct.x - 2 * S)));
      const int64_t x1 = std::min<int64_t>(width, static_cast<int64_t>(std::ceil(ct.x + 2 * S)));
      for (int64_t y = y0; y < y1; ++y)
        for (int64_t x = x0; x < x1; ++x) {
          const double* p = image.data() + (y * width + x) * 3;
          const double dc = std::sqrt((p[0] - ct.r) * (p[0] - ct.r) +
                                      (p[1] - ct.g) * (p[1] - ct.g) +
                                      (p[2] - ct.b) * (p[2] - ct.b));
          const double dy = static_cast<double>(y) + 0.5 - ct.y;
          const double dx = static_cast<double>(x) + 0.5 - ct.x;
          const double d = dc + spatial_w * std::sqrt(dy * dy + dx * dx);
          const size_t idx = static_cast<size_t>(y * width + x);
          if (d < dist[idx]) {
            dist[idx] = d;
            labels[idx] = static_cast<int32_t>(c);
          }
        }
    }
    // window misses are possible only for badly skewed aspect ratios
    for (int64_t i = 0; i < n_pix; ++i)
      if (labels[static_cast<size_t>(i)] < 0) {
        const int64_t y = i / width, x = i % width;
        const double* p = image.data() + i * 3;
        double best = std::numeric_limits<double>::infinity();
        for (size_t c = 0; c < centers.size(); ++c) {
          const Center& ct = centers[c];
          const double dc = std::sqrt((p[0] - ct.r) * (p[0] - ct.r) +
                                      (p[1] - ct.g) * (p[1] - ct.g) +
                                      (p[2] - ct.b) * (p[2] - ct.b));
          const double dy = static_cast<double>(y) + 0.5 - ct.y;
          const double dx = static_cast<double>(x) + 0.5 - ct.x;
          const double d = dc + spatial_w * std::sqrt(dy * dy + dx * dx);
          if (d < best) {
            best = d;
            labels[static_cast<size_t>(i)] = static_cast<int32_t>(c);
          }
        }
      }
  };

  assign();
  for (int64_t it = 0; it < iters; ++it) {
    for (auto& c : centers) c = {0, 0, 0, 0, 0, 0};
    for (int64_t i = 0; i < n_pix; ++i) {
      Center& c = centers[static_cast<size_t>(labels[static_cast<size_t>(i)])];
      const double* p = image.data() + i * 3;
      c.r += p[0];
      c.g += p[1];
      c.b += p[2];
      c.y += static_cast<double>(i / width) + 0.5;
      c.x += static_cast<double>(i % width) + 0.5;
      c.count += 1;
    }
    for (auto& c : centers)
      if (c.count > 0) {
        const double inv = 1.0 / static_cast<double>(c.count);
        c.r *= inv;
        c.g *= inv;
        c.b *= inv;
        c.y *= inv;
        c.x *= inv;
      }
    assign();
  }

  // connectivity: per label keep its largest 4-connected component, merge the
  // rest into the largest adjacent component
  std::vector<int32_t> comp(static_cast<size_t>(n_pix), -1);
  std::vector<int64_t> comp_size;
  std::vector<int32_t> comp_label;
  for (int64_t i = 0; i < n_pix; ++i) {
    if (comp[static_cast<size_t>(i)] >= 0) continue;
    const int32_t id = static_cast<int32_t>(comp_size.size());
    const int32_t lab = labels[static_cast<size_t>(i)];
    int64_t count = 0;
    std::vector<int64_t> stack{i};
    comp[static_cast<size_t>(i)] = id;
    while (!stack.empty()) {
      const int64_t p = stack.back();
      stack.pop_back();
      ++count;
      const int64_t y = p / width, x = p % width;
      const int64_t nbrs[4] = {p - width, p + width, p - 1, p + 1};
      const bool ok[4] = {y > 0, y < height - 1, x > 0, x < width - 1};
      for (int d = 0; d < 4; ++d)
        if (ok[d] && comp[static_cast<size_t>(nbrs[d])] < 0 &&
            labels[static_cast<size_t>(nbrs[d])] == lab) {
          comp[static_cast<size_t>(nbrs[d])] = id;
          stack.push_back(nbrs[d]);
        }
    }
    comp_size.push_back(count);
    comp_label.push_back(lab);
  }
  // canonical component per label = the largest
  std::vector<int32_t> canon(centers.size(), -1);
  for (size_t c = 0; c < comp_size.size(); ++c) {
    const int32_t lab = comp_label[c];
    if (canon[static_cast<size_t>(lab)] < 0 ||
        comp_size[c] > comp_size[static_cast<size_t>(canon[static_cast<size_t>(lab)])])
      canon[static_cast<size_t>(lab)] = static_cast<int32_t>(c);
  }
  std::vector<bool> orphan(comp_size.size(), false);
  for (size_t c = 0; c < comp_size.size(); ++c)
    orphan[c] = canon[static_cast<size_t>(comp_label[c])] != static_cast<int32_t>(c);
  // repeatedly adopt orphans into the largest adjacent non-orphan component
  bool changed = true;
  while (changed) {
    changed = false;
    for (size_t c = 0; c < comp_size.size(); ++c) {
      if (!orphan[c]) continue;
      int32_t best = -1;
      for (int64_t i = 0; i < n_pix; ++i) {
        if (comp[static_cast<size_t>(i)] != static_cast<int32_t>(c)) continue;
        const int64_t y = i / width, x = i % width;
        const int64_t nbrs[4] = {i - width, i + width, i - 1, i + 1};
        const bool ok[4] = {y > 0, y < height - 1, x > 0, x < width - 1};
        for (int d = 0; d < 4; ++d) {
          if (!ok[d]) continue;
          const int32_t nc = comp[static_cast<size_t>(nbrs[d])];
          if (nc == static_cast<int32_t>(c) || orphan[static_cast<size_t>(nc)]) continue;
          if (best < 0 || comp_size[static_cast<size_t>(nc)] > comp_size[static_cast<size_t>(best)])
            best = nc;
        }
      }
      if (best >= 0) {
        for (int64_t i = 0; i < n_pix; ++i)
          if (comp[static_cast<size_t>(i)] == static_cast<int32_t>(c)) {
            comp[static_cast<size_t>(i)] = best;
            labels[static_cast<size_t>(i)] = comp_label[static_cast<size_t>(best)];
          }
        comp_size[static_cast<size_t>(best)] += comp_size[c];
        comp_size[c] = 0;
        orphan[c] = false;
        changed = true;
      }
    }
  }

  SegmentLabels seg{height, width, std::move(labels), 0};
  relabel_contiguous(seg);
  return seg;
}

// --------------------------------------------------------------------- FH

SegmentLabels fh_segment(std::span<const double> image, int64_t height, int64_t width,
                         double scale, int64_t min_size) {
  if (scale <= 0) throw std::invalid_argument("fh_segment: scale must be positive");
  if (min_size < 1) throw std::invalid_argument("fh_segment: min cluster size must be >= 1");
  const int64_t n_pix = height * width;
  if (image.size() != static_cast<size_t>(n_pix * 3))
    throw std::invalid_argument("fh_segment: image buffer size mismatch");

  struct Edge {
    int32_t a, b;
    double w;
  };
  std::vector<Edge> edges;
  edges.reserve(static_cast<size_t>(4 * n_pix));
  auto wdiff = [&](int64_t p, int64_t q) {
    const double* u = image.data() + p * 3;
    const double* v = image.data() + q * 3;
    return std::sqrt((u[0] - v[0]) * (u[0] - v[0]) + (u[1] - v[1]) * (u[1] - v[1]) +
                     (u[2] - v[2]) * (u[2] - v[2]));
  };
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      const int64_t p = y * width + x;
      if (x + 1 < width) edges.push_back({static_cast<int32_t>(p), static_cast<int32_t>(p + 1), wdiff(p, p + 1)});
      if (y + 1 < height) edges.push_back({static_cast<int32_t>(p), static_cast<int32_t>(p + width), wdiff(p, p + width)});
      if (x + 1 < width && y + 1 < height)
        edges.push_back({static_cast<int32_t>(p), static_cast<int32_t>(p + width + 1), wdiff(p, p + width + 1)});
      if (x > 0 && y + 1 < height)
        edges.push_back({static_cast<int32_t>(p), static_cast<int32_t>(p + width - 1), wdiff(p, p + width - 1)});
    }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) { return a.w < b.w; });

  Dsu dsu(n_pix);
  std::vector<double> internal(static_cast<size_t>(n_pix), 0.0);
  for (const Edge& e : edges) {
    const int32_t a = dsu.find(e.a), b = dsu.find(e.b);
    if (a == b) continue;
    const double ta = internal[static_cast<size_t>(a)] +
                      scale / static_cast<double>(dsu.size[static_cast<size_t>(a)]);
    const double tb = internal[static_cast<size_t>(b)] +
                      scale / static_cast<double>(dsu.size[static_cast<size_t>(b)]);
    if (e.w <= std::min(ta, tb)) {
      const int32_t r = dsu.unite(a, b);
      internal[static_cast<size_t>(r)] = e.w;
    }
  }
  // merge components smaller than min_size at their lowest-weight boundary
  for (const Edge& e : edges) {
    const int32_t a = dsu.find(e.a), b = dsu.find(e.b);
    if (a == b) continue;
    if (dsu.size[static_cast<size_t>(a)] < min_size || dsu.size[static_cast<size_t>(b)] < min_size)
      dsu.unite(a, b);
  }

  SegmentLabels seg{height, width, std::vector<int32_t>(static_cast<size_t>(n_pix)), 0};
  for (int64_t i = 0; i < n_pix; ++i)
    seg.labels[static_cast<size_t>(i)] = dsu.find(static_cast<int32_t>(i));
  relabel_contiguous(seg);
  return seg;
}

std::vector<Region> segments_to_boxes(const SegmentLabels& seg, double filter_lo, double filter_hi,
                                      int64_t frame) {
  struct Extent {
    int64_t xmin, ymin, xmax, ymax;
    bool used = false;
  };
  std::vector<Extent> ext(static_cast<size_t>(seg.num_segments),
                          {seg.width, seg.height, -1, -1, false});
  for (int64_t y = 0; y < seg.height; ++y)
    for (int64_t x = 0; x < seg.width; ++x) {
      Extent& e = ext[static_cast<size_t>(seg.at(y, x))];
      e.used = true;
      e.xmin = std::min(e.xmin, x);
      e.ymin = std::min(e.ymin, y);
      e.xmax = std::max(e.xmax, x);
      e.ymax = std::max(e.ymax, y);
    }
  std::vector<Region> out;
  for (const Extent& e : ext) {
    if (!e.used) continue;
    const double wr = static_cast<double>(e.xmax + 1 - e.xmin) / static_cast<double>(seg.width);
    const double hr = static_cast<double>(e.ymax + 1 - e.ymin) / static_cast<double>(seg.height);
    if (wr < filter_lo || wr > filter_hi || hr < filter_lo || hr > filter_hi) continue;
    Region r;
    r.t = frame;
    r.xmin = static_cast<double>(e.xmin) / static_cast<double>(seg.width);
    r.xmax = static_cast<double>(e.xmax + 1) / static_cast<double>(seg.width);
    r.ymin = static_cast<double>(e.ymin) / static_cast<double>(seg.height);
    r.ymax = static_cast<double>(e.ymax + 1) / static_cast<double>(seg.height);
    out.push_back(r);
  }
  return out;
}

std::vector<Region> generate_regions(std::span<const double> image, int64_t height, int64_t width,
                                     const RegionGenConfig& cfg, Rng& rng, int64_t frame) {
  switch (cfg.method) {
    case RegionMethod::Random:
      return gen_random_boxes(height, width, cfg, rng, frame);
    case RegionMethod::Slic: {
      SegmentLabels seg =
          slic_segment(image, height, width, cfg.slic_k, cfg.slic_compactness, cfg.slic_iters);
      return segments_to_boxes(seg, cfg.filter_lo, cfg.filter_hi, frame);
    }
    case RegionMethod::Fh: {
      // FH thresholds s=c in {500,1000} assume 8-bit color distances
      std::vector<double> scaled(image.begin(), image.end());
      for (auto& v : scaled) v *= 255.0;
      SegmentLabels seg = fh_segment(scaled, height, width, cfg.fh_scale, cfg.fh_min_size);
      return segments_to_boxes(seg, cfg.filter_lo, cfg.filter_hi, frame);
    }
  }
  throw std::invalid_argument("generate_regions: unknown method");
}

void write_regions_jsonl(std::ostream& os, const std::vector<Region>& regions) {
  for (const Region& r : regions) {
    json j{{"frame", r.t}, {"xmin", r.xmin}, {"ymin", r.ymin}, {"xmax", r.xmax}, {"ymax", r.ymax}};
    os << j.dump() << "\n";
  }
}

std::vector<Region> read_regions_jsonl(std::istream& is, const std::string& source_name) {
  std::vector<Region> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw std::runtime_error(source_name + ":" + std::to_string(lineno) + ": bad JSON line");
    for (const char* key : {"frame", "xmin", "ymin", "xmax", "ymax"})
      if (!j.contains(key))
        throw std::runtime_error(source_name + ":" + std::to_string(lineno) + ": missing key " +
                                 key);
    Region r;
    r.t = j["frame"].get<int64_t>();
    r.xmin = j["xmin"].get<double>();
    r.ymin = j["ymin"].get<double>();
    r.xmax = j["xmax"].get<double>();
    r.ymax = j["ymax"].get<double>();
    out.push_back(r);
  }
  return out;
}

}  // namespace constcl

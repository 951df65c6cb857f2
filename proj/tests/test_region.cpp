#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "constcl/region.hpp"
#include "test_util.hpp"

using namespace constcl;
using testutil::random_values;

namespace {

std::vector<double> random_image(int64_t h, int64_t w, uint64_t seed, double lo = 0,
                                 double hi = 255) {
  return random_values(h * w * 3, seed, lo, hi);
}

// Independent FH oracle: explicit component arrays with wholesale relabeling
// on merge (no union-find), same edge construction and stable weight order.
std::vector<int32_t> fh_oracle(const std::vector<double>& img, int64_t H, int64_t W, double s,
                               int64_t c) {
  struct Edge {
    int64_t a, b;
    double w;
  };
  auto wdiff = [&](int64_t p, int64_t q) {
    double acc = 0;
    for (int64_t k = 0; k < 3; ++k) {
      const double d = img[static_cast<size_t>(p * 3 + k)] - img[static_cast<size_t>(q * 3 + k)];
      acc += d * d;
    }
    return std::sqrt(acc);
  };
  std::vector<Edge> edges;
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      const int64_t p = y * W + x;
      if (x + 1 < W) edges.push_back({p, p + 1, wdiff(p, p + 1)});
      if (y + 1 < H) edges.push_back({p, p + W, wdiff(p, p + W)});
      if (x + 1 < W && y + 1 < H) edges.push_back({p, p + W + 1, wdiff(p, p + W + 1)});
      if (x > 0 && y + 1 < H) edges.push_back({p, p + W - 1, wdiff(p, p + W - 1)});
    }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) { return a.w < b.w; });

  const int64_t n = H * W;
  std::vector<int64_t> comp(static_cast<size_t>(n));
  std::vector<int64_t> size(static_cast<size_t>(n), 1);
  std::vector<double> internal(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < n; ++i) comp[static_cast<size_t>(i)] = i;
  auto merge = [&](int64_t into, int64_t from, double w) {
    for (auto& cc : comp)
      if (cc == from) cc = into;
    size[static_cast<size_t>(into)] += size[static_cast<size_t>(from)];
    internal[static_cast<size_t>(into)] = w;
  };
  for (const auto& e : edges) {
    const int64_t a = comp[static_cast<size_t>(e.a)], b = comp[static_cast<size_t>(e.b)];
    if (a == b) continue;
    const double ta = internal[static_cast<size_t>(a)] + s / static_cast<double>(size[static_cast<size_t>(a)]);
    const double tb = internal[static_cast<size_t>(b)] + s / static_cast<double>(size[static_cast<size_t>(b)]);
    if (e.w <= std::min(ta, tb)) merge(a, b, e.w);
  }
  for (const auto& e : edges) {
    const int64_t a = comp[static_cast<size_t>(e.a)], b = comp[static_cast<size_t>(e.b)];
    if (a == b) continue;
    if (size[static_cast<size_t>(a)] < c || size[static_cast<size_t>(b)] < c)
      merge(a, b, e.w);
  }
  // first-occurrence canonical labels
  std::vector<int32_t> out(static_cast<size_t>(n));
  std::map<int64_t, int32_t> remap;
  for (int64_t i = 0; i < n; ++i) {
    auto [it, inserted] = remap.emplace(comp[static_cast<size_t>(i)],
                                        static_cast<int32_t>(remap.size()));
    out[static_cast<size_t>(i)] = it->second;
  }
  return out;
}

int32_t count_labels(const SegmentLabels& seg) {
  int32_t mx = -1;
  for (auto l : seg.labels) mx = std::max(mx, l);
  return mx + 1;
}

// unrestricted-window SLIC oracle: same grid init and center updates, but
// every pixel considers every center
std::vector<int32_t> slic_oracle(const std::vector<double>& img, int64_t H, int64_t W, int64_t k,
                                 double m, int64_t iters) {
  const double S = std::sqrt(static_cast<double>(H * W) / static_cast<double>(k));
  int64_t gy = std::max<int64_t>(1, std::llround(std::sqrt(static_cast<double>(k * H) /
                                                           static_cast<double>(W))));
  int64_t gx = (k + gy - 1) / gy;
  struct C {
    double r, g, b, y, x;
    int64_t n;
  };
  std::vector<C> cs;
  for (int64_t i = 0; i < gy && static_cast<int64_t>(cs.size()) < k; ++i)
    for (int64_t j = 0; j < gx && static_cast<int64_t>(cs.size()) < k; ++j) {
      const double cy = (i + 0.5) * static_cast<double>(H) / static_cast<double>(gy);
      const double cx = (j + 0.5) * static_cast<double>(W) / static_cast<double>(gx);
      const int64_t py = std::min<int64_t>(H - 1, static_cast<int64_t>(cy));
      const int64_t px = std::min<int64_t>(W - 1, static_cast<int64_t>(cx));
      const double* p = img.data() + (py * W + px) * 3;
      cs.push_back({p[0], p[1], p[2], cy, cx, 0});
    }
  std::vector<int32_t> labels(static_cast<size_t>(H * W), 0);
  auto assign = [&] {
    for (int64_t i = 0; i < H * W; ++i) {
      const double* p = img.data() + i * 3;
      const double py = static_cast<double>(i / W) + 0.5, px = static_cast<double>(i % W) + 0.5;
      double best = 1e300;
      for (size_t c = 0; c < cs.size(); ++c) {
        const double dc = std::sqrt((p[0] - cs[c].r) * (p[0] - cs[c].r) +
                                    (p[1] - cs[c].g) * (p[1] - cs[c].g) +
                                    (p[2] - cs[c].b) * (p[2] - cs[c].b));
        const double ds = std::sqrt((py - cs[c].y) * (py - cs[c].y) +
                                    (px - cs[c].x) * (px - cs[c].x));
        const double d = dc + m / S * ds;
        if (d < best) {
          best = d;
          labels[static_cast<size_t>(i)] = static_cast<int32_t>(c);
        }
      }
    }
  };
  assign();
  for (int64_t it = 0; it < iters; ++it) {
    for (auto& c : cs) c = {0, 0, 0, 0, 0, 0};
    for (int64_t i = 0; i < H * W; ++i) {
      C& c = cs[static_cast<size_t>(labels[static_cast<size_t>(i)])];
      const double* p = img.data() + i * 3;
      c.r += p[0];
      c.g += p[1];
      c.b += p[2];
      c.y += static_cast<double>(i / W) + 0.5;
      c.x += static_cast<double>(i % W) + 0.5;
      c.n += 1;
    }
    for (auto& c : cs)
      if (c.n) {
        c.r /= static_cast<double>(c.n);
        c.g /= static_cast<double>(c.n);
        c.b /= static_cast<double>(c.n);
        c.y /= static_cast<double>(c.n);
        c.x /= static_cast<double>(c.n);
      }
    assign();
  }
  return labels;
}

// partition agreement via majority-overlap mapping of labels
double partition_agreement(const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
  std::map<std::pair<int32_t, int32_t>, int64_t> overlap;
  for (size_t i = 0; i < a.size(); ++i) ++overlap[{a[i], b[i]}];
  std::map<int32_t, int64_t> best;
  for (const auto& [key, n] : overlap) best[key.first] = std::max(best[key.first], n);
  int64_t agree = 0;
  for (const auto& [label, n] : best) agree += n;
  return static_cast<double>(agree) / static_cast<double>(a.size());
}

}  // namespace

TEST_CASE("gen_random_boxes") {
  RegionGenConfig cfg;
  SUBCASE("returns exactly boxes_per_frame") {
    Rng rng(1);
    auto boxes = gen_random_boxes(64, 64, cfg, rng, 3);
    CHECK(boxes.size() == 8);
    for (const auto& b : boxes) CHECK(b.t == 3);
  }
  SUBCASE("deterministic under a fixed seed") {
    Rng r1(42), r2(42);
    auto a = gen_random_boxes(64, 64, cfg, r1);
    auto b = gen_random_boxes(64, 64, cfg, r2);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].xmin == b[i].xmin);
      CHECK(a[i].ymax == b[i].ymax);
    }
  }
  SUBCASE("1e4 samples satisfy aspect and area constraints") {
    Rng rng(7);
    cfg.boxes_per_frame = 10000;
    auto boxes = gen_random_boxes(32, 32, cfg, rng);
    int64_t violations = 0;
    for (const auto& b : boxes) {
      const double aspect = b.width() / b.height();
      const double area = b.area();
      if (!(b.valid() && aspect >= 0.5 - 1e-12 && aspect <= 2.0 + 1e-12 &&
            area >= 0.1 - 1e-12 && area <= 0.5 + 1e-12))
        ++violations;
    }
    CHECK(violations == 0);
  }
}

TEST_CASE("slic_segment") {
  SUBCASE("k=1 gives a single label") {
    auto img = random_image(8, 8, 3, 0, 1);
    SegmentLabels seg = slic_segment(img, 8, 8, 1, 10, 5);
    CHECK(count_labels(seg) == 1);
    CHECK(seg.num_segments == 1);
  }
  SUBCASE("uniform color, k=4, iters=0 gives the grid Voronoi cells") {
    std::vector<double> img(16 * 16 * 3, 0.5);
    SegmentLabels seg = slic_segment(img, 16, 16, 4, 10, 0);
    CHECK(seg.num_segments == 4);
    // quadrants around centers (4,4),(4,12),(12,4),(12,12)
    for (int64_t y = 0; y < 16; ++y)
      for (int64_t x = 0; x < 16; ++x) {
        const int32_t expect = static_cast<int32_t>((y >= 8) * 2 + (x >= 8));
        CHECK(seg.at(y, x) == expect);
      }
  }
  SUBCASE("matches unrestricted-window oracle on random images") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
      auto img = random_image(16, 16, 100 + seed, 0, 1);
      SegmentLabels seg = slic_segment(img, 16, 16, 4, 10, 5);
      auto oracle = slic_oracle(img, 16, 16, 4, 10, 5);
      CHECK(partition_agreement(seg.labels, oracle) >= 0.95);
    }
  }
  SUBCASE("output is a partition with contiguous labels") {
    auto img = random_image(16, 16, 9, 0, 1);
    SegmentLabels seg = slic_segment(img, 16, 16, 16, 10, 10);
    std::vector<bool> seen(static_cast<size_t>(seg.num_segments), false);
    for (auto l : seg.labels) {
      REQUIRE(l >= 0);
      REQUIRE(l < seg.num_segments);
      seen[static_cast<size_t>(l)] = true;
    }
    for (bool s : seen) CHECK(s);
  }
  SUBCASE("k larger than pixel count rejected") {
    auto img = random_image(4, 4, 1);
    CHECK_THROWS_AS(slic_segment(img, 4, 4, 17, 10, 1), std::invalid_argument);
  }
}

TEST_CASE("fh_segment") {
  SUBCASE("constant image is one segment") {
    std::vector<double> img(10 * 10 * 3, 128.0);
    SegmentLabels seg = fh_segment(img, 10, 10, 500, 1);
    CHECK(seg.num_segments == 1);
  }
  SUBCASE("two-tone image gives exactly two segments") {
    std::vector<double> img(8 * 8 * 3, 0.0);
    for (int64_t y = 0; y < 8; ++y)
      for (int64_t x = 4; x < 8; ++x)
        for (int64_t c = 0; c < 3; ++c) img[static_cast<size_t>((y * 8 + x) * 3 + c)] = 255.0;
    SegmentLabels seg = fh_segment(img, 8, 8, 10, 1);
    CHECK(seg.num_segments == 2);
    CHECK(seg.at(0, 0) != seg.at(0, 7));
    CHECK(seg.at(3, 1) == seg.at(7, 0));
  }
  SUBCASE("matches the independent component-relabeling oracle exactly") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      auto img = random_image(12, 12, 200 + seed);
      for (double s : {500.0, 1000.0}) {
        SegmentLabels seg = fh_segment(img, 12, 12, s, static_cast<int64_t>(s));
        auto oracle = fh_oracle(img, 12, 12, s, static_cast<int64_t>(s));
        REQUIRE(seg.labels.size() == oracle.size());
        for (size_t i = 0; i < oracle.size(); ++i) CHECK(seg.labels[i] == oracle[i]);
      }
    }
  }
  SUBCASE("segment count never increases with scale (s = c as in practice)") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      auto img = random_image(10, 10, 400 + seed);
      int32_t prev = -1;
      for (double s : {5.0, 20.0, 50.0, 200.0, 500.0, 1000.0}) {
        SegmentLabels seg = fh_segment(img, 10, 10, s, static_cast<int64_t>(s));
        if (prev >= 0) CHECK(seg.num_segments <= prev);
        prev = seg.num_segments;
      }
    }
  }
}

TEST_CASE("segments_to_boxes") {
  SUBCASE("central half kept") {
    SegmentLabels seg{100, 100, std::vector<int32_t>(10000, 0), 2};
    for (int64_t y = 25; y < 75; ++y)
      for (int64_t x = 25; x < 75; ++x) seg.labels[static_cast<size_t>(y * 100 + x)] = 1;
    auto boxes = segments_to_boxes(seg, 0.05, 0.7, 4);
    // label 0 is the full-frame remainder (ratio 1.0, dropped); label 1 kept
    REQUIRE(boxes.size() == 1);
    CHECK(boxes[0].t == 4);
    CHECK(boxes[0].xmin == doctest::Approx(0.25));
    CHECK(boxes[0].ymin == doctest::Approx(0.25));
    CHECK(boxes[0].xmax == doctest::Approx(0.75));
    CHECK(boxes[0].ymax == doctest::Approx(0.75));
  }
  SUBCASE("full-image segment dropped") {
    SegmentLabels seg{10, 10, std::vector<int32_t>(100, 0), 1};
    CHECK(segments_to_boxes(seg, 0.05, 0.7).empty());
  }
  SUBCASE("single pixel dropped") {
    SegmentLabels seg{100, 100, std::vector<int32_t>(10000, 0), 2};
    seg.labels[50 * 100 + 50] = 1;
    auto boxes = segments_to_boxes(seg, 0.05, 0.7);
    CHECK(boxes.empty());  // label 0 ratio 1.0, label 1 ratio 0.01
  }
  SUBCASE("filter keeps exactly the band") {
    // segments of width ratio 0.04, 0.05, 0.7, 0.71 at height ratio 0.5
    SegmentLabels seg{100, 100, std::vector<int32_t>(10000, 0), 5};
    auto paint = [&](int32_t label, int64_t x0, int64_t w) {
      for (int64_t y = 25; y < 75; ++y)
        for (int64_t x = x0; x < x0 + w; ++x) seg.labels[static_cast<size_t>(y * 100 + x)] = label;
    };
    paint(1, 0, 4);
    paint(2, 10, 5);
    paint(3, 20, 70);
    SegmentLabels seg2{100, 100, std::vector<int32_t>(10000, 0), 2};
    for (int64_t y = 25; y < 75; ++y)
      for (int64_t x = 10; x < 81; ++x) seg2.labels[static_cast<size_t>(y * 100 + x)] = 1;
    auto boxes = segments_to_boxes(seg, 0.05, 0.7);
    CHECK(boxes.size() == 2);  // ratios 0.05 and 0.7 kept, 0.04 and background dropped
    auto boxes2 = segments_to_boxes(seg2, 0.05, 0.7);
    CHECK(boxes2.empty());  // 0.71 dropped (and background 1.0)
  }
}

TEST_CASE("regions jsonl round trip") {
  std::vector<Region> regions{{0, 0.1, 0.2, 0.5, 0.6}, {3, 0.0, 0.25, 1.0, 0.75}};
  std::stringstream ss;
  write_regions_jsonl(ss, regions);
  auto back = read_regions_jsonl(ss, "<mem>");
  REQUIRE(back.size() == 2);
  CHECK(back[0].t == 0);
  CHECK(back[1].t == 3);
  CHECK(back[0].xmin == doctest::Approx(0.1));
  CHECK(back[1].ymax == doctest::Approx(0.75));

  std::stringstream bad("{\"frame\": 0, \"xmin\": 0.0}\n");
  CHECK_THROWS_AS(read_regions_jsonl(bad, "<mem>"), std::runtime_error);
}

TEST_CASE("generate_regions dispatch and fh 255 scaling") {
  RegionGenConfig cfg;
  cfg.method = RegionMethod::Fh;
  cfg.fh_scale = 10;
  cfg.fh_min_size = 4;
  // [0,1] image with a central square: the pipeline scales to 0..255, so the
  // 0.8 contrast becomes an uncrossable boundary at s=10
  std::vector<double> img(16 * 16 * 3, 0.1);
  for (int64_t y = 4; y < 12; ++y)
    for (int64_t x = 4; x < 12; ++x)
      for (int64_t c = 0; c < 3; ++c) img[static_cast<size_t>((y * 16 + x) * 3 + c)] = 0.9;
  Rng rng(1);
  auto boxes = generate_regions(img, 16, 16, cfg, rng, 6);
  // background box is full-frame (dropped), square kept at ratio 0.5
  REQUIRE(boxes.size() == 1);
  CHECK(boxes[0].t == 6);
  CHECK(boxes[0].xmin == doctest::Approx(0.25));
  CHECK(boxes[0].xmax == doctest::Approx(0.75));
}

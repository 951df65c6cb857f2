#include "constcl/synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "constcl/serialize.hpp"

namespace constcl {

namespace {

using json = nlohmann::json;
constexpr double kPi = 3.14159265358979323846;

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

struct SpriteState {
  SpriteShape shape;
  std::array<double, 3> color;
  double half;
  double x, y, vx, vy;
};

bool inside_sprite(const SpriteState& s, double px, double py) {
  const double dx = px - s.x, dy = py - s.y;
  switch (s.shape) {
    case SpriteShape::Square:
      return std::abs(dx) <= s.half && std::abs(dy) <= s.half;
    case SpriteShape::Disc:
      return dx * dx + dy * dy <= s.half * s.half;
    case SpriteShape::Triangle:
      // upward triangle inscribed in the box
      if (dy < -s.half || dy > s.half) return false;
      return std::abs(dx) <= (dy + s.half) * 0.5;
    case SpriteShape::Ring: {
      const double rr = dx * dx + dy * dy;
      const double inner = 0.55 * s.half;
      return rr <= s.half * s.half && rr >= inner * inner;
    }
  }
  return false;
}

void reflect(double& pos, double& vel, double lo, double hi) {
  pos += vel;
  if (pos < lo) {
    pos = 2 * lo - pos;
    vel = -vel;
  }
  if (pos > hi) {
    pos = 2 * hi - pos;
    vel = -vel;
  }
}

}  // namespace

LabeledVideo generate_sprite_video(const SpriteWorld& world, uint64_t seed, int64_t force_class) {
  const int64_t H = world.canvas_h, W = world.canvas_w, T = world.frames;
  if (2.0 * world.half_size_max >= static_cast<double>(std::min(H, W)))
    throw std::invalid_argument("generate_sprite_video: sprites do not fit the canvas");
  Rng rng(rng_key(seed, "sprite_video"));

  double base_angle;
  if (force_class >= 0) {
    const double sector = 2.0 * kPi / static_cast<double>(world.direction_classes);
    base_angle = (static_cast<double>(force_class) + 0.5) * sector;
  } else {
    base_angle = rng.uniform(0.0, 2.0 * kPi);
  }

  std::vector<SpriteState> sprites;
  const double base_hue =
      world.base_hue + world.base_hue_jitter * rng.uniform(-1.0, 1.0);
  double mean_vx = 0, mean_vy = 0;
  // start positions leave room for the whole trajectory where possible, so
  // headings stay constant over the video (reflection remains the fallback)
  auto place = [&](double vel, double extent, double half) {
    const double travel = vel * static_cast<double>(T - 1);
    const double lo = half - std::min(0.0, travel);
    const double hi = extent - half - std::max(0.0, travel);
    if (lo <= hi) return rng.uniform(lo, hi);
    return rng.uniform(half, extent - half);
  };
  for (int64_t i = 0; i < world.sprite_count; ++i) {
    SpriteState s;
    s.shape = static_cast<SpriteShape>(i % 4);
    s.color = hsv_to_rgb(
        base_hue + world.hue_spread * static_cast<double>(i) / static_cast<double>(world.sprite_count),
        1.0, 1.0);
    s.half = rng.uniform(world.half_size_min, world.half_size_max);
    const double speed = rng.uniform(world.speed_min, world.speed_max);
    const double ang =
        base_angle + rng.uniform(-world.direction_jitter, world.direction_jitter);
    s.vx = speed * std::cos(ang);
    s.vy = speed * std::sin(ang);
    s.x = place(s.vx, static_cast<double>(W), s.half);
    s.y = place(s.vy, static_cast<double>(H), s.half);
    mean_vx += s.vx;
    mean_vy += s.vy;
    sprites.push_back(s);
  }
  mean_vx /= static_cast<double>(world.sprite_count);
  mean_vy /= static_cast<double>(world.sprite_count);
  double mean_ang = std::atan2(mean_vy, mean_vx);
  if (mean_ang < 0) mean_ang += 2.0 * kPi;
  const int64_t label =
      std::min<int64_t>(world.direction_classes - 1,
                        static_cast<int64_t>(mean_ang / (2.0 * kPi) *
                                             static_cast<double>(world.direction_classes)));

  // coarse value-noise background: a static texture plus optional per-frame
  // flicker that decorrelates backgrounds across time
  constexpr int64_t kNoiseGrid = 8;
  std::vector<double> noise(static_cast<size_t>(kNoiseGrid * kNoiseGrid));
  Rng tex_rng(rng_key(seed, "texture", world.texture_seed));
  for (auto& v : noise) v = tex_rng.uniform();
  std::vector<double> flicker(static_cast<size_t>(kNoiseGrid * kNoiseGrid), 0.0);
  auto sample_grid = [&](const std::vector<double>& g, int64_t y, int64_t x) {
    const double gy = static_cast<double>(y) / static_cast<double>(H) * (kNoiseGrid - 1);
    const double gx = static_cast<double>(x) / static_cast<double>(W) * (kNoiseGrid - 1);
    const int64_t y0 = static_cast<int64_t>(gy), x0 = static_cast<int64_t>(gx);
    const int64_t y1 = std::min<int64_t>(y0 + 1, kNoiseGrid - 1);
    const int64_t x1 = std::min<int64_t>(x0 + 1, kNoiseGrid - 1);
    const double fy = gy - static_cast<double>(y0), fx = gx - static_cast<double>(x0);
    return g[static_cast<size_t>(y0 * kNoiseGrid + x0)] * (1 - fy) * (1 - fx) +
           g[static_cast<size_t>(y0 * kNoiseGrid + x1)] * (1 - fy) * fx +
           g[static_cast<size_t>(y1 * kNoiseGrid + x0)] * fy * (1 - fx) +
           g[static_cast<size_t>(y1 * kNoiseGrid + x1)] * fy * fx;
  };
  auto background = [&](int64_t y, int64_t x) {
    return 0.5 + world.background_contrast * (sample_grid(noise, y, x) - 0.5) +
           world.background_flicker * (sample_grid(flicker, y, x) - 0.5);
  };

  LabeledVideo out;
  out.label = label;
  std::vector<float> frames(static_cast<size_t>(T * H * W * 3));
  for (int64_t t = 0; t < T; ++t) {
    if (world.background_flicker > 0) {
      Rng frame_rng(rng_key(seed, "flicker", world.texture_seed, static_cast<uint64_t>(t)));
      for (auto& v : flicker) v = frame_rng.uniform();
    }
    if (t > 0)
      for (auto& s : sprites) {
        reflect(s.x, s.vx, s.half, static_cast<double>(W) - s.half);
        reflect(s.y, s.vy, s.half, static_cast<double>(H) - s.half);
      }
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        double r = background(y, x), g = r, b = r;
        for (const auto& s : sprites)
          if (inside_sprite(s, px, py)) {
            r = s.color[0];
            g = s.color[1];
            b = s.color[2];
          }
        const size_t o = static_cast<size_t>(((t * H + y) * W + x) * 3);
        frames[o] = static_cast<float>(r);
        frames[o + 1] = static_cast<float>(g);
        frames[o + 2] = static_cast<float>(b);
      }
    for (int64_t i = 0; i < world.sprite_count; ++i) {
      const SpriteState& s = sprites[static_cast<size_t>(i)];
      GtRegion gr;
      gr.frame = t;
      gr.id = i;
      gr.xmin = (s.x - s.half) / static_cast<double>(W);
      gr.xmax = (s.x + s.half) / static_cast<double>(W);
      gr.ymin = (s.y - s.half) / static_cast<double>(H);
      gr.ymax = (s.y + s.half) / static_cast<double>(H);
      out.regions.push_back(gr);
    }
  }
  out.frames = Tensor::from_f32({T, H, W, 3}, frames);
  return out;
}

std::vector<LabeledVideo> make_sprite_dataset(const SpriteWorld& world, int64_t videos,
                                              uint64_t seed, int64_t threads) {
  std::vector<LabeledVideo> out(static_cast<size_t>(videos));
  const int64_t workers = std::max<int64_t>(1, std::min<int64_t>(threads, videos));
  if (workers == 1) {
    for (int64_t i = 0; i < videos; ++i)
      out[static_cast<size_t>(i)] = generate_sprite_video(world, rng_key(seed, "video", static_cast<uint64_t>(i)),
                                                          i % world.direction_classes);
    return out;
  }
  std::atomic<int64_t> next{0};
  auto work = [&]() {
    while (true) {
      const int64_t i = next.fetch_add(1);
      if (i >= videos) return;
      out[static_cast<size_t>(i)] = generate_sprite_video(world, rng_key(seed, "video", static_cast<uint64_t>(i)),
                                                          i % world.direction_classes);
    }
  };
  std::vector<std::thread> pool;
  for (int64_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  return out;
}

void save_dataset(const std::string& dir, const std::vector<LabeledVideo>& videos,
                  int64_t classes) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["classes"] = classes;
  json vids = json::array();
  for (size_t i = 0; i < videos.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "video_%03zu", i);
    const std::string video_file = std::string(name) + ".cstt";
    const std::string regions_file = std::string(name) + ".regions.jsonl";
    save_tensor_file(dir + "/" + video_file, videos[i].frames);
    std::ofstream rf(dir + "/" + regions_file);
    for (const auto& r : videos[i].regions) {
      json j{{"frame", r.frame}, {"xmin", r.xmin}, {"ymin", r.ymin},
             {"xmax", r.xmax}, {"ymax", r.ymax}, {"id", r.id}};
      rf << j.dump() << "\n";
    }
    vids.push_back({{"video", video_file}, {"regions", regions_file}, {"label", videos[i].label}});
  }
  manifest["videos"] = vids;
  std::ofstream mf(dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
}

std::vector<LabeledVideo> load_dataset(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw std::runtime_error("load_dataset: cannot open " + dir + "/manifest.json");
  json manifest = json::parse(mf, nullptr, false);
  if (manifest.is_discarded())
    throw std::runtime_error("load_dataset: invalid manifest in " + dir);
  std::vector<LabeledVideo> out;
  for (const auto& v : manifest.at("videos")) {
    LabeledVideo lv;
    lv.frames = load_tensor_file(dir + "/" + v.at("video").get<std::string>());
    lv.label = v.at("label").get<int64_t>();
    const std::string rpath = dir + "/" + v.at("regions").get<std::string>();
    std::ifstream rf(rpath);
    if (!rf) throw std::runtime_error("load_dataset: cannot open " + rpath);
    std::string line;
    while (std::getline(rf, line)) {
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) throw std::runtime_error("load_dataset: bad region line in " + rpath);
      GtRegion r;
      r.frame = j.at("frame").get<int64_t>();
      r.xmin = j.at("xmin").get<double>();
      r.ymin = j.at("ymin").get<double>();
      r.xmax = j.at("xmax").get<double>();
      r.ymax = j.at("ymax").get<double>();
      r.id = j.at("id").get<int64_t>();
      lv.regions.push_back(r);
    }
    out.push_back(std::move(lv));
  }
  return out;
}

double iou(const Region& a, const Region& b) {
  const double ix = std::max(0.0, std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin));
  const double iy = std::max(0.0, std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double match_accuracy(const Tensor& h_rows_a, const std::vector<int64_t>& ids_a,
                      const Tensor& h_rows_b, const std::vector<int64_t>& ids_b) {
  const auto match = match_correspondence(h_rows_a, h_rows_b);
  int64_t correct = 0;
  for (size_t i = 0; i < match.size(); ++i)
    if (ids_b[static_cast<size_t>(match[i])] == ids_a[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(match.size());
}

namespace {

std::vector<GtRegion> regions_at_frame(const LabeledVideo& video, int64_t frame) {
  std::vector<GtRegion> out;
  for (const auto& r : video.regions)
    if (r.frame == frame) out.push_back(r);
  return out;
}

struct PooledRegions {
  Tensor norm_rows;
  std::vector<int64_t> ids;
};

// Maps a canvas-space box into the cropped/flipped clip frame; drops regions
// that fall mostly outside the crop.
std::optional<Region> region_in_clip(const GtRegion& gt, const AugRecord& aug) {
  auto to_clip_x = [&](double x) { return (x - aug.crop_x0) / aug.crop_w; };
  auto to_clip_y = [&](double y) { return (y - aug.crop_y0) / aug.crop_h; };
  double x0 = to_clip_x(gt.xmin), x1 = to_clip_x(gt.xmax);
  double y0 = to_clip_y(gt.ymin), y1 = to_clip_y(gt.ymax);
  if (aug.flip) {
    const double fx0 = 1.0 - x1, fx1 = 1.0 - x0;
    x0 = fx0;
    x1 = fx1;
  }
  const double full_area = (x1 - x0) * (y1 - y0);
  const double cx0 = std::clamp(x0, 0.0, 1.0), cx1 = std::clamp(x1, 0.0, 1.0);
  const double cy0 = std::clamp(y0, 0.0, 1.0), cy1 = std::clamp(y1, 0.0, 1.0);
  const double kept = (cx1 - cx0) * (cy1 - cy0);
  if (kept <= 0 || kept < 0.5 * full_area) return std::nullopt;
  if (cx1 - cx0 < 0.02 || cy1 - cy0 < 0.02) return std::nullopt;
  return Region{gt.frame, cx0, cy0, cx1, cy1};
}

PooledRegions pool_gt_regions(Model& model, const FeatureMap& fmap, const LabeledVideo& video,
                              int64_t slice, const AugRecord& aug) {
  const int64_t video_frame = fmap.video_frame_of(0, slice);
  const auto gt = regions_at_frame(video, video_frame);
  if (gt.empty()) throw std::runtime_error("pool_gt_regions: no ground truth at frame " +
                                           std::to_string(video_frame));
  std::vector<Tensor> rows;
  PooledRegions out;
  for (const auto& r : gt) {
    auto box = region_in_clip(r, aug);
    if (!box) continue;
    box->t = video_frame;
    Tensor h = st_roialign(fmap, 0, *box, model.cfg.roialign_bins);
    rows.push_back(reshape(h, {1, h.numel()}));
    out.ids.push_back(r.id);
  }
  if (!rows.empty()) out.norm_rows = l2_normalize(concat(rows, 0), 1);
  return out;
}

}  // namespace

double correspondence_accuracy(Model& model, const std::vector<LabeledVideo>& dataset,
                               const EvalConfig& cfg) {
  if (dataset.empty()) throw std::invalid_argument("correspondence_accuracy: empty dataset");
  int64_t correct = 0, total = 0;
  for (int64_t p = 0; p < cfg.pairs; ++p) {
    const LabeledVideo& video = dataset[static_cast<size_t>(p) % dataset.size()];
    ViewPair vp = sample_view_pair(video.frames, cfg.sampling,
                                   rng_key(cfg.seed, "corr_pair", static_cast<uint64_t>(p)));
    auto run_view = [&](const VideoClip& clip) {
      Tensor clips = reshape(clip.frames.astype(model.cfg.dtype),
                             {1, clip.frames.shape()[0], clip.frames.shape()[1],
                              clip.frames.shape()[2], 3});
      return model.backbone.forward(clips, {{clip.source_start, clip.frame_stride}}, false);
    };
    EndpointSet ea = run_view(vp.x);
    EndpointSet eb = run_view(vp.x_prime);
    Rng rng(rng_key(cfg.seed, "corr_slice", static_cast<uint64_t>(p)));
    auto [ta, tb] = select_slice_pair(cfg.sampling.strategy, ea.c5_r.meta[0], ea.c5_r.frames(),
                                      eb.c5_r.meta[0], eb.c5_r.frames(), rng);
    PooledRegions ra = pool_gt_regions(model, ea.c5_r, video, ta, vp.aug_x);
    PooledRegions rb = pool_gt_regions(model, eb.c5_r, video, tb, vp.aug_x_prime);
    if (ra.ids.empty() || rb.ids.empty()) continue;
    const auto match = match_correspondence(ra.norm_rows, rb.norm_rows);
    for (size_t i = 0; i < match.size(); ++i) {
      // only sprites visible in both views count as anchors
      bool in_target = false;
      for (int64_t id : rb.ids) in_target = in_target || id == ra.ids[i];
      if (!in_target) continue;
      total += 1;
      if (rb.ids[static_cast<size_t>(match[i])] == ra.ids[i]) ++correct;
    }
  }
  if (total == 0) throw std::runtime_error("correspondence_accuracy: no usable anchors");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double linear_probe_eval(Model& model, const std::vector<LabeledVideo>& dataset,
                         const EvalConfig& cfg) {
  if (dataset.empty()) throw std::invalid_argument("linear_probe_eval: empty dataset");
  int64_t classes = 0;
  for (const auto& v : dataset) classes = std::max<int64_t>(classes, v.label + 1);
  if (classes < 1) throw std::invalid_argument("linear_probe_eval: degenerate labels");

  const int64_t n = static_cast<int64_t>(dataset.size());
  const int64_t c5 = model.backbone.c5_channels();
  std::vector<double> feats(static_cast<size_t>(n * c5));
  std::vector<int64_t> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const LabeledVideo& video = dataset[static_cast<size_t>(i)];
    const int64_t span = (cfg.sampling.clip_len - 1) * cfg.sampling.frame_stride + 1;
    const int64_t max_offset = std::max<int64_t>(0, video.frames.shape()[0] - span);
    // average pooled features over three evenly spaced clips
    std::vector<double> acc(static_cast<size_t>(c5), 0.0);
    const int64_t offsets[3] = {0, max_offset / 2, max_offset};
    for (int64_t k = 0; k < 3; ++k) {
      VideoClip clip = render_identity_clip(video.frames, cfg.sampling, offsets[k]);
      Tensor clips = reshape(clip.frames.astype(model.cfg.dtype),
                             {1, clip.frames.shape()[0], clip.frames.shape()[1],
                              clip.frames.shape()[2], 3});
      EndpointSet end =
          model.backbone.forward(clips, {{clip.source_start, clip.frame_stride}}, false);
      Tensor pooled = l2_normalize(global_avg_pool(end.c5_g.values), 1);
      for (int64_t d = 0; d < c5; ++d) acc[static_cast<size_t>(d)] += pooled.at(d);
    }
    double norm = 0;
    for (double v : acc) norm += v * v;
    norm = std::max(std::sqrt(norm), 1e-12);
    for (int64_t d = 0; d < c5; ++d)
      feats[static_cast<size_t>(i * c5 + d)] = acc[static_cast<size_t>(d)] / norm;
    labels[static_cast<size_t>(i)] = video.label;
  }

  const int64_t n_train = std::max<int64_t>(
      1, static_cast<int64_t>(std::llround(cfg.train_fraction * static_cast<double>(n))));
  const int64_t n_test = n - n_train;
  if (n_test < 1) throw std::invalid_argument("linear_probe_eval: no held-out videos");

  // standardize per dimension on the training split
  for (int64_t d = 0; d < c5; ++d) {
    double mu = 0;
    for (int64_t i = 0; i < n_train; ++i) mu += feats[static_cast<size_t>(i * c5 + d)];
    mu /= static_cast<double>(n_train);
    double var = 0;
    for (int64_t i = 0; i < n_train; ++i) {
      const double dev = feats[static_cast<size_t>(i * c5 + d)] - mu;
      var += dev * dev;
    }
    var /= static_cast<double>(n_train);
    const double inv = 1.0 / std::sqrt(var + 1e-8);
    for (int64_t i = 0; i < n; ++i)
      feats[static_cast<size_t>(i * c5 + d)] = (feats[static_cast<size_t>(i * c5 + d)] - mu) * inv;
  }

  Tensor x_train = Tensor::from_f64({n_train, c5},
                                    std::span<const double>(feats.data(), static_cast<size_t>(n_train * c5)),
                                    DType::F64);
  std::vector<double> onehot(static_cast<size_t>(n_train * classes), 0.0);
  for (int64_t i = 0; i < n_train; ++i)
    onehot[static_cast<size_t>(i * classes + labels[static_cast<size_t>(i)])] = 1.0;
  Tensor y_train = Tensor::from_f64({n_train, classes}, onehot, DType::F64);

  Tensor w = Tensor::zeros({c5, classes}, DType::F64);
  Tensor b = Tensor::zeros({classes}, DType::F64);
  w.mark_trainable("probe.w");
  b.mark_trainable("probe.b");
  for (int64_t it = 0; it < cfg.probe_steps; ++it) {
    Tensor logits = add(matmul(x_train, w), b);
    Tensor probs = softmax(logits, 1);
    Tensor picked = sum(mul(probs, y_train), {1});
    Tensor loss = scale(mean(log(picked)), -1.0);
    GradMap g = backward(loss, std::vector<Tensor>{w, b});
    std::vector<double> wv = w.to_f64(), gw = g.at(w).to_f64();
    std::vector<double> bv = b.to_f64(), gb = g.at(b).to_f64();
    for (size_t k = 0; k < wv.size(); ++k) wv[k] -= cfg.probe_lr * gw[k];
    for (size_t k = 0; k < bv.size(); ++k) bv[k] -= cfg.probe_lr * gb[k];
    w.overwrite_data(wv);
    b.overwrite_data(bv);
  }

  int64_t correct = 0;
  const auto wv = w.to_f64();
  const auto bv = b.to_f64();
  for (int64_t i = n_train; i < n; ++i) {
    int64_t best = 0;
    double best_score = 0;
    for (int64_t k = 0; k < classes; ++k) {
      double s = bv[static_cast<size_t>(k)];
      for (int64_t d = 0; d < c5; ++d)
        s += feats[static_cast<size_t>(i * c5 + d)] * wv[static_cast<size_t>(d * classes + k)];
      if (k == 0 || s > best_score) {
        best_score = s;
        best = k;
      }
    }
    if (best == labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n_test);
}

std::vector<Region> track_from_map(const FeatureMap& fmap, int64_t sample, const Region& init,
                                   int64_t grid, int64_t bins) {
  const int64_t frames = fmap.frames();
  Tensor tmpl = st_roialign(fmap, sample, init, bins);
  const auto tv = tmpl.to_f64();
  auto cosine = [&](const Tensor& t) {
    const auto v = t.to_f64();
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < v.size(); ++i) {
      dot += tv[i] * v[i];
      na += tv[i] * tv[i];
      nb += v[i] * v[i];
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0 ? dot / denom : 0.0;
  };
  const double w = init.width(), h = init.height();
  std::vector<Region> out;
  Region prev = init;
  for (int64_t t = 1; t < frames; ++t) {
    const int64_t video_frame = fmap.video_frame_of(sample, t);
    Region best = prev;
    best.t = video_frame;
    double best_score = -2.0;
    auto consider = [&](double cx, double cy) {
      cx = std::clamp(cx, w / 2, 1.0 - w / 2);
      cy = std::clamp(cy, h / 2, 1.0 - h / 2);
      Region cand{video_frame, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
      const double score = cosine(st_roialign(fmap, sample, cand, bins));
      if (score > best_score) {
        best_score = score;
        best = cand;
      }
    };
    consider((prev.xmin + prev.xmax) / 2, (prev.ymin + prev.ymax) / 2);
    for (int64_t gy = 0; gy < grid; ++gy)
      for (int64_t gx = 0; gx < grid; ++gx)
        consider((static_cast<double>(gx) + 0.5) / static_cast<double>(grid),
                 (static_cast<double>(gy) + 0.5) / static_cast<double>(grid));
    out.push_back(best);
    prev = best;
  }
  return out;
}

double toy_track_eval(Model& model, const LabeledVideo& video, const Region& init,
                      const EvalConfig& cfg) {
  // init must be a ground-truth region at the clip's first frame
  const auto gt0 = regions_at_frame(video, init.t);
  int64_t target_id = -1;
  for (const auto& r : gt0)
    if (std::abs(r.xmin - init.xmin) < 1e-9 && std::abs(r.ymin - init.ymin) < 1e-9 &&
        std::abs(r.xmax - init.xmax) < 1e-9 && std::abs(r.ymax - init.ymax) < 1e-9)
      target_id = r.id;
  if (target_id < 0)
    throw std::invalid_argument("toy_track_eval: init does not match a ground-truth region");

  VideoClip use = render_identity_clip(video.frames, cfg.sampling, init.t);
  Tensor clips = reshape(use.frames.astype(model.cfg.dtype),
                         {1, use.frames.shape()[0], use.frames.shape()[1], use.frames.shape()[2], 3});
  EndpointSet end = model.backbone.forward(clips, {{use.source_start, use.frame_stride}}, false);
  auto track = track_from_map(end.c5_r, 0, init, cfg.track_grid, model.cfg.roialign_bins);
  double total = 0;
  int64_t count = 0;
  for (const auto& pred : track) {
    for (const auto& gt : regions_at_frame(video, pred.t))
      if (gt.id == target_id) {
        total += iou(pred, gt.region());
        ++count;
      }
  }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

}  // namespace constcl

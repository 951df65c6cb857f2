#include "constcl/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace constcl {

namespace {

AugRecord draw_augmentation(Rng& rng, const SamplingConfig& cfg, int64_t max_offset) {
  AugRecord rec;
  rec.offset = rng.uniform_int(0, max_offset);
  double ch = 1.0, cw = 1.0;
  for (int tries = 0; tries < 10; ++tries) {
    const double area = rng.uniform(cfg.crop_area_min, cfg.crop_area_max);
    const double aspect = rng.uniform(cfg.crop_aspect_min, cfg.crop_aspect_max);
    const double w = std::sqrt(area * aspect);
    const double h = std::sqrt(area / aspect);
    if (w <= 1.0 && h <= 1.0) {
      cw = w;
      ch = h;
      break;
    }
  }
  rec.crop_h = ch;
  rec.crop_w = cw;
  rec.crop_y0 = rng.uniform(0.0, 1.0 - ch);
  rec.crop_x0 = rng.uniform(0.0, 1.0 - cw);
  rec.flip = cfg.flip_enabled && rng.bernoulli(0.5);
  return rec;
}

VideoClip render_clip(const Tensor& video, const SamplingConfig& cfg, const AugRecord& rec) {
  const Shape& vs = video.shape();
  const int64_t H = vs[1], W = vs[2];
  const int64_t oh = cfg.out_h, ow = cfg.out_w;
  std::vector<float> out(static_cast<size_t>(cfg.clip_len * oh * ow * 3));

  auto sample_bilinear = [&](int64_t frame, double y, double x, int64_t c) {
    const double iy = std::clamp(y - 0.5, 0.0, static_cast<double>(H - 1));
    const double ix = std::clamp(x - 0.5, 0.0, static_cast<double>(W - 1));
    const int64_t y0 = static_cast<int64_t>(iy), x0 = static_cast<int64_t>(ix);
    const int64_t y1 = std::min<int64_t>(y0 + 1, H - 1), x1 = std::min<int64_t>(x0 + 1, W - 1);
    const double fy = iy - static_cast<double>(y0), fx = ix - static_cast<double>(x0);
    auto v = [&](int64_t yy, int64_t xx) {
      return video.at(((frame * H + yy) * W + xx) * 3 + c);
    };
    return v(y0, x0) * (1 - fy) * (1 - fx) + v(y0, x1) * (1 - fy) * fx +
           v(y1, x0) * fy * (1 - fx) + v(y1, x1) * fy * fx;
  };

  size_t o = 0;
  for (int64_t i = 0; i < cfg.clip_len; ++i) {
    const int64_t src_frame = rec.offset + i * cfg.frame_stride;
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) {
        const double ux = rec.flip ? 1.0 - (static_cast<double>(ox) + 0.5) / static_cast<double>(ow)
                                   : (static_cast<double>(ox) + 0.5) / static_cast<double>(ow);
        const double uy = (static_cast<double>(oy) + 0.5) / static_cast<double>(oh);
        const double sy = (rec.crop_y0 + uy * rec.crop_h) * static_cast<double>(H);
        const double sx = (rec.crop_x0 + ux * rec.crop_w) * static_cast<double>(W);
        for (int64_t c = 0; c < 3; ++c)
          out[o++] = static_cast<float>(sample_bilinear(src_frame, sy, sx, c));
      }
  }
  VideoClip clip;
  clip.frames = Tensor::from_f32({cfg.clip_len, oh, ow, 3}, out);
  clip.source_start = rec.offset;
  clip.frame_stride = cfg.frame_stride;
  return clip;
}

}  // namespace

VideoClip render_identity_clip(const Tensor& video, const SamplingConfig& cfg, int64_t offset) {
  if (video.rank() != 4 || video.shape()[3] != 3)
    throw std::invalid_argument("render_identity_clip: video must be [T,H,W,3]");
  const int64_t span = (cfg.clip_len - 1) * cfg.frame_stride + 1;
  if (offset < 0 || offset + span > video.shape()[0])
    throw std::invalid_argument("render_identity_clip: offset " + std::to_string(offset) +
                                " leaves no room for a " + std::to_string(span) + "-frame span");
  AugRecord rec;
  rec.offset = offset;
  return render_clip(video, cfg, rec);
}

ViewPair sample_view_pair(const Tensor& video, const SamplingConfig& cfg, uint64_t key) {
  if (video.rank() != 4 || video.shape()[3] != 3)
    throw std::invalid_argument("sample_view_pair: video must be [T,H,W,3], got " +
                                shape_str(video.shape()));
  const int64_t span = (cfg.clip_len - 1) * cfg.frame_stride + 1;
  if (video.shape()[0] < span)
    throw std::invalid_argument("sample_view_pair: video has " +
                                std::to_string(video.shape()[0]) + " frames, clip needs " +
                                std::to_string(span));
  const int64_t max_offset = video.shape()[0] - span;
  Rng rng(key);
  ViewPair pair;
  pair.aug_x = draw_augmentation(rng, cfg, max_offset);
  pair.aug_x_prime = draw_augmentation(rng, cfg, max_offset);
  pair.x = render_clip(video, cfg, pair.aug_x);
  pair.x_prime = render_clip(video, cfg, pair.aug_x_prime);
  return pair;
}

std::pair<int64_t, int64_t> select_slice_pair(SliceStrategy strategy, const ClipMeta& meta_a,
                                              int64_t frames_a, const ClipMeta& meta_b,
                                              int64_t frames_b, Rng& rng) {
  if (frames_a < 1 || frames_b < 1)
    throw std::invalid_argument("select_slice_pair: empty feature map");
  switch (strategy) {
    case SliceStrategy::Random:
      return {rng.uniform_int(0, frames_a - 1), rng.uniform_int(0, frames_b - 1)};
    case SliceStrategy::Center:
      return {frames_a / 2, frames_b / 2};
    case SliceStrategy::Nearest: {
      int64_t best_a = 0, best_b = 0;
      int64_t best_dist = -1;
      for (int64_t ta = 0; ta < frames_a; ++ta)
        for (int64_t tb = 0; tb < frames_b; ++tb) {
          const int64_t va = meta_a.source_start + ta * meta_a.frame_stride;
          const int64_t vb = meta_b.source_start + tb * meta_b.frame_stride;
          const int64_t d = std::abs(va - vb);
          if (best_dist < 0 || d < best_dist) {
            best_dist = d;
            best_a = ta;
            best_b = tb;
          }
        }
      return {best_a, best_b};
    }
  }
  throw std::invalid_argument("select_slice_pair: unknown strategy");
}

ContextSet sample_context_frames(const FeatureMap& fmap, int64_t sample, int64_t center,
                                 int64_t context_length) {
  const Shape& s = fmap.values.shape();
  const int64_t T = s[1], H = s[2], W = s[3], C = s[4];
  if (context_length == 0) return {};
  if (context_length < 0 || context_length > T)
    throw std::invalid_argument("sample_context_frames: context length " +
                                std::to_string(context_length) + " exceeds " + std::to_string(T) +
                                " frames");
  const int64_t lo = std::clamp<int64_t>(center - (context_length - 1) / 2, 0, T - context_length);
  Tensor window = slice(fmap.values, {sample, lo, 0, 0, 0}, {sample + 1, lo + context_length, H, W, C});
  ContextSet ctx;
  ctx.tokens = reshape(window, {context_length * H * W, C});
  ctx.positions.reserve(static_cast<size_t>(context_length * H * W));
  for (int64_t t = lo; t < lo + context_length; ++t)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        ctx.positions.push_back({static_cast<double>(t), static_cast<double>(y),
                                 static_cast<double>(x)});
  return ctx;
}

}  // namespace constcl

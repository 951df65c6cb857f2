#include "constcl/heads.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace constcl {

namespace {

struct BilinearTap {
  int64_t index;  // flat (n,t,y,x) voxel index
  double weight;
};

// 2x2 bilinear taps at continuous feature coordinates (cy, cx) on frame
// (sample, t); pixel i covers coordinate [i, i+1) with center i + 0.5.
void bilinear_taps(int64_t n, int64_t t, double cy, double cx, int64_t T, int64_t H, int64_t W,
                   double point_weight, std::vector<int64_t>& idx, std::vector<double>& w) {
  const double iy = std::clamp(cy - 0.5, 0.0, static_cast<double>(H - 1));
  const double ix = std::clamp(cx - 0.5, 0.0, static_cast<double>(W - 1));
  const int64_t y0 = static_cast<int64_t>(iy);
  const int64_t x0 = static_cast<int64_t>(ix);
  const int64_t y1 = std::min<int64_t>(y0 + 1, H - 1);
  const int64_t x1 = std::min<int64_t>(x0 + 1, W - 1);
  const double fy = iy - static_cast<double>(y0);
  const double fx = ix - static_cast<double>(x0);
  const int64_t base = (n * T + t) * H;
  const int64_t corners[4] = {(base + y0) * W + x0, (base + y0) * W + x1, (base + y1) * W + x0,
                              (base + y1) * W + x1};
  const double weights[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
  for (int i = 0; i < 4; ++i) {
    if (weights[i] == 0.0) continue;
    idx.push_back(corners[i]);
    w.push_back(weights[i] * point_weight);
  }
}

}  // namespace

Tensor st_roialign(const FeatureMap& fmap, int64_t sample, const Region& region, int64_t bins) {
  if (!region.valid() || region.area() <= 0.0)
    throw std::invalid_argument("st_roialign: degenerate box [" + std::to_string(region.xmin) +
                                "," + std::to_string(region.ymin) + "," +
                                std::to_string(region.xmax) + "," + std::to_string(region.ymax) +
                                "]");
  if (bins < 1) throw std::invalid_argument("st_roialign: bins must be >= 1");
  const int64_t t = fmap.feature_index_of(sample, region.t);
  const Shape& s = fmap.values.shape();
  const int64_t T = s[1], H = s[2], W = s[3], C = s[4];

  const double ylo = region.ymin * static_cast<double>(H);
  const double xlo = region.xmin * static_cast<double>(W);
  const double bh = (region.ymax - region.ymin) * static_cast<double>(H) / static_cast<double>(bins);
  const double bw = (region.xmax - region.xmin) * static_cast<double>(W) / static_cast<double>(bins);

  std::vector<int64_t> idx;
  std::vector<double> w;
  idx.reserve(static_cast<size_t>(bins * bins * 16));
  w.reserve(idx.capacity());
  const double point_weight = 1.0 / static_cast<double>(bins * bins * 4);
  for (int64_t by = 0; by < bins; ++by)
    for (int64_t bx = 0; bx < bins; ++bx)
      for (double fy : {0.25, 0.75})
        for (double fx : {0.25, 0.75}) {
          const double cy = ylo + (static_cast<double>(by) + fy) * bh;
          const double cx = xlo + (static_cast<double>(bx) + fx) * bw;
          bilinear_taps(sample, t, cy, cx, T, H, W, point_weight, idx, w);
        }
  return lincomb_rows(fmap.values, idx, w, C);
}

GlobalHead make_global_head(ParamStore& params, const std::string& prefix, int64_t in_dim,
                            int64_t hidden, int64_t out_dim) {
  GlobalHead h;
  h.in_dim = in_dim;
  h.hidden = hidden;
  h.out_dim = out_dim;
  h.w1 = params.create(prefix + ".l0.w", {in_dim, hidden}, Init::FanInUniform, in_dim, true);
  h.b1 = params.create(prefix + ".l0.b", {hidden}, Init::Zeros, in_dim, false);
  h.w2 = params.create(prefix + ".l1.w", {hidden, hidden}, Init::FanInUniform, hidden, true);
  h.b2 = params.create(prefix + ".l1.b", {hidden}, Init::Zeros, hidden, false);
  h.w3 = params.create(prefix + ".l2.w", {hidden, out_dim}, Init::FanInUniform, hidden, true);
  h.b3 = params.create(prefix + ".l2.b", {out_dim}, Init::Zeros, hidden, false);
  return h;
}

Tensor global_head_forward(const Tensor& pooled, const GlobalHead& head) {
  if (pooled.rank() != 2 || pooled.shape()[1] != head.in_dim)
    throw std::invalid_argument("global_head: expects [N," + std::to_string(head.in_dim) +
                                "], got " + shape_str(pooled.shape()));
  Tensor x = relu(linear(pooled, head.w1, head.b1));
  x = relu(linear(x, head.w2, head.b2));
  x = linear(x, head.w3, head.b3);
  return l2_normalize(x, 1);
}

VanillaRegionHead make_vanilla_region_head(ParamStore& params, const std::string& prefix,
                                           int64_t dim, int64_t hidden) {
  VanillaRegionHead h;
  h.dim = dim;
  h.hidden = hidden;
  h.w1 = params.create(prefix + ".l0.w", {dim, hidden}, Init::FanInUniform, dim, true);
  h.b1 = params.create(prefix + ".l0.b", {hidden}, Init::Zeros, dim, false);
  h.w2 = params.create(prefix + ".l1.w", {hidden, hidden}, Init::FanInUniform, hidden, true);
  h.b2 = params.create(prefix + ".l1.b", {hidden}, Init::Zeros, hidden, false);
  h.w3 = params.create(prefix + ".l2.w", {hidden, dim}, Init::FanInUniform, hidden, true);
  h.b3 = params.create(prefix + ".l2.b", {dim}, Init::Zeros, hidden, false);
  return h;
}

Tensor vanilla_region_head_forward(const Tensor& h_rows, const VanillaRegionHead& head) {
  Tensor x = h_rows.rank() == 1 ? reshape(h_rows, {1, head.dim}) : h_rows;
  if (x.rank() != 2 || x.shape()[1] != head.dim)
    throw std::invalid_argument("vanilla_region_head: dim mismatch, got " +
                                shape_str(h_rows.shape()));
  Tensor y = relu(linear(x, head.w1, head.b1));
  y = relu(linear(y, head.w2, head.b2));
  y = linear(y, head.w3, head.b3);
  y = l2_normalize(y, 1);
  return h_rows.rank() == 1 ? reshape(y, {head.dim}) : y;
}

ContextHead make_context_head(ParamStore& params, const std::string& prefix, int64_t feat_dim,
                              const AttentionSpec& spec) {
  ContextHead h;
  h.spec = spec;
  h.feat_dim = feat_dim;
  const int64_t D = spec.hidden_dim;
  h.q_in_w = params.create(prefix + ".q_in.w", {feat_dim, D}, Init::FanInUniform, feat_dim, true);
  h.q_in_b = params.create(prefix + ".q_in.b", {D}, Init::Zeros, feat_dim, false);
  h.kv_in_w = params.create(prefix + ".kv_in.w", {feat_dim, D}, Init::FanInUniform, feat_dim, true);
  h.kv_in_b = params.create(prefix + ".kv_in.b", {D}, Init::Zeros, feat_dim, false);
  h.attn = make_attention_weights(params, prefix + ".attn", spec);
  h.out_w = params.create(prefix + ".out.w", {D, feat_dim}, Init::FanInUniform, D, true);
  h.out_b = params.create(prefix + ".out.b", {feat_dim}, Init::Zeros, D, false);
  return h;
}

Tensor context_head_forward(const Tensor& h, const std::array<double, 3>& query_pos,
                            const ContextSet& ctx, const ContextHead& head) {
  if (ctx.count() < 1)
    throw std::invalid_argument("context_head: empty context (use the vanilla head)");
  if (h.numel() != head.feat_dim)
    throw std::invalid_argument("context_head: feature dim mismatch");
  const int64_t D = head.spec.hidden_dim;
  const int64_t M = ctx.count();

  Tensor q = linear(reshape(h, {1, head.feat_dim}), head.q_in_w, head.q_in_b);
  const auto q_code = positional_code(query_pos[0], query_pos[1], query_pos[2], D);
  q = add(q, Tensor::from_f64({1, D}, q_code, q.dtype()));

  Tensor kv = linear(ctx.tokens, head.kv_in_w, head.kv_in_b);
  std::vector<double> kv_codes;
  kv_codes.reserve(static_cast<size_t>(M * D));
  for (const auto& p : ctx.positions) {
    const auto code = positional_code(p[0], p[1], p[2], D);
    kv_codes.insert(kv_codes.end(), code.begin(), code.end());
  }
  kv = add(kv, Tensor::from_f64({M, D}, kv_codes, kv.dtype()));

  Tensor x = multi_head_cross_attention(q, kv, head.spec, head.attn);
  Tensor out = linear(x, head.out_w, head.out_b);
  return reshape(l2_normalize(out, 1), {head.feat_dim});
}

}  // namespace constcl

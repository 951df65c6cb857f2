#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "constcl/backbone.hpp"
#include "constcl/nn.hpp"
#include "constcl/params.hpp"
#include "constcl/region.hpp"
#include "constcl/tensor.hpp"

namespace constcl {

struct RegionFeature {
  Tensor vec;  // [C], raw pooled (not normalized)
  Region region;
  int64_t view_id = 0;
};

// Context tokens with their (t, y, x) feature-grid positions.
struct ContextSet {
  Tensor tokens;  // [M, C]
  std::vector<std::array<double, 3>> positions;

  int64_t count() const { return tokens.defined() ? tokens.shape()[0] : 0; }
};

// Spatio-temporal ROIAlign on the single feature frame the region maps to:
// bins x bins grid over the box, 2x2 bilinear samples per bin, all samples
// averaged into one C-vector. Differentiable w.r.t. the feature map.
// region.t is a source-video frame index resolved through the map's clip_meta.
Tensor st_roialign(const FeatureMap& fmap, int64_t sample, const Region& region, int64_t bins);

struct GlobalHead {
  Tensor w1, b1, w2, b2, w3, b3;
  int64_t in_dim = 0, hidden = 0, out_dim = 0;
};

GlobalHead make_global_head(ParamStore& params, const std::string& prefix, int64_t in_dim,
                            int64_t hidden, int64_t out_dim);
// linear-relu-linear-relu-linear, rows l2-normalized. pooled [N,Cin] -> [N,out]
Tensor global_head_forward(const Tensor& pooled, const GlobalHead& head);

struct VanillaRegionHead {
  Tensor w1, b1, w2, b2, w3, b3;
  int64_t dim = 0, hidden = 0;
};

VanillaRegionHead make_vanilla_region_head(ParamStore& params, const std::string& prefix,
                                           int64_t dim, int64_t hidden);
// MLP rows, l2-normalized. h [n,C] -> [n,C]
Tensor vanilla_region_head_forward(const Tensor& h_rows, const VanillaRegionHead& head);

struct ContextHead {
  Tensor q_in_w, q_in_b;    // C -> D
  Tensor kv_in_w, kv_in_b;  // C -> D
  AttentionWeights attn;
  Tensor out_w, out_b;  // D -> C
  AttentionSpec spec;
  int64_t feat_dim = 0;
};

ContextHead make_context_head(ParamStore& params, const std::string& prefix, int64_t feat_dim,
                              const AttentionSpec& spec);

// Transforms one pooled region feature toward the target view, conditioned on
// that view's context tokens. The region feature becomes the single query
// token, context voxels become keys/values; sinusoidal position codes are
// added to query, key and value tokens. Output is l2-normalized [C].
Tensor context_head_forward(const Tensor& h, const std::array<double, 3>& query_pos,
                            const ContextSet& ctx, const ContextHead& head);

}  // namespace constcl

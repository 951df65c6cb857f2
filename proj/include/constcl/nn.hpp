#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "constcl/params.hpp"
#include "constcl/tensor.hpp"

namespace constcl {

struct ConvSpec {
  int64_t kt = 3, kh = 3, kw = 3;
  int64_t st = 1, sh = 1, sw = 1;
  int64_t pt = 1, ph = 1, pw = 1;
  int64_t in_ch = 0, out_ch = 0;
};

int64_t conv_out_extent(int64_t in, int64_t k, int64_t s, int64_t p);

// Cross-correlation with zero padding. input [N,T,H,W,Cin],
// weights [kt,kh,kw,Cin,Cout], bias [Cout] -> [N,T',H',W',Cout].
Tensor conv3d(const Tensor& input, const ConvSpec& spec, const Tensor& weights,
              const Tensor& bias);

enum class NormMode { Batch, Group };

struct NormState {
  NormMode mode = NormMode::Group;
  int64_t groups = 4;
  double eps = 1e-5;
  double momentum = 0.1;
  Tensor gamma, beta;  // [C]
  // batch mode running statistics (updated only in training forward passes)
  std::vector<double> running_mean, running_var;
};

NormState make_norm_state(ParamStore& params, const std::string& prefix, int64_t channels,
                          NormMode mode, int64_t groups);

// Batch mode normalizes over N,T,H,W per channel (running stats in eval);
// group mode normalizes per sample within channel groups.
Tensor norm_layer(const Tensor& x, NormState& state, bool training);

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct AttentionSpec {
  int64_t layers = 3;
  int64_t heads = 3;
  int64_t hidden_dim = 128;
  int64_t ffn_mult = 4;
};

struct AttentionLayerWeights {
  Tensor ln_q_gamma, ln_q_beta;
  Tensor ln_kv_gamma, ln_kv_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
};

struct AttentionWeights {
  std::vector<AttentionLayerWeights> layers;
};

AttentionWeights make_attention_weights(ParamStore& params, const std::string& prefix,
                                        const AttentionSpec& spec);

// softmax(Q Kt / sqrt(D/heads)) V computed per head. Q [Nq,D], K,V [Nk,D].
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads);

// Pre-LN transformer stack: per layer, cross-attention sublayer then a ReLU
// feed-forward sublayer, residual adds around both.
Tensor multi_head_cross_attention(const Tensor& query_tokens, const Tensor& kv_tokens,
                                  const AttentionSpec& spec, const AttentionWeights& weights);

// Factorized sinusoidal code at a continuous (t, y, x) position. D must be
// even and >= 6; the t and y blocks get the largest even extent <= D/3,
// the x block takes the remainder.
std::vector<double> positional_code(double t, double y, double x, int64_t dim);

// Grid of codes for integer positions, shape [T,H,W,D]. Not trainable.
Tensor st_positional_encoding(int64_t t_extent, int64_t h_extent, int64_t w_extent, int64_t dim,
                              DType dt);

// mean over T,H,W: [N,T,H,W,C] -> [N,C]
Tensor global_avg_pool(const Tensor& feature_map);

}  // namespace constcl

#include "constcl/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace constcl {

int64_t conv_out_extent(int64_t in, int64_t k, int64_t s, int64_t p) {
  return (in + 2 * p - k) / s + 1;
}

Tensor conv3d(const Tensor& input, const ConvSpec& spec, const Tensor& weights,
              const Tensor& bias) {
  if (input.rank() != 5)
    throw std::invalid_argument("conv3d: input must be [N,T,H,W,C], got " +
                                shape_str(input.shape()));
  if (input.shape()[4] != spec.in_ch)
    throw std::invalid_argument("conv3d: input has " + std::to_string(input.shape()[4]) +
                                " channels, spec expects " + std::to_string(spec.in_ch));
  const Shape want_w = {spec.kt, spec.kh, spec.kw, spec.in_ch, spec.out_ch};
  if (weights.shape() != want_w)
    throw std::invalid_argument("conv3d: weights " + shape_str(weights.shape()) +
                                " do not match spec " + shape_str(want_w));
  const int64_t N = input.shape()[0];
  const int64_t To = conv_out_extent(input.shape()[1], spec.kt, spec.st, spec.pt);
  const int64_t Ho = conv_out_extent(input.shape()[2], spec.kh, spec.sh, spec.ph);
  const int64_t Wo = conv_out_extent(input.shape()[3], spec.kw, spec.sw, spec.pw);
  if (To < 1 || Ho < 1 || Wo < 1)
    throw std::invalid_argument("conv3d: output extent would be empty for input " +
                                shape_str(input.shape()));

  const int64_t kernel[3] = {spec.kt, spec.kh, spec.kw};
  const int64_t stride[3] = {spec.st, spec.sh, spec.sw};
  const int64_t pad[3] = {spec.pt, spec.ph, spec.pw};
  Tensor cols = im2col(input, kernel, stride, pad);
  Tensor wmat = reshape(weights, {spec.kt * spec.kh * spec.kw * spec.in_ch, spec.out_ch});
  Tensor out = matmul(cols, wmat);
  out = reshape(out, {N, To, Ho, Wo, spec.out_ch});
  return add(out, bias);
}

NormState make_norm_state(ParamStore& params, const std::string& prefix, int64_t channels,
                          NormMode mode, int64_t groups) {
  NormState st;
  st.mode = mode;
  st.groups = groups;
  st.gamma = params.create(prefix + ".gamma", {channels}, Init::Ones, channels, false);
  st.beta = params.create(prefix + ".beta", {channels}, Init::Zeros, channels, false);
  if (mode == NormMode::Batch) {
    st.running_mean.assign(static_cast<size_t>(channels), 0.0);
    st.running_var.assign(static_cast<size_t>(channels), 1.0);
  }
  return st;
}

namespace {

Tensor affine(const Tensor& normalized, const NormState& st) {
  return add(mul(normalized, st.gamma), st.beta);
}

Tensor batch_norm(const Tensor& x, NormState& st, bool training) {
  const int64_t C = x.shape().back();
  const int64_t M = x.numel() / C;
  Tensor x2 = reshape(x, {M, C});
  if (training) {
    Tensor mu = mean(x2, {0});
    Tensor d = sub(x2, mu);
    Tensor var = mean(mul(d, d), {0});
    Tensor inv = div(Tensor::scalar(1.0, x.dtype()),
                     sqrt(add(var, Tensor::scalar(st.eps, x.dtype()))));
    Tensor y = mul(d, inv);
    for (int64_t c = 0; c < C; ++c) {
      st.running_mean[c] = (1.0 - st.momentum) * st.running_mean[c] + st.momentum * mu.at(c);
      st.running_var[c] = (1.0 - st.momentum) * st.running_var[c] + st.momentum * var.at(c);
    }
    return affine(reshape(y, x.shape()), st);
  }
  Tensor mu = Tensor::from_f64({C}, st.running_mean, x.dtype());
  Tensor var = Tensor::from_f64({C}, st.running_var, x.dtype());
  Tensor inv = div(Tensor::scalar(1.0, x.dtype()),
                   sqrt(add(var, Tensor::scalar(st.eps, x.dtype()))));
  Tensor y = mul(sub(x2, mu), inv);
  return affine(reshape(y, x.shape()), st);
}

Tensor group_norm(const Tensor& x, const NormState& st) {
  const int64_t N = x.shape()[0], T = x.shape()[1], H = x.shape()[2], W = x.shape()[3],
                C = x.shape()[4];
  const int64_t G = st.groups;
  if (C % G != 0)
    throw std::invalid_argument("norm_layer: " + std::to_string(G) +
                                " groups do not divide " + std::to_string(C) + " channels");
  const int64_t cg = C / G;
  // Put the reduction axes in front so the per-(sample,group) statistics
  // broadcast back via leading-axis expansion.
  Tensor g6 = reshape(x, {N, T, H, W, G, cg});
  Tensor front = transpose(g6, {1, 2, 3, 5, 0, 4});  // [T,H,W,cg,N,G]
  const int64_t M = T * H * W * cg;
  Tensor flat = reshape(front, {M, N * G});
  Tensor mu = mean(flat, {0});
  Tensor d = sub(flat, mu);
  Tensor var = mean(mul(d, d), {0});
  Tensor inv = div(Tensor::scalar(1.0, x.dtype()),
                   sqrt(add(var, Tensor::scalar(st.eps, x.dtype()))));
  Tensor y = mul(d, inv);
  y = reshape(y, {T, H, W, cg, N, G});
  y = transpose(y, {4, 0, 1, 2, 5, 3});  // back to [N,T,H,W,G,cg]
  y = reshape(y, x.shape());
  return affine(y, st);
}

}  // namespace

Tensor norm_layer(const Tensor& x, NormState& state, bool training) {
  if (x.rank() != 5)
    throw std::invalid_argument("norm_layer: expects [N,T,H,W,C], got " + shape_str(x.shape()));
  if (x.shape()[4] != state.gamma.shape()[0])
    throw std::invalid_argument("norm_layer: channel mismatch");
  return state.mode == NormMode::Batch ? batch_norm(x, state, training) : group_norm(x, state);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0])
    throw std::invalid_argument("linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  return add(matmul(x, w), b);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 2) throw std::invalid_argument("layer_norm: expects [N,D]");
  const int64_t N = x.shape()[0], D = x.shape()[1];
  Tensor xt = transpose(x, {1, 0});  // [D,N]
  Tensor mu = mean(xt, {0});
  Tensor d = sub(xt, mu);
  Tensor var = mean(mul(d, d), {0});
  Tensor inv = div(Tensor::scalar(1.0, x.dtype()),
                   sqrt(add(var, Tensor::scalar(eps, x.dtype()))));
  Tensor y = transpose(mul(d, inv), {1, 0});
  (void)N;
  return add(mul(y, gamma), beta);
}

AttentionWeights make_attention_weights(ParamStore& params, const std::string& prefix,
                                        const AttentionSpec& spec) {
  if (spec.hidden_dim % spec.heads != 0)
    throw std::invalid_argument("attention: hidden_dim must be divisible by heads");
  AttentionWeights w;
  const int64_t D = spec.hidden_dim;
  const int64_t F = D * spec.ffn_mult;
  for (int64_t l = 0; l < spec.layers; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    AttentionLayerWeights lw;
    lw.ln_q_gamma = params.create(p + ".ln_q.gamma", {D}, Init::Ones, D, false);
    lw.ln_q_beta = params.create(p + ".ln_q.beta", {D}, Init::Zeros, D, false);
    lw.ln_kv_gamma = params.create(p + ".ln_kv.gamma", {D}, Init::Ones, D, false);
    lw.ln_kv_beta = params.create(p + ".ln_kv.beta", {D}, Init::Zeros, D, false);
    lw.wq = params.create(p + ".wq", {D, D}, Init::FanInUniform, D, true);
    lw.bq = params.create(p + ".bq", {D}, Init::Zeros, D, false);
    lw.wk = params.create(p + ".wk", {D, D}, Init::FanInUniform, D, true);
    lw.bk = params.create(p + ".bk", {D}, Init::Zeros, D, false);
    lw.wv = params.create(p + ".wv", {D, D}, Init::FanInUniform, D, true);
    lw.bv = params.create(p + ".bv", {D}, Init::Zeros, D, false);
    lw.wo = params.create(p + ".wo", {D, D}, Init::FanInUniform, D, true);
    lw.bo = params.create(p + ".bo", {D}, Init::Zeros, D, false);
    lw.ln2_gamma = params.create(p + ".ln2.gamma", {D}, Init::Ones, D, false);
    lw.ln2_beta = params.create(p + ".ln2.beta", {D}, Init::Zeros, D, false);
    lw.ff1_w = params.create(p + ".ff1.w", {D, F}, Init::FanInUniform, D, true);
    lw.ff1_b = params.create(p + ".ff1.b", {F}, Init::Zeros, D, false);
    lw.ff2_w = params.create(p + ".ff2.w", {F, D}, Init::FanInUniform, F, true);
    lw.ff2_b = params.create(p + ".ff2.b", {D}, Init::Zeros, F, false);
    w.layers.push_back(lw);
  }
  return w;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads) {
  const int64_t D = q.shape()[1];
  if (D % heads != 0) throw std::invalid_argument("attention: head count must divide dim");
  if (k.shape()[0] < 1) throw std::invalid_argument("attention: empty key set");
  const int64_t dh = D / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const int64_t nq = q.shape()[0], nk = k.shape()[0];
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (int64_t h = 0; h < heads; ++h) {
    Tensor qh = slice(q, {0, h * dh}, {nq, (h + 1) * dh});
    Tensor kh = slice(k, {0, h * dh}, {nk, (h + 1) * dh});
    Tensor vh = slice(v, {0, h * dh}, {nk, (h + 1) * dh});
    Tensor scores = scale(matmul(qh, transpose(kh, {1, 0})), scl);
    Tensor attn = softmax(scores, 1);
    head_outs.push_back(matmul(attn, vh));
  }
  return concat(head_outs, 1);
}

Tensor multi_head_cross_attention(const Tensor& query_tokens, const Tensor& kv_tokens,
                                  const AttentionSpec& spec, const AttentionWeights& weights) {
  if (query_tokens.rank() != 2 || kv_tokens.rank() != 2)
    throw std::invalid_argument("attention: tokens must be [N,D]");
  if (query_tokens.shape()[1] != spec.hidden_dim || kv_tokens.shape()[1] != spec.hidden_dim)
    throw std::invalid_argument("attention: token dim " + std::to_string(query_tokens.shape()[1]) +
                                " != hidden_dim " + std::to_string(spec.hidden_dim));
  if (kv_tokens.shape()[0] < 1) throw std::invalid_argument("attention: empty key set");
  Tensor x = query_tokens;
  for (const auto& lw : weights.layers) {
    Tensor qn = layer_norm(x, lw.ln_q_gamma, lw.ln_q_beta);
    Tensor kvn = layer_norm(kv_tokens, lw.ln_kv_gamma, lw.ln_kv_beta);
    Tensor qp = linear(qn, lw.wq, lw.bq);
    Tensor kp = linear(kvn, lw.wk, lw.bk);
    Tensor vp = linear(kvn, lw.wv, lw.bv);
    Tensor attn = scaled_dot_attention(qp, kp, vp, spec.heads);
    x = add(x, linear(attn, lw.wo, lw.bo));
    Tensor f = layer_norm(x, lw.ln2_gamma, lw.ln2_beta);
    Tensor ff = linear(relu(linear(f, lw.ff1_w, lw.ff1_b)), lw.ff2_w, lw.ff2_b);
    x = add(x, ff);
  }
  return x;
}

namespace {

void axis_block_extents(int64_t dim, int64_t& bt, int64_t& by, int64_t& bx) {
  if (dim < 6 || dim % 2 != 0)
    throw std::invalid_argument("positional encoding: dim must be even and >= 6, got " +
                                std::to_string(dim));
  int64_t base = dim / 3;
  if (base % 2 != 0) --base;
  bt = base;
  by = base;
  bx = dim - 2 * base;
}

void fill_axis_code(double pos, int64_t block, double* out) {
  for (int64_t i = 0; i < block / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(block));
    out[2 * i] = std::sin(pos * freq);
    out[2 * i + 1] = std::cos(pos * freq);
  }
}

}  // namespace

std::vector<double> positional_code(double t, double y, double x, int64_t dim) {
  int64_t bt, by, bx;
  axis_block_extents(dim, bt, by, bx);
  std::vector<double> code(static_cast<size_t>(dim));
  fill_axis_code(t, bt, code.data());
  fill_axis_code(y, by, code.data() + bt);
  fill_axis_code(x, bx, code.data() + bt + by);
  return code;
}

Tensor st_positional_encoding(int64_t t_extent, int64_t h_extent, int64_t w_extent, int64_t dim,
                              DType dt) {
  std::vector<double> values;
  values.reserve(static_cast<size_t>(t_extent * h_extent * w_extent * dim));
  for (int64_t t = 0; t < t_extent; ++t)
    for (int64_t y = 0; y < h_extent; ++y)
      for (int64_t x = 0; x < w_extent; ++x) {
        auto code = positional_code(static_cast<double>(t), static_cast<double>(y),
                                    static_cast<double>(x), dim);
        values.insert(values.end(), code.begin(), code.end());
      }
  return Tensor::from_f64({t_extent, h_extent, w_extent, dim}, values, dt);
}

Tensor global_avg_pool(const Tensor& feature_map) {
  if (feature_map.rank() != 5)
    throw std::invalid_argument("global_avg_pool: expects [N,T,H,W,C]");
  return mean(feature_map, {1, 2, 3});
}

}  // namespace constcl

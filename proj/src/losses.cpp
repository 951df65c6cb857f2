#include "constcl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace constcl {

namespace {

Tensor as_row(const Tensor& v) { return reshape(v, {1, v.numel()}); }

}  // namespace

Tensor info_nce_matrix(const Tensor& anchor, const Tensor& positive, const Tensor& negatives,
                       double tau) {
  if (tau <= 0) throw std::invalid_argument("info_nce: tau must be positive");
  if (anchor.numel() != positive.numel())
    throw std::invalid_argument("info_nce: anchor dim " + std::to_string(anchor.numel()) +
                                " != positive dim " + std::to_string(positive.numel()));
  const int64_t dim = anchor.numel();
  if (!negatives.defined() || negatives.numel() == 0)
    return Tensor::scalar(0.0, anchor.dtype());
  if (negatives.rank() != 2 || negatives.shape()[1] != dim)
    throw std::invalid_argument("info_nce: negatives must be [K," + std::to_string(dim) +
                                "], got " + shape_str(negatives.shape()));
  const int64_t k = negatives.shape()[0];

  Tensor a_col = reshape(anchor, {dim, 1});
  Tensor pos_logit = reshape(matmul(as_row(positive), a_col), {1});
  Tensor neg_logits = reshape(matmul(negatives, a_col), {k});
  Tensor logits = scale(concat({pos_logit, neg_logits}, 0), 1.0 / tau);

  // max-logit subtraction with the max treated as a constant
  double m = logits.at(0);
  for (int64_t i = 1; i <= k; ++i) m = std::max(m, logits.at(i));
  Tensor shifted = sub(logits, Tensor::scalar(m, logits.dtype()));
  Tensor lse = add(Tensor::scalar(m, logits.dtype()), log(sum(exp(shifted))));
  return sub(lse, reshape(scale(pos_logit, 1.0 / tau), Shape{}));
}

Tensor info_nce(const Tensor& anchor, const Tensor& positive, const std::vector<Tensor>& negatives,
                double tau) {
  Tensor negmat;
  if (!negatives.empty()) {
    std::vector<Tensor> rows;
    rows.reserve(negatives.size());
    for (const auto& n : negatives) {
      if (n.numel() != anchor.numel())
        throw std::invalid_argument("info_nce: negative dim " + std::to_string(n.numel()) +
                                    " != anchor dim " + std::to_string(anchor.numel()));
      rows.push_back(as_row(n));
    }
    negmat = concat(rows, 0);
  }
  return info_nce_matrix(anchor, positive, negmat, tau);
}

std::vector<int64_t> match_correspondence(const Tensor& h_rows, const Tensor& h_prime_rows,
                                          bool min_sim) {
  if (h_rows.rank() != 2 || h_prime_rows.rank() != 2)
    throw std::invalid_argument("match_correspondence: expects row matrices");
  const int64_t n = h_rows.shape()[0], m = h_prime_rows.shape()[0];
  const int64_t c = h_rows.shape()[1];
  if (n == 0 || m == 0) throw std::invalid_argument("match_correspondence: empty region set");
  if (h_prime_rows.shape()[1] != c)
    throw std::invalid_argument("match_correspondence: feature dims differ");
  std::vector<int64_t> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;
    double best_sim = 0;
    for (int64_t j = 0; j < m; ++j) {
      double s = 0;
      for (int64_t d = 0; d < c; ++d) s += h_rows.at(i * c + d) * h_prime_rows.at(j * c + d);
      if (j == 0 || (min_sim ? s < best_sim : s > best_sim)) {
        best_sim = s;
        best = j;
      }
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

std::pair<Tensor, std::vector<int64_t>> region_loss(const Tensor& z_rows,
                                                    const Tensor& h_prime_rows,
                                                    const Tensor& h_source_rows,
                                                    const Tensor& negatives,
                                                    const LossConfig& cfg) {
  const std::vector<int64_t> match =
      match_correspondence(h_source_rows, h_prime_rows, cfg.match_min_sim);
  const int64_t n = z_rows.shape()[0];
  const int64_t dim = z_rows.shape()[1];
  Tensor total = Tensor::scalar(0.0, z_rows.dtype());
  for (int64_t i = 0; i < n; ++i) {
    Tensor anchor = reshape(take_rows(z_rows, std::vector<int64_t>{i}), {dim});
    Tensor target =
        reshape(take_rows(h_prime_rows, std::vector<int64_t>{match[static_cast<size_t>(i)]}), {dim});
    if (cfg.stop_gradient_targets) target = target.detach();
    total = add(total, info_nce_matrix(anchor, target, negatives, cfg.tau_region));
  }
  return {scale(total, 1.0 / static_cast<double>(n)), match};
}

Tensor dense_loss(const Tensor& f_map, const Tensor& f_prime_map, const Tensor& negatives,
                  const LossConfig& cfg) {
  if (f_map.shape().back() != f_prime_map.shape().back())
    throw std::invalid_argument("dense_loss: channel dims differ, " + shape_str(f_map.shape()) +
                                " vs " + shape_str(f_prime_map.shape()));
  const int64_t c = f_map.shape().back();
  Tensor f = reshape(f_map, {f_map.numel() / c, c});
  Tensor fp = reshape(f_prime_map, {f_prime_map.numel() / c, c});
  const std::vector<int64_t> match = match_correspondence(f, fp, cfg.match_min_sim);
  Tensor total = Tensor::scalar(0.0, f.dtype());
  for (int64_t i = 0; i < f.shape()[0]; ++i) {
    Tensor anchor = reshape(take_rows(f, std::vector<int64_t>{i}), {c});
    Tensor target =
        reshape(take_rows(fp, std::vector<int64_t>{match[static_cast<size_t>(i)]}), {c});
    total = add(total, info_nce_matrix(anchor, target, negatives, cfg.tau_region));
  }
  return total;
}

Tensor global_loss(const Tensor& z_rows, const Tensor& z_prime_rows, double tau) {
  if (z_rows.rank() != 2 || z_prime_rows.rank() != 2 ||
      z_rows.shape() != z_prime_rows.shape())
    throw std::invalid_argument("global_loss: views must be equal-shaped row matrices");
  const int64_t n = z_rows.shape()[0];
  if (n == 0) throw std::invalid_argument("global_loss: empty batch");
  const int64_t dim = z_rows.shape()[1];
  Tensor stacked = concat({z_rows, z_prime_rows}, 0);  // [2N, dim]
  Tensor total = Tensor::scalar(0.0, z_rows.dtype());
  for (int64_t k = 0; k < 2 * n; ++k) {
    const int64_t partner = (k + n) % (2 * n);
    std::vector<int64_t> neg_idx;
    neg_idx.reserve(static_cast<size_t>(2 * n - 2));
    for (int64_t j = 0; j < 2 * n; ++j)
      if (j != k && j != partner) neg_idx.push_back(j);
    Tensor anchor = reshape(take_rows(stacked, std::vector<int64_t>{k}), {dim});
    Tensor positive = reshape(take_rows(stacked, std::vector<int64_t>{partner}), {dim});
    Tensor negatives = neg_idx.empty() ? Tensor() : take_rows(stacked, neg_idx);
    total = add(total, info_nce_matrix(anchor, positive, negatives, tau));
  }
  return scale(total, 1.0 / static_cast<double>(2 * n));
}

Tensor total_loss(const Tensor& l_g, const Tensor& l_r, double omega) {
  return add(mean(l_g), scale(mean(l_r), omega));
}

}  // namespace constcl

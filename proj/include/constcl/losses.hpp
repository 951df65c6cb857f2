#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "constcl/tensor.hpp"

namespace constcl {

enum class LossMode { Dense, VanillaRegion, Contextualized };

struct LossConfig {
  double tau_global = 0.1;
  double tau_region = 0.2;
  double omega = 0.01;
  LossMode mode = LossMode::Contextualized;
  bool symmetrize = true;
  // match targets by minimum similarity instead of maximum (the literal
  // equation in place of the prose reading)
  bool match_min_sim = false;
  bool stop_gradient_targets = false;
};

struct LossReport {
  int64_t step = 0;
  double L_g = 0.0;
  double L_r = 0.0;
  double L_total = 0.0;
  double lr = 0.0;
  std::vector<std::vector<int64_t>> match_indices;  // per video, source->target
  int64_t negatives_count = 0;
};

// -log( exp(a.p/tau) / (exp(a.p/tau) + sum_k exp(a.n_k/tau)) ), stabilized by
// max-logit subtraction. Zero negatives give exactly 0.
Tensor info_nce(const Tensor& anchor, const Tensor& positive, const std::vector<Tensor>& negatives,
                double tau);
// Same loss with negatives stacked as rows of a matrix ([K,C]); pass an
// undefined tensor for no negatives.
Tensor info_nce_matrix(const Tensor& anchor, const Tensor& positive, const Tensor& negatives,
                       double tau);

// j(i) = argmax_j h_i . h'_j (or argmin with min_sim), ties to the lowest
// index. Rows are expected l2-normalized; the mapping need not be injective.
std::vector<int64_t> match_correspondence(const Tensor& h_rows, const Tensor& h_prime_rows,
                                          bool min_sim = false);

// One direction of the region loss: correspondence from (h_source, h_prime),
// then the mean over regions of info_nce(z_i, h'_j(i), negatives).
std::pair<Tensor, std::vector<int64_t>> region_loss(const Tensor& z_rows,
                                                    const Tensor& h_prime_rows,
                                                    const Tensor& h_source_rows,
                                                    const Tensor& negatives,
                                                    const LossConfig& cfg);

// Dense space-time baseline: per-voxel correspondence by max similarity on
// the given (already projected and normalized) maps, InfoNCE summed.
Tensor dense_loss(const Tensor& f_map, const Tensor& f_prime_map, const Tensor& negatives,
                  const LossConfig& cfg);

// Symmetric video-level InfoNCE over both views; averaged over the 2N anchors.
Tensor global_loss(const Tensor& z_rows, const Tensor& z_prime_rows, double tau);

// mean(L_g) + omega * mean(L_r); inputs are scalars or per-video vectors.
Tensor total_loss(const Tensor& l_g, const Tensor& l_r, double omega);

}  // namespace constcl

#include "constcl/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "constcl/serialize.hpp"

namespace constcl {

namespace {
using json = nlohmann::json;
}

Model::Model(const ModelConfig& model_cfg)
    : cfg(model_cfg), params(model_cfg.seed, model_cfg.dtype), backbone(params, model_cfg.backbone) {
  const int64_t c5 = backbone.c5_channels();
  global_head = make_global_head(params, "global_head", c5, cfg.global_hidden, cfg.global_out);
  vanilla_head = make_vanilla_region_head(params, "region_head", c5, cfg.region_hidden);
  context_head = make_context_head(params, "ctx_head", c5, cfg.attention);
}

EndpointSet Model::forward_clips(const Tensor& clips, const std::vector<ClipMeta>& meta,
                                 bool training) {
  return backbone.forward(clips, meta, training);
}

namespace {

Tensor stack_clips(const std::vector<ViewPair>& pairs, bool prime, DType dt) {
  const Tensor& first = prime ? pairs.front().x_prime.frames : pairs.front().x.frames;
  const int64_t per = first.numel();
  Shape shape = first.shape();
  shape.insert(shape.begin(), static_cast<int64_t>(pairs.size()));
  std::vector<double> buf(static_cast<size_t>(per * static_cast<int64_t>(pairs.size())));
  for (size_t v = 0; v < pairs.size(); ++v) {
    const Tensor& f = prime ? pairs[v].x_prime.frames : pairs[v].x.frames;
    for (int64_t i = 0; i < per; ++i) buf[v * static_cast<size_t>(per) + static_cast<size_t>(i)] = f.at(i);
  }
  return Tensor::from_f64(shape, buf, dt);
}

std::vector<double> clip_frame_pixels(const Tensor& frames, int64_t frame) {
  const int64_t per = frames.shape()[1] * frames.shape()[2] * 3;
  std::vector<double> out(static_cast<size_t>(per));
  for (int64_t i = 0; i < per; ++i) out[static_cast<size_t>(i)] = frames.at(frame * per + i);
  return out;
}

struct ViewRegionData {
  std::vector<Region> regions;
  std::vector<Tensor> pooled;  // raw [C] features
  Tensor pooled_rows;          // [n,C] raw
  Tensor norm_rows;            // [n,C] l2-normalized
  Tensor z_rows;               // [n,C] transformed, normalized
  int64_t slice = 0;           // feature frame index
};

Tensor rows_of(const std::vector<Tensor>& vecs) {
  std::vector<Tensor> rows;
  rows.reserve(vecs.size());
  for (const auto& v : vecs) rows.push_back(reshape(v, {1, v.numel()}));
  return concat(rows, 0);
}

}  // namespace

Tensor training_objective(Model& model, const TrainConfig& cfg,
                          const std::vector<Tensor>& batch_videos, int64_t step,
                          LossReport* report) {
  if (batch_videos.empty()) throw std::invalid_argument("train_step: empty batch");
  const int64_t B = static_cast<int64_t>(batch_videos.size());
  const DType dt = model.cfg.dtype;
  LossReport local;
  LossReport& rep = report ? *report : local;
  rep.match_indices.clear();

  std::vector<ViewPair> pairs;
  pairs.reserve(static_cast<size_t>(B));
  for (int64_t v = 0; v < B; ++v)
    pairs.push_back(
        sample_view_pair(batch_videos[static_cast<size_t>(v)], cfg.sampling,
                         rng_key(cfg.seed, "viewpair", static_cast<uint64_t>(step), static_cast<uint64_t>(v))));

  std::vector<ClipMeta> meta_a, meta_b;
  for (const auto& p : pairs) {
    meta_a.push_back({p.x.source_start, p.x.frame_stride});
    meta_b.push_back({p.x_prime.source_start, p.x_prime.frame_stride});
  }
  EndpointSet end_a = model.backbone.forward(stack_clips(pairs, false, dt), meta_a, true);
  EndpointSet end_b = model.backbone.forward(stack_clips(pairs, true, dt), meta_b, true);

  Tensor zg_a = global_head_forward(global_avg_pool(end_a.c5_g.values), model.global_head);
  Tensor zg_b = global_head_forward(global_avg_pool(end_b.c5_g.values), model.global_head);
  Tensor l_g = global_loss(zg_a, zg_b, cfg.loss.tau_global);

  rep.step = step;

  Tensor l_total = l_g;
  Tensor l_r_mean;
  const bool region_active = cfg.loss.omega != 0.0;
  if (region_active) {
    const FeatureMap& fa = end_a.c5_r;
    const FeatureMap& fb = end_b.c5_r;
    const int64_t hf = fa.values.shape()[2], wf = fa.values.shape()[3];
    const int64_t c5 = model.backbone.c5_channels();
    const bool use_context =
        cfg.loss.mode == LossMode::Contextualized && cfg.sampling.context_length > 0;

    std::vector<ViewRegionData> view_a(static_cast<size_t>(B)), view_b(static_cast<size_t>(B));
    for (int64_t v = 0; v < B; ++v) {
      Rng slice_rng(rng_key(cfg.seed, "slice", static_cast<uint64_t>(step), static_cast<uint64_t>(v)));
      auto [ta, tb] = select_slice_pair(cfg.sampling.strategy, fa.meta[static_cast<size_t>(v)],
                                        fa.frames(), fb.meta[static_cast<size_t>(v)], fb.frames(),
                                        slice_rng);
      const int64_t branch_ts = model.backbone.branch_temporal_stride();

      if (cfg.loss.mode == LossMode::Dense) {
        // the dense baseline contrasts projected slice voxels, no regions
        auto project_slice = [&](const FeatureMap& fmap, int64_t t_slice) {
          ViewRegionData data;
          data.slice = t_slice;
          Tensor sl = slice(fmap.values, {v, t_slice, 0, 0, 0}, {v + 1, t_slice + 1, hf, wf, c5});
          data.z_rows = vanilla_region_head_forward(reshape(sl, {hf * wf, c5}), model.vanilla_head);
          return data;
        };
        view_a[static_cast<size_t>(v)] = project_slice(fa, ta);
        view_b[static_cast<size_t>(v)] = project_slice(fb, tb);
        continue;
      }

      auto build_view = [&](const FeatureMap& fmap, const ViewPair& pair, bool prime,
                            int64_t t_slice, uint64_t view_tag) {
        ViewRegionData data;
        data.slice = t_slice;
        const int64_t video_frame = fmap.video_frame_of(v, t_slice);
        Rng box_rng(rng_key(cfg.seed, "regions", static_cast<uint64_t>(step),
                            static_cast<uint64_t>(v) * 2 + view_tag));
        if (cfg.regions.method == RegionMethod::Random) {
          data.regions = gen_random_boxes(cfg.sampling.out_h, cfg.sampling.out_w, cfg.regions,
                                          box_rng, video_frame);
        } else {
          const Tensor& frames = prime ? pair.x_prime.frames : pair.x.frames;
          const int64_t clip_frame = t_slice * branch_ts;
          auto pixels = clip_frame_pixels(frames, clip_frame);
          data.regions = generate_regions(pixels, cfg.sampling.out_h, cfg.sampling.out_w,
                                          cfg.regions, box_rng, video_frame);
          if (data.regions.empty()) {
            // near-uniform frames can filter every segment box away
            RegionGenConfig fallback = cfg.regions;
            fallback.method = RegionMethod::Random;
            data.regions = gen_random_boxes(cfg.sampling.out_h, cfg.sampling.out_w, fallback,
                                            box_rng, video_frame);
          }
        }
        for (const Region& r : data.regions)
          data.pooled.push_back(st_roialign(fmap, v, r, model.cfg.roialign_bins));
        data.pooled_rows = rows_of(data.pooled);
        data.norm_rows = l2_normalize(data.pooled_rows, 1);
        return data;
      };
      view_a[static_cast<size_t>(v)] = build_view(fa, pairs[static_cast<size_t>(v)], false, ta, 0);
      view_b[static_cast<size_t>(v)] = build_view(fb, pairs[static_cast<size_t>(v)], true, tb, 1);

      auto transform = [&](ViewRegionData& src, const FeatureMap& other_map, int64_t other_slice) {
        if (use_context) {
          ContextSet ctx =
              sample_context_frames(other_map, v, other_slice, cfg.sampling.context_length);
          std::vector<Tensor> zs;
          zs.reserve(src.pooled.size());
          for (size_t i = 0; i < src.pooled.size(); ++i) {
            const Region& r = src.regions[i];
            const std::array<double, 3> pos = {
                static_cast<double>(src.slice),
                0.5 * (r.ymin + r.ymax) * static_cast<double>(hf) - 0.5,
                0.5 * (r.xmin + r.xmax) * static_cast<double>(wf) - 0.5};
            zs.push_back(context_head_forward(src.pooled[i], pos, ctx, model.context_head));
          }
          src.z_rows = rows_of(zs);
        } else {
          src.z_rows = vanilla_region_head_forward(src.pooled_rows, model.vanilla_head);
        }
      };
      transform(view_a[static_cast<size_t>(v)], fb, tb);
      transform(view_b[static_cast<size_t>(v)], fa, ta);
    }

    std::vector<Tensor> per_video_losses;
    for (int64_t v = 0; v < B; ++v) {
      std::vector<Tensor> neg_blocks;
      for (int64_t u = 0; u < B; ++u) {
        if (u == v) continue;
        if (cfg.loss.mode == LossMode::Dense) {
          neg_blocks.push_back(view_a[static_cast<size_t>(u)].z_rows);
          neg_blocks.push_back(view_b[static_cast<size_t>(u)].z_rows);
        } else {
          neg_blocks.push_back(view_a[static_cast<size_t>(u)].norm_rows);
          neg_blocks.push_back(view_b[static_cast<size_t>(u)].norm_rows);
          neg_blocks.push_back(view_a[static_cast<size_t>(u)].z_rows);
          neg_blocks.push_back(view_b[static_cast<size_t>(u)].z_rows);
        }
      }
      Tensor negatives = neg_blocks.empty() ? Tensor() : concat(neg_blocks, 0);
      if (v == 0 && negatives.defined()) rep.negatives_count = negatives.shape()[0];

      Tensor lr_v;
      if (cfg.loss.mode == LossMode::Dense) {
        const Tensor& za = view_a[static_cast<size_t>(v)].z_rows;
        const Tensor& zb = view_b[static_cast<size_t>(v)].z_rows;
        Tensor d1 = dense_loss(za, zb, negatives, cfg.loss);
        lr_v = cfg.loss.symmetrize ? scale(add(d1, dense_loss(zb, za, negatives, cfg.loss)), 0.5)
                                   : d1;
      } else {
        auto [d1, m1] =
            region_loss(view_a[static_cast<size_t>(v)].z_rows, view_b[static_cast<size_t>(v)].norm_rows,
                        view_a[static_cast<size_t>(v)].norm_rows, negatives, cfg.loss);
        rep.match_indices.push_back(m1);
        lr_v = d1;
        if (cfg.loss.symmetrize) {
          auto [d2, m2] = region_loss(view_b[static_cast<size_t>(v)].z_rows,
                                      view_a[static_cast<size_t>(v)].norm_rows,
                                      view_b[static_cast<size_t>(v)].norm_rows, negatives, cfg.loss);
          (void)m2;
          lr_v = scale(add(d1, d2), 0.5);
        }
      }
      per_video_losses.push_back(reshape(lr_v, {1}));
    }
    l_r_mean = mean(concat(per_video_losses, 0));
    l_total = total_loss(l_g, l_r_mean, cfg.loss.omega);
  }

  rep.L_g = l_g.item();
  rep.L_r = region_active ? l_r_mean.item() : 0.0;
  rep.L_total = l_total.item();
  return l_total;
}

LossReport train_step(Model& model, OptimizerState& opt, const TrainConfig& cfg,
                      const std::vector<Tensor>& batch_videos) {
  LossReport rep;
  Tensor l_total = training_objective(model, cfg, batch_videos, opt.step, &rep);
  GradMap grads = backward(l_total, model.params.tensors());
  const double lr = lr_at_step(opt.step, cfg.schedule);
  sgd_momentum_step(model.params, grads, opt, lr, cfg.momentum, cfg.weight_decay);
  opt.step += 1;
  rep.lr = lr;
  if (!std::isfinite(rep.L_total))
    throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(rep.step));
  return rep;
}

double model_objective_gradcheck(Model& model, const TrainConfig& cfg,
                                 const std::vector<Tensor>& batch_videos, double eps) {
  Tensor objective = training_objective(model, cfg, batch_videos, 0);
  GradMap grads = backward(objective, model.params.tensors());
  double max_rel = 0.0;
  for (const auto& entry : model.params.entries()) {
    const Tensor& analytic = grads.at(entry.tensor);
    std::vector<double> values = entry.tensor.to_f64();
    for (size_t k = 0; k < values.size(); ++k) {
      const double orig = values[k];
      values[k] = orig + eps;
      entry.tensor.overwrite_data(values);
      const double fplus = training_objective(model, cfg, batch_videos, 0).item();
      values[k] = orig - eps;
      entry.tensor.overwrite_data(values);
      const double fminus = training_objective(model, cfg, batch_videos, 0).item();
      values[k] = orig;
      entry.tensor.overwrite_data(values);
      const double fd = (fplus - fminus) / (2.0 * eps);
      const double a = analytic.at(static_cast<int64_t>(k));
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

std::vector<LossReport> train_loop(Model& model, OptimizerState& opt, const TrainConfig& cfg,
                                   const std::vector<Tensor>& dataset, int64_t steps,
                                   std::ostream* log) {
  if (dataset.empty()) throw std::invalid_argument("train_loop: empty dataset");
  std::vector<LossReport> reports;
  reports.reserve(static_cast<size_t>(steps));
  for (int64_t s = 0; s < steps; ++s) {
    const int64_t b = std::min<int64_t>(cfg.batch_size, static_cast<int64_t>(dataset.size()));
    std::vector<int64_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(rng_key(cfg.seed, "batch", static_cast<uint64_t>(opt.step)));
    for (int64_t i = 0; i < b; ++i) {
      const int64_t j = rng.uniform_int(i, static_cast<int64_t>(order.size()) - 1);
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    std::vector<Tensor> batch;
    batch.reserve(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) batch.push_back(dataset[static_cast<size_t>(order[static_cast<size_t>(i)])]);
    LossReport rep = train_step(model, opt, cfg, batch);
    if (log) (*log) << loss_report_jsonl(rep) << "\n";
    reports.push_back(std::move(rep));
  }
  return reports;
}

std::string loss_report_jsonl(const LossReport& report) {
  json j{{"step", report.step},
         {"L_g", report.L_g},
         {"L_r", report.L_r},
         {"L_total", report.L_total},
         {"lr", report.lr}};
  return j.dump();
}

// ------------------------------------------------------------- checkpoints

void checkpoint_save(const std::string& dir, const Model& model, const OptimizerState& opt) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string blob_path = dir + "/tensors.bin";
  std::ofstream blob(blob_path, std::ios::binary);
  if (!blob) throw std::runtime_error("checkpoint_save: cannot open " + blob_path);

  json manifest;
  manifest["version"] = 1;
  manifest["step"] = opt.step;
  json params = json::array();
  auto dump_tensor = [&](const std::string& name, const Tensor& t) {
    json e;
    e["name"] = name;
    e["offset"] = static_cast<int64_t>(blob.tellp());
    e["shape"] = t.shape();
    e["dtype"] = dtype_name(t.dtype());
    write_tensor(blob, t);
    return e;
  };
  for (const auto& entry : model.params.entries()) params.push_back(dump_tensor(entry.name, entry.tensor));
  manifest["params"] = params;
  json vels = json::array();
  for (const auto& entry : model.params.entries()) {
    auto it = opt.velocity.find(entry.name);
    if (it != opt.velocity.end()) vels.push_back(dump_tensor(entry.name, it->second));
  }
  manifest["velocities"] = vels;
  blob.close();

  std::ofstream mf(dir + "/manifest.json");
  if (!mf) throw std::runtime_error("checkpoint_save: cannot open manifest in " + dir);
  mf << manifest.dump(2) << "\n";
}

void checkpoint_load(const std::string& dir, Model& model, OptimizerState& opt) {
  const std::string manifest_path = dir + "/manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("checkpoint_load: cannot open " + manifest_path);
  json manifest = json::parse(mf, nullptr, false);
  if (manifest.is_discarded())
    throw std::runtime_error("checkpoint_load: invalid JSON in " + manifest_path);
  if (manifest.value("version", -1) != 1)
    throw std::runtime_error("checkpoint_load: unsupported manifest version in " + manifest_path);

  const std::string blob_path = dir + "/tensors.bin";
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw std::runtime_error("checkpoint_load: cannot open " + blob_path);

  auto read_at = [&](const json& e) {
    blob.clear();
    blob.seekg(e.at("offset").get<int64_t>());
    return read_tensor(blob, blob_path);
  };
  for (const auto& e : manifest.at("params")) {
    const std::string name = e.at("name").get<std::string>();
    if (!model.params.has(name))
      throw std::runtime_error("checkpoint_load: checkpoint has unknown parameter " + name);
    Tensor t = read_at(e);
    Tensor dst = model.params.get(name);
    if (t.shape() != dst.shape() || t.dtype() != dst.dtype())
      throw std::runtime_error("checkpoint_load: shape/dtype mismatch for " + name);
    dst.overwrite_data_raw(t);
  }
  opt.velocity.clear();
  for (const auto& e : manifest.at("velocities")) {
    const std::string name = e.at("name").get<std::string>();
    opt.velocity.emplace(name, read_at(e));
  }
  opt.step = manifest.at("step").get<int64_t>();
}

}  // namespace constcl

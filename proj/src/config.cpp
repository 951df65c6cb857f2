#include "constcl/config.hpp"

#include <fstream>
#include <stdexcept>

namespace constcl {

namespace {

using json = nlohmann::json;

[[noreturn]] void config_error(const std::string& msg) { throw std::invalid_argument(msg); }

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;  // int/float interchangeable
  return a.type() == b.type();
}

void merge_into(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) config_error("config: expected object at '" + (prefix.empty() ? "<root>" : prefix) + "'");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) config_error("config: unknown key '" + path + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_into(slot, it.value(), path);
    } else {
      if (!same_kind(slot, it.value()))
        config_error("config: type mismatch at '" + path + "' (expected " +
                     std::string(slot.type_name()) + ", got " +
                     std::string(it.value().type_name()) + ")");
      slot = it.value();
    }
  }
}

void apply_override(json& base, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) config_error("config: --set expects key=value, got '" + kv + "'");
  const std::string key = kv.substr(0, eq);
  const std::string value = kv.substr(eq + 1);

  json* slot = &base;
  std::string path;
  size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    path = path.empty() ? part : path + "." + part;
    if (!slot->contains(part)) config_error("config: unknown key '" + path + "'");
    slot = &(*slot)[part];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded() || (!parsed.is_number() && !parsed.is_boolean() &&
                                !parsed.is_array() && !parsed.is_string()))
    parsed = json(value);  // bare strings like `center`
  if (slot->is_object()) config_error("config: cannot assign scalar to section '" + path + "'");
  if (!same_kind(*slot, parsed))
    config_error("config: type mismatch at '" + path + "' (expected " +
                 std::string(slot->type_name()) + ", got " + std::string(parsed.type_name()) + ")");
  *slot = parsed;
}

template <class T>
std::vector<T> as_vec(const json& j) {
  return j.get<std::vector<T>>();
}

}  // namespace

json default_config_json() {
  return json{
      {"seed", 0},
      {"model",
       {{"dtype", "f32"},
        {"global_hidden", 128},
        {"global_out", 128},
        {"region_hidden", 128},
        {"attn_layers", 3},
        {"attn_heads", 3},
        {"attn_hidden", 126},
        {"ffn_mult", 4},
        {"roialign_bins", 4}}},
      {"backbone",
       {{"in_channels", 3},
        {"widths", {8, 16, 32, 32}},
        {"blocks", {1, 1, 1}},
        {"temporal_strides", {1, 2, 2, 1}},
        {"spatial_strides", {2, 2, 2, 1}},
        {"branch_width", 64},
        {"branch_blocks", 1},
        {"branch_temporal_stride", 1},
        {"branch_spatial_stride", 1},
        {"norm", "batch"},
        {"groups", 4}}},
      {"sampling",
       {{"strategy", "center"},
        {"context_length", 4},
        {"clip_len", 16},
        {"frame_stride", 2},
        {"out_size", 32},
        {"crop_area", {0.3, 1.0}},
        {"crop_aspect", {0.5, 2.0}},
        {"flip", true}}},
      {"regions",
       {{"method", "random"},
        {"boxes_per_frame", 8},
        {"aspect", {0.5, 2.0}},
        {"size", {0.1, 0.5}},
        {"size_is_area", true},
        {"slic_k", 16},
        {"slic_compactness", 10.0},
        {"slic_iters", 10},
        {"fh_scale", 500.0},
        {"fh_min_size", 500},
        {"filter", {0.05, 0.7}}}},
      {"loss",
       {{"tau_global", 0.1},
        {"tau_region", 0.2},
        {"omega", 0.01},
        {"mode", "contextualized"},
        {"symmetrize", true},
        {"match", "max_sim"},
        {"stop_gradient_targets", false}}},
      {"train",
       {{"peak_lr", 0.2},
        {"warmup_steps", 50},
        {"total_steps", 500},
        {"momentum", 0.9},
        {"weight_decay", 1e-6},
        {"batch_size", 4},
        {"log_every", 1}}},
      {"data",
       {{"videos", 64},
        {"sprites", 4},
        {"classes", 4},
        {"canvas", 64},
        {"frames", 64},
        {"sprite_half_size", {6.0, 10.0}},
        {"speed", {0.5, 0.68}},
        {"direction_jitter", 0.15},
        {"background_contrast", 0.1},
        {"background_flicker", 0.15},
        {"hue_spread", 1.0},
        {"base_hue", 0.0},
        {"base_hue_jitter", 0.03}}},
      {"eval",
       {{"pairs", 200},
        {"train_fraction", 0.75},
        {"probe_steps", 300},
        {"probe_lr", 1.0},
        {"track_grid", 16}}},
  };
}

RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
  json resolved = default_config_json();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) config_error("config: cannot open file '" + path + "'");
    json user = json::parse(is, nullptr, false);
    if (user.is_discarded()) config_error("config: invalid JSON in '" + path + "'");
    merge_into(resolved, user, "");
  }
  for (const auto& kv : overrides) apply_override(resolved, kv);
  return RunConfig{resolved};
}

uint64_t RunConfig::seed() const { return resolved.at("seed").get<uint64_t>(); }

ModelConfig RunConfig::model_config() const {
  const json& m = resolved.at("model");
  const json& b = resolved.at("backbone");
  ModelConfig cfg;
  cfg.seed = seed();
  const std::string dt = m.at("dtype").get<std::string>();
  if (dt == "f32") cfg.dtype = DType::F32;
  else if (dt == "f64") cfg.dtype = DType::F64;
  else config_error("config: model.dtype must be f32 or f64");
  cfg.global_hidden = m.at("global_hidden").get<int64_t>();
  cfg.global_out = m.at("global_out").get<int64_t>();
  cfg.region_hidden = m.at("region_hidden").get<int64_t>();
  cfg.attention.layers = m.at("attn_layers").get<int64_t>();
  cfg.attention.heads = m.at("attn_heads").get<int64_t>();
  cfg.attention.hidden_dim = m.at("attn_hidden").get<int64_t>();
  cfg.attention.ffn_mult = m.at("ffn_mult").get<int64_t>();
  cfg.roialign_bins = m.at("roialign_bins").get<int64_t>();

  const auto widths = as_vec<int64_t>(b.at("widths"));
  const auto blocks = as_vec<int64_t>(b.at("blocks"));
  const auto tstrides = as_vec<int64_t>(b.at("temporal_strides"));
  const auto sstrides = as_vec<int64_t>(b.at("spatial_strides"));
  if (widths.size() < 2) config_error("config: backbone.widths needs a stem plus stages");
  if (blocks.size() != widths.size() - 1)
    config_error("config: backbone.blocks must cover every non-stem stage");
  if (tstrides.size() != widths.size() || sstrides.size() != widths.size())
    config_error("config: backbone stride lists must align with widths");
  BackboneConfig& bb = cfg.backbone;
  bb.in_channels = b.at("in_channels").get<int64_t>();
  bb.stem = {widths[0], 0, tstrides[0], sstrides[0]};
  bb.stages.clear();
  for (size_t i = 1; i < widths.size(); ++i)
    bb.stages.push_back({widths[i], blocks[i - 1], tstrides[i], sstrides[i]});
  bb.branch = {b.at("branch_width").get<int64_t>(), b.at("branch_blocks").get<int64_t>(),
               b.at("branch_temporal_stride").get<int64_t>(),
               b.at("branch_spatial_stride").get<int64_t>()};
  const std::string norm = b.at("norm").get<std::string>();
  if (norm == "group") bb.norm = NormMode::Group;
  else if (norm == "batch") bb.norm = NormMode::Batch;
  else config_error("config: backbone.norm must be group or batch");
  bb.groups = b.at("groups").get<int64_t>();
  return cfg;
}

TrainConfig RunConfig::train_config() const {
  const json& t = resolved.at("train");
  const json& l = resolved.at("loss");
  const json& s = resolved.at("sampling");
  const json& r = resolved.at("regions");
  TrainConfig cfg;
  cfg.seed = seed();
  cfg.schedule.peak_lr = t.at("peak_lr").get<double>();
  cfg.schedule.warmup_steps = t.at("warmup_steps").get<int64_t>();
  cfg.schedule.total_steps = t.at("total_steps").get<int64_t>();
  cfg.momentum = t.at("momentum").get<double>();
  cfg.weight_decay = t.at("weight_decay").get<double>();
  cfg.batch_size = t.at("batch_size").get<int64_t>();

  cfg.loss.tau_global = l.at("tau_global").get<double>();
  cfg.loss.tau_region = l.at("tau_region").get<double>();
  cfg.loss.omega = l.at("omega").get<double>();
  const std::string mode = l.at("mode").get<std::string>();
  if (mode == "dense") cfg.loss.mode = LossMode::Dense;
  else if (mode == "vanilla_region") cfg.loss.mode = LossMode::VanillaRegion;
  else if (mode == "contextualized") cfg.loss.mode = LossMode::Contextualized;
  else config_error("config: loss.mode must be dense, vanilla_region or contextualized");
  cfg.loss.symmetrize = l.at("symmetrize").get<bool>();
  const std::string match = l.at("match").get<std::string>();
  if (match == "max_sim") cfg.loss.match_min_sim = false;
  else if (match == "min_sim") cfg.loss.match_min_sim = true;
  else config_error("config: loss.match must be max_sim or min_sim");
  cfg.loss.stop_gradient_targets = l.at("stop_gradient_targets").get<bool>();

  const std::string strat = s.at("strategy").get<std::string>();
  if (strat == "random") cfg.sampling.strategy = SliceStrategy::Random;
  else if (strat == "center") cfg.sampling.strategy = SliceStrategy::Center;
  else if (strat == "nearest") cfg.sampling.strategy = SliceStrategy::Nearest;
  else config_error("config: sampling.strategy must be random, center or nearest");
  cfg.sampling.context_length = s.at("context_length").get<int64_t>();
  cfg.sampling.clip_len = s.at("clip_len").get<int64_t>();
  cfg.sampling.frame_stride = s.at("frame_stride").get<int64_t>();
  cfg.sampling.out_h = cfg.sampling.out_w = s.at("out_size").get<int64_t>();
  const auto area = as_vec<double>(s.at("crop_area"));
  const auto aspect = as_vec<double>(s.at("crop_aspect"));
  if (area.size() != 2 || aspect.size() != 2)
    config_error("config: sampling.crop_area/crop_aspect must be [lo, hi]");
  cfg.sampling.crop_area_min = area[0];
  cfg.sampling.crop_area_max = area[1];
  cfg.sampling.crop_aspect_min = aspect[0];
  cfg.sampling.crop_aspect_max = aspect[1];
  cfg.sampling.flip_enabled = s.at("flip").get<bool>();
  cfg.sampling.seed = cfg.seed;

  const std::string method = r.at("method").get<std::string>();
  if (method == "random") cfg.regions.method = RegionMethod::Random;
  else if (method == "slic") cfg.regions.method = RegionMethod::Slic;
  else if (method == "fh") cfg.regions.method = RegionMethod::Fh;
  else config_error("config: regions.method must be random, slic or fh");
  cfg.regions.boxes_per_frame = r.at("boxes_per_frame").get<int64_t>();
  const auto raspect = as_vec<double>(r.at("aspect"));
  const auto rsize = as_vec<double>(r.at("size"));
  const auto rfilter = as_vec<double>(r.at("filter"));
  if (raspect.size() != 2 || rsize.size() != 2 || rfilter.size() != 2)
    config_error("config: regions.aspect/size/filter must be [lo, hi]");
  cfg.regions.aspect_min = raspect[0];
  cfg.regions.aspect_max = raspect[1];
  cfg.regions.size_min = rsize[0];
  cfg.regions.size_max = rsize[1];
  cfg.regions.size_is_area = r.at("size_is_area").get<bool>();
  cfg.regions.slic_k = r.at("slic_k").get<int64_t>();
  cfg.regions.slic_compactness = r.at("slic_compactness").get<double>();
  cfg.regions.slic_iters = r.at("slic_iters").get<int64_t>();
  cfg.regions.fh_scale = r.at("fh_scale").get<double>();
  cfg.regions.fh_min_size = r.at("fh_min_size").get<int64_t>();
  cfg.regions.filter_lo = rfilter[0];
  cfg.regions.filter_hi = rfilter[1];
  cfg.regions.seed = cfg.seed;
  return cfg;
}

SpriteWorld RunConfig::world() const {
  const json& d = resolved.at("data");
  SpriteWorld w;
  w.canvas_h = w.canvas_w = d.at("canvas").get<int64_t>();
  w.sprite_count = d.at("sprites").get<int64_t>();
  w.frames = d.at("frames").get<int64_t>();
  const auto half = as_vec<double>(d.at("sprite_half_size"));
  const auto speed = as_vec<double>(d.at("speed"));
  if (half.size() != 2 || speed.size() != 2)
    config_error("config: data.sprite_half_size/speed must be [lo, hi]");
  w.half_size_min = half[0];
  w.half_size_max = half[1];
  w.speed_min = speed[0];
  w.speed_max = speed[1];
  w.direction_classes = d.at("classes").get<int64_t>();
  w.direction_jitter = d.at("direction_jitter").get<double>();
  w.background_contrast = d.at("background_contrast").get<double>();
  w.background_flicker = d.at("background_flicker").get<double>();
  w.hue_spread = d.at("hue_spread").get<double>();
  w.base_hue = d.at("base_hue").get<double>();
  w.base_hue_jitter = d.at("base_hue_jitter").get<double>();
  return w;
}

EvalConfig RunConfig::eval_config() const {
  const json& e = resolved.at("eval");
  EvalConfig cfg;
  cfg.pairs = e.at("pairs").get<int64_t>();
  cfg.train_fraction = e.at("train_fraction").get<double>();
  cfg.probe_steps = e.at("probe_steps").get<int64_t>();
  cfg.probe_lr = e.at("probe_lr").get<double>();
  cfg.track_grid = e.at("track_grid").get<int64_t>();
  cfg.seed = seed();
  const json& s = resolved.at("sampling");
  cfg.sampling.clip_len = s.at("clip_len").get<int64_t>();
  cfg.sampling.frame_stride = s.at("frame_stride").get<int64_t>();
  cfg.sampling.out_h = cfg.sampling.out_w = s.at("out_size").get<int64_t>();
  return cfg;
}

int64_t RunConfig::data_videos() const { return resolved.at("data").at("videos").get<int64_t>(); }
int64_t RunConfig::log_every() const { return resolved.at("train").at("log_every").get<int64_t>(); }

}  // namespace constcl

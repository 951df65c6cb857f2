#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "constcl/synth.hpp"
#include "constcl/train.hpp"
#include "test_util.hpp"

using namespace constcl;

namespace {

ModelConfig toy_model(DType dt = DType::F32) {
  ModelConfig mc;
  mc.dtype = dt;
  mc.backbone.stem = {2, 0, 1, 2};
  mc.backbone.stages = {{4, 1, 2, 2}, {4, 1, 1, 1}};
  mc.backbone.branch = {4, 1, 1, 2};
  mc.backbone.groups = 2;
  mc.global_hidden = 8;
  mc.global_out = 8;
  mc.region_hidden = 8;
  mc.attention = {1, 3, 6, 2};
  mc.roialign_bins = 2;
  mc.seed = 1;
  return mc;
}

TrainConfig toy_train() {
  TrainConfig tc;
  tc.schedule = {0.05, 5, 100};
  tc.batch_size = 2;
  tc.seed = 1;
  tc.sampling.clip_len = 4;
  tc.sampling.frame_stride = 1;
  tc.sampling.out_h = tc.sampling.out_w = 8;
  tc.sampling.context_length = 2;
  tc.regions.boxes_per_frame = 2;
  return tc;
}

std::vector<Tensor> toy_videos(int64_t count, uint64_t seed = 7) {
  SpriteWorld world;
  world.canvas_h = world.canvas_w = 16;
  world.frames = 6;
  world.sprite_count = 2;
  world.half_size_min = 2;
  world.half_size_max = 4;
  std::vector<Tensor> out;
  for (int64_t i = 0; i < count; ++i)
    out.push_back(generate_sprite_video(world, rng_key(seed, "video", static_cast<uint64_t>(i)),
                                        i % 4).frames);
  return out;
}

bool same_data(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel() || a.dtype() != b.dtype()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.at(i) != b.at(i)) return false;
  return true;
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("train_step determinism") {
  auto videos = toy_videos(2);
  auto run = [&] {
    Model model(toy_model());
    OptimizerState opt;
    TrainConfig tc = toy_train();
    std::vector<LossReport> reports;
    for (int step = 0; step < 3; ++step) reports.push_back(train_step(model, opt, tc, videos));
    return reports;
  };
  auto a = run(), b = run();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].L_g == b[i].L_g);
    CHECK(a[i].L_r == b[i].L_r);
    CHECK(a[i].L_total == b[i].L_total);
    CHECK(a[i].lr == b[i].lr);
    CHECK(a[i].match_indices == b[i].match_indices);
  }
  CHECK(std::isfinite(a[0].L_total));
  CHECK(a[0].negatives_count > 0);
}

TEST_CASE("omega zero freezes the region branch") {
  auto videos = toy_videos(2);
  Model model(toy_model());
  OptimizerState opt;
  TrainConfig tc = toy_train();
  tc.loss.omega = 0.0;

  std::vector<std::pair<std::string, Tensor>> snapshot;
  for (const auto& e : model.params.entries())
    if (e.name.rfind("res5r.", 0) == 0 || e.name.rfind("ctx_head.", 0) == 0 ||
        e.name.rfind("region_head.", 0) == 0)
      snapshot.push_back({e.name, e.tensor.detach()});
  REQUIRE(!snapshot.empty());

  std::vector<LossReport> reports;
  for (int step = 0; step < 5; ++step) reports.push_back(train_step(model, opt, tc, videos));
  for (const auto& [name, before] : snapshot) CHECK(same_data(model.params.get(name), before));
  // global branch did move
  bool trunk_moved = false;
  Model fresh(toy_model());
  for (const auto& e : fresh.params.entries())
    if (e.name.rfind("stem.", 0) == 0)
      trunk_moved = trunk_moved || !same_data(model.params.get(e.name), e.tensor);
  CHECK(trunk_moved);
  // and the report shows the exact equality L_total == L_g
  for (const auto& r : reports) {
    CHECK(r.L_r == 0.0);
    CHECK(r.L_total == r.L_g);
  }
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  auto videos = toy_videos(2);
  Model model(toy_model());
  OptimizerState opt;
  TrainConfig tc = toy_train();
  tc.schedule = {0.0, 0, 100};  // peak 0 -> lr 0 everywhere
  const uint64_t before = model.params.data_checksum();
  train_step(model, opt, tc, videos);
  train_step(model, opt, tc, videos);
  CHECK(model.params.data_checksum() == before);
}

TEST_CASE("per-loss gradient structure") {
  auto videos = toy_videos(2);
  TrainConfig tc = toy_train();
  auto grads_at_omega = [&](double omega) {
    Model model(toy_model(DType::F64));
    TrainConfig cfg = tc;
    cfg.loss.omega = omega;
    Tensor obj = training_objective(model, cfg, videos, 0);
    GradMap g = backward(obj, model.params.tensors());
    std::map<std::string, std::vector<double>> out;
    for (const auto& e : model.params.entries()) out[e.name] = g.at(e.tensor).to_f64();
    return out;
  };
  auto g1 = grads_at_omega(0.005), g2 = grads_at_omega(0.01), g3 = grads_at_omega(0.02);
  for (const auto& [name, v1] : g1) {
    const auto& v2 = g2.at(name);
    const auto& v3 = g3.at(name);
    if (name.rfind("global_head.", 0) == 0) {
      // independent of omega
      for (size_t i = 0; i < v1.size(); ++i) CHECK(v1[i] == doctest::Approx(v2[i]).epsilon(1e-12));
    }
    if (name.rfind("ctx_head.", 0) == 0) {
      // scales linearly with omega
      for (size_t i = 0; i < v1.size(); ++i) {
        CHECK(v2[i] == doctest::Approx(2.0 * v1[i]).epsilon(1e-9));
        CHECK(v3[i] == doctest::Approx(4.0 * v1[i]).epsilon(1e-9));
      }
    }
  }
  // trunk receives gradient from both losses separately
  Model model(toy_model(DType::F64));
  TrainConfig cfg_g = tc;
  cfg_g.loss.omega = 0.0;  // only L_g
  Tensor obj_g = training_objective(model, cfg_g, videos, 0);
  GradMap gg = backward(obj_g, model.params.tensors());
  double norm_g = 0;
  const Tensor& stem_g = gg.at(model.params.get("stem.conv.w"));
  for (int64_t i = 0; i < stem_g.numel(); ++i) norm_g += stem_g.at(i) * stem_g.at(i);
  CHECK(norm_g > 0);
}

TEST_CASE("overfitting a frozen toy batch reduces the loss") {
  auto videos = toy_videos(4);
  Model model(toy_model());
  OptimizerState opt;
  TrainConfig tc = toy_train();
  tc.batch_size = 4;
  tc.schedule = {0.3, 5, 50};
  std::vector<LossReport> reports;
  for (int step = 0; step < 50; ++step) reports.push_back(train_step(model, opt, tc, videos));
  CHECK(reports.back().L_total < reports.front().L_total);
}

TEST_CASE("degradation equivalence: zero context routes to the vanilla head") {
  auto videos = toy_videos(2);
  auto run = [&](LossMode mode, int64_t context_length) {
    Model model(toy_model());
    OptimizerState opt;
    TrainConfig tc = toy_train();
    tc.loss.mode = mode;
    tc.sampling.context_length = context_length;
    std::vector<LossReport> reports;
    for (int step = 0; step < 5; ++step) reports.push_back(train_step(model, opt, tc, videos));
    return reports;
  };
  auto ctx0 = run(LossMode::Contextualized, 0);
  auto vanilla = run(LossMode::VanillaRegion, 2);
  REQUIRE(ctx0.size() == vanilla.size());
  for (size_t i = 0; i < ctx0.size(); ++i) {
    CHECK(ctx0[i].L_g == vanilla[i].L_g);
    CHECK(ctx0[i].L_r == vanilla[i].L_r);
    CHECK(ctx0[i].L_total == vanilla[i].L_total);
    CHECK(ctx0[i].match_indices == vanilla[i].match_indices);
  }
  // and differs from the contextualized path
  auto ctx2 = run(LossMode::Contextualized, 2);
  CHECK(ctx2[0].L_r != vanilla[0].L_r);
}

TEST_CASE("dense mode runs and trains") {
  auto videos = toy_videos(2);
  Model model(toy_model());
  OptimizerState opt;
  TrainConfig tc = toy_train();
  tc.loss.mode = LossMode::Dense;
  LossReport r = train_step(model, opt, tc, videos);
  CHECK(std::isfinite(r.L_total));
  CHECK(r.L_r > 0.0);
}

TEST_CASE("loss report jsonl") {
  LossReport r;
  r.step = 3;
  r.L_g = 1.5;
  r.L_r = 0.25;
  r.L_total = 1.5025;
  r.lr = 0.01;
  auto j = nlohmann::json::parse(loss_report_jsonl(r));
  CHECK(j.at("step") == 3);
  CHECK(j.at("L_g") == 1.5);
  CHECK(j.at("L_r") == 0.25);
  CHECK(j.at("L_total") == 1.5025);
  CHECK(j.at("lr") == 0.01);
}

TEST_CASE("checkpointing") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "constcl_ckpt_test").string();
  fs::remove_all(dir);
  auto videos = toy_videos(2);

  SUBCASE("save-load-save is byte identical") {
    Model model(toy_model());
    OptimizerState opt;
    TrainConfig tc = toy_train();
    for (int step = 0; step < 3; ++step) train_step(model, opt, tc, videos);
    checkpoint_save(dir + "/a", model, opt);
    Model other(toy_model());
    OptimizerState other_opt;
    checkpoint_load(dir + "/a", other, other_opt);
    CHECK(other_opt.step == 3);
    checkpoint_save(dir + "/b", other, other_opt);
    CHECK(file_bytes(dir + "/a/tensors.bin") == file_bytes(dir + "/b/tensors.bin"));
    CHECK(file_bytes(dir + "/a/manifest.json") == file_bytes(dir + "/b/manifest.json"));
  }
  SUBCASE("resume equals an uninterrupted run") {
    TrainConfig tc = toy_train();
    Model straight(toy_model());
    OptimizerState opt_straight;
    for (int step = 0; step < 6; ++step) train_step(straight, opt_straight, tc, videos);

    Model part(toy_model());
    OptimizerState opt_part;
    for (int step = 0; step < 3; ++step) train_step(part, opt_part, tc, videos);
    checkpoint_save(dir + "/resume", part, opt_part);
    Model resumed(toy_model());
    OptimizerState opt_resumed;
    checkpoint_load(dir + "/resume", resumed, opt_resumed);
    for (int step = 0; step < 3; ++step) train_step(resumed, opt_resumed, tc, videos);

    CHECK(straight.params.data_checksum() == resumed.params.data_checksum());
  }
  SUBCASE("corrupt blob is rejected with the file name") {
    Model model(toy_model());
    OptimizerState opt;
    checkpoint_save(dir + "/bad", model, opt);
    {
      std::fstream f(dir + "/bad/tensors.bin", std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(0);
      f.write("XXXX", 4);
    }
    Model other(toy_model());
    OptimizerState other_opt;
    CHECK_THROWS_WITH_AS(checkpoint_load(dir + "/bad", other, other_opt),
                         doctest::Contains("tensors.bin"), std::runtime_error);
  }
  SUBCASE("missing manifest") {
    Model model(toy_model());
    OptimizerState opt;
    CHECK_THROWS_AS(checkpoint_load(dir + "/nonexistent", model, opt), std::runtime_error);
  }
  fs::remove_all(dir);
}

TEST_CASE("train_loop writes one log line per step") {
  auto videos = toy_videos(3);
  Model model(toy_model());
  OptimizerState opt;
  TrainConfig tc = toy_train();
  std::ostringstream log;
  auto reports = train_loop(model, opt, tc, videos, 4, &log);
  CHECK(reports.size() == 4);
  int64_t lines = 0;
  std::istringstream is(log.str());
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) {
      auto j = nlohmann::json::parse(line);
      CHECK(j.at("step") == lines);
      ++lines;
    }
  CHECK(lines == 4);
}

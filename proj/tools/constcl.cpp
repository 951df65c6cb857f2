#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "constcl/config.hpp"
#include "constcl/gradcheck.hpp"
#include "constcl/serialize.hpp"
#include "constcl/synth.hpp"
#include "constcl/train.hpp"

namespace fs = std::filesystem;
using namespace constcl;

namespace {

int64_t worker_threads() {
  if (const char* env = std::getenv("CONSTCL_THREADS")) {
    const int64_t n = std::atoll(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int64_t>(hw) : 1;
}

void write_echo(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream os(out_dir + "/resolved_config.json");
  os << cfg.echo() << "\n";
}

std::vector<Tensor> dataset_frames(const std::vector<LabeledVideo>& videos) {
  std::vector<Tensor> out;
  out.reserve(videos.size());
  for (const auto& v : videos) out.push_back(v.frames);
  return out;
}

int cmd_train(const RunConfig& cfg, const std::string& out_dir, const std::string& data_dir) {
  write_echo(cfg, out_dir);
  std::vector<LabeledVideo> dataset;
  if (!data_dir.empty()) {
    dataset = load_dataset(data_dir);
  } else {
    dataset = make_sprite_dataset(cfg.world(), cfg.data_videos(), cfg.seed(), worker_threads());
  }
  Model model(cfg.model_config());
  OptimizerState opt;
  TrainConfig tc = cfg.train_config();
  std::ofstream log(out_dir + "/train_log.jsonl");
  auto reports = train_loop(model, opt, tc, dataset_frames(dataset), tc.schedule.total_steps, &log);
  checkpoint_save(out_dir + "/checkpoint", model, opt);
  std::cout << "trained " << reports.size() << " steps; final L_total = "
            << reports.back().L_total << "\n";
  std::cout << "checkpoint: " << out_dir << "/checkpoint\n";
  return 0;
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  write_echo(cfg, out_dir);
  auto videos = make_sprite_dataset(cfg.world(), cfg.data_videos(), cfg.seed(), worker_threads());
  save_dataset(out_dir, videos, cfg.world().direction_classes);
  std::cout << "wrote " << videos.size() << " videos to " << out_dir << "\n";
  return 0;
}

void gen_regions_for_video(const Tensor& video, const RegionGenConfig& rc, uint64_t seed,
                           std::ostream& os) {
  const int64_t T = video.shape()[0], H = video.shape()[1], W = video.shape()[2];
  for (int64_t t = 0; t < T; ++t) {
    std::vector<double> pixels(static_cast<size_t>(H * W * 3));
    for (int64_t i = 0; i < H * W * 3; ++i)
      pixels[static_cast<size_t>(i)] = video.at(t * H * W * 3 + i);
    Rng rng(rng_key(seed, "gen-regions", static_cast<uint64_t>(t)));
    auto regions = generate_regions(pixels, H, W, rc, rng, t);
    write_regions_jsonl(os, regions);
  }
}

int cmd_gen_regions(const RunConfig& cfg, const std::string& method, const std::string& in_path,
                    const std::string& out_path) {
  RegionGenConfig rc = cfg.train_config().regions;
  if (method == "random") rc.method = RegionMethod::Random;
  else if (method == "slic") rc.method = RegionMethod::Slic;
  else if (method == "fh") rc.method = RegionMethod::Fh;
  else throw std::invalid_argument("gen-regions: method must be random, slic or fh");

  if (fs::is_directory(in_path)) {
    fs::create_directories(out_path);
    auto videos = load_dataset(in_path);
    for (size_t i = 0; i < videos.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof(name), "video_%03zu.regions.jsonl", i);
      std::ofstream os(out_path + "/" + name);
      gen_regions_for_video(videos[i].frames, rc, rng_key(cfg.seed(), "video", static_cast<uint64_t>(i)), os);
    }
    std::cout << "wrote region files for " << videos.size() << " videos to " << out_path << "\n";
  } else {
    Tensor video = load_tensor_file(in_path);
    if (video.rank() != 4 || video.shape()[3] != 3)
      throw std::invalid_argument("gen-regions: input tensor must be [T,H,W,3]");
    std::ofstream os(out_path);
    if (!os) throw std::runtime_error("gen-regions: cannot open " + out_path);
    gen_regions_for_video(video, rc, cfg.seed(), os);
    std::cout << "wrote regions to " << out_path << "\n";
  }
  return 0;
}

int cmd_grad_check(const RunConfig& cfg) {
  // toy f64 configuration small enough for finite differences
  ModelConfig mc = cfg.model_config();
  mc.dtype = DType::F64;
  mc.backbone.stem = {2, 0, 1, 2};
  mc.backbone.stages = {{4, 1, 2, 2}, {4, 1, 1, 1}};
  mc.backbone.branch = {4, 1, 1, 2};
  mc.backbone.groups = 2;
  mc.global_hidden = 6;
  mc.global_out = 6;
  mc.region_hidden = 6;
  mc.attention = {1, 3, 6, 2};
  mc.roialign_bins = 2;

  TrainConfig tc = cfg.train_config();
  tc.sampling.clip_len = 4;
  tc.sampling.frame_stride = 1;
  tc.sampling.out_h = tc.sampling.out_w = 8;
  tc.sampling.context_length = std::min<int64_t>(tc.sampling.context_length, 2);
  tc.regions.boxes_per_frame = 2;

  bool ok = true;
  auto check = [&](const std::string& name, double err) {
    std::cout << name << ": max_rel_err = " << err << (err < 1e-4 ? "  [ok]" : "  [FAIL]") << "\n";
    ok = ok && err < 1e-4;
  };

  {
    Rng rng(rng_key(cfg.seed(), "gradcheck-ops"));
    auto rnd = [&](Shape shape) {
      std::vector<double> v(static_cast<size_t>(numel_of(shape)));
      for (auto& x : v) x = rng.uniform(-1.0, 1.0);
      return Tensor::from_f64(shape, v, DType::F64);
    };
    check("matmul", gradcheck([](const std::vector<Tensor>& in) {
            return sum(matmul(in[0], in[1]));
          }, {rnd({3, 4}), rnd({4, 2})}));
    check("softmax", gradcheck([](const std::vector<Tensor>& in) {
            return sum(mul(softmax(in[0], 1), in[1]));
          }, {rnd({3, 5}), rnd({3, 5})}));
    check("l2_normalize", gradcheck([](const std::vector<Tensor>& in) {
            return sum(mul(l2_normalize(in[0], 1), in[1]));
          }, {rnd({3, 5}), rnd({3, 5})}));
    check("info_nce", gradcheck([](const std::vector<Tensor>& in) {
            return info_nce(in[0], in[1], {in[2], in[3]}, 0.2);
          }, {rnd({6}), rnd({6}), rnd({6}), rnd({6})}));
  }

  {
    SpriteWorld world = cfg.world();
    world.canvas_h = world.canvas_w = 16;
    world.frames = 6;
    world.sprite_count = 2;
    world.half_size_min = 2;
    world.half_size_max = 4;
    tc.sampling.clip_len = 4;
    std::vector<Tensor> batch;
    for (int i = 0; i < 2; ++i)
      batch.push_back(generate_sprite_video(world, rng_key(cfg.seed(), "gc-video", i), i % 2).frames);
    Model model(mc);
    check("full_objective", model_objective_gradcheck(model, tc, batch));
  }

  return ok ? 0 : 2;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_dir, const std::string& data_dir) {
  auto dataset = load_dataset(data_dir);
  Model model(cfg.model_config());
  OptimizerState opt;
  checkpoint_load(checkpoint_dir, model, opt);
  EvalConfig ec = cfg.eval_config();
  const double corr = correspondence_accuracy(model, dataset, ec);
  const double probe = linear_probe_eval(model, dataset, ec);
  double track = -1.0;
  for (const auto& gt : dataset.front().regions)
    if (gt.frame == 0) {
      track = toy_track_eval(model, dataset.front(), gt.region(), ec);
      break;
    }
  std::cout << "{\"correspondence_accuracy\": " << corr << ", \"linear_probe_accuracy\": " << probe
            << ", \"track_mean_iou\": " << track << "}\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ConST-CL desk-scale pretraining pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", data_dir, in_path, out_path, method = "random",
              checkpoint_dir;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON config file")->capture_default_str();
  app.add_option("--set", overrides, "dot-path overrides key=value")->take_all();

  auto* train_cmd = app.add_subcommand("train", "run the pretraining loop");
  train_cmd->add_option("--out", out_dir, "output directory");
  train_cmd->add_option("--data", data_dir, "dataset directory (generated when omitted)");

  auto* gen_data_cmd = app.add_subcommand("gen-data", "write a synthetic sprite dataset");
  gen_data_cmd->add_option("--out", out_dir, "output directory")->required();

  auto* gen_regions_cmd = app.add_subcommand("gen-regions", "write region boxes as JSON lines");
  gen_regions_cmd->add_option("--method", method, "random|slic|fh");
  gen_regions_cmd->add_option("--in", in_path, "video .cstt file or dataset directory")->required();
  gen_regions_cmd->add_option("--out", out_path, "output JSONL file (or directory)")->required();

  auto* grad_check_cmd = app.add_subcommand("grad-check", "finite-difference gradient suite");

  auto* eval_cmd = app.add_subcommand("eval", "run probes against a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();

  try {
    app.parse(argc, argv);
    RunConfig cfg = parse_config(config_path, overrides);
    if (train_cmd->parsed()) return cmd_train(cfg, out_dir, data_dir);
    if (gen_data_cmd->parsed()) return cmd_gen_data(cfg, out_dir);
    if (gen_regions_cmd->parsed()) return cmd_gen_regions(cfg, method, in_path, out_path);
    if (grad_check_cmd->parsed()) return cmd_grad_check(cfg);
    if (eval_cmd->parsed()) return cmd_eval(cfg, checkpoint_dir, data_dir);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "constcl/synth.hpp"
#include "constcl/train.hpp"

namespace constcl {

// Fully resolved run configuration: documented defaults deep-merged with an
// optional JSON file and `--set key=value` dot-path overrides. Unknown keys
// and type mismatches are rejected with the offending path.
struct RunConfig {
  nlohmann::json resolved;

  uint64_t seed() const;
  ModelConfig model_config() const;
  TrainConfig train_config() const;
  SpriteWorld world() const;
  EvalConfig eval_config() const;
  int64_t data_videos() const;
  int64_t log_every() const;

  std::string echo() const { return resolved.dump(2); }
};

nlohmann::json default_config_json();

RunConfig parse_config(const std::string& path /* empty = defaults only */,
                       const std::vector<std::string>& overrides = {});

}  // namespace constcl

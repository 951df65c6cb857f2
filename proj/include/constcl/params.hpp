#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "constcl/tensor.hpp"

namespace constcl {

enum class Init { Zeros, Ones, FanInUniform };

// Named trainable leaves in creation order. Initialization of each parameter
// is keyed by (seed, name), so the draw for one parameter never depends on
// which other parameters exist.
class ParamStore {
 public:
  ParamStore(uint64_t seed, DType dtype) : seed_(seed), dtype_(dtype) {}

  struct Entry {
    std::string name;
    Tensor tensor;
    bool decay;  // weight decay applies (kernel weights only)
  };

  Tensor create(const std::string& name, Shape shape, Init init, int64_t fan_in, bool decay);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  bool decay_of(const std::string& name) const;

  const std::vector<Entry>& entries() const { return order_; }
  std::vector<Tensor> tensors() const;
  int64_t total_params() const;
  uint64_t seed() const { return seed_; }
  DType dtype() const { return dtype_; }

  // FNV over raw data bytes in creation order; for parameter-drift checks.
  uint64_t data_checksum() const;

 private:
  uint64_t seed_;
  DType dtype_;
  std::vector<Entry> order_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace constcl

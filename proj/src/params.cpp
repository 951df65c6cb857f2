#include "constcl/params.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "constcl/rng.hpp"

namespace constcl {

Tensor ParamStore::create(const std::string& name, Shape shape, Init init, int64_t fan_in,
                          bool decay) {
  if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  const int64_t n = numel_of(shape);
  std::vector<double> values(static_cast<size_t>(n), 0.0);
  switch (init) {
    case Init::Zeros:
      break;
    case Init::Ones:
      values.assign(values.size(), 1.0);
      break;
    case Init::FanInUniform: {
      if (fan_in <= 0) throw std::invalid_argument("ParamStore: fan_in must be positive");
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      Rng rng(rng_key(seed_, name));
      for (auto& v : values) v = rng.uniform(-bound, bound);
      break;
    }
  }
  Tensor t = Tensor::from_f64(std::move(shape), values, dtype_);
  t.mark_trainable(name);
  index_[name] = order_.size();
  order_.push_back({name, t, decay});
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamStore: no parameter " + name);
  return order_[it->second].tensor;
}

bool ParamStore::decay_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamStore: no parameter " + name);
  return order_[it->second].decay;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(order_.size());
  for (const auto& e : order_) out.push_back(e.tensor);
  return out;
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const auto& e : order_) n += e.tensor.numel();
  return n;
}

uint64_t ParamStore::data_checksum() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& e : order_) {
    if (e.tensor.dtype() == DType::F32) {
      auto s = e.tensor.data_f32();
      feed(s.data(), s.size() * 4);
    } else {
      auto s = e.tensor.data_f64();
      feed(s.data(), s.size() * 8);
    }
  }
  return h;
}

}  // namespace constcl

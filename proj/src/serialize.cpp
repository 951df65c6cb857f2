#include "constcl/serialize.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace constcl {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'T', 'T'};
constexpr uint8_t kVersion = 1;

void put_u64_le(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64_le(std::istream& is, const std::string& src) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw std::runtime_error("CSTT: truncated header in " + src);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  const uint8_t version = kVersion;
  const uint8_t dtype = static_cast<uint8_t>(t.dtype());
  const uint8_t rank = static_cast<uint8_t>(t.rank());
  os.put(static_cast<char>(version));
  os.put(static_cast<char>(dtype));
  os.put(static_cast<char>(rank));
  for (int64_t e : t.shape()) put_u64_le(os, static_cast<uint64_t>(e));
  if (t.dtype() == DType::F32) {
    for (float v : t.data_f32()) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      unsigned char b[4];
      for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
      os.write(reinterpret_cast<const char*>(b), 4);
    }
  } else {
    for (double v : t.data_f64()) {
      uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_u64_le(os, bits);
    }
  }
  if (!os) throw std::runtime_error("CSTT: write failed");
}

Tensor read_tensor(std::istream& is, const std::string& src) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("CSTT: bad magic in " + src);
  char version, dtype_c, rank_c;
  if (!is.get(version) || !is.get(dtype_c) || !is.get(rank_c))
    throw std::runtime_error("CSTT: truncated header in " + src);
  if (static_cast<uint8_t>(version) != kVersion)
    throw std::runtime_error("CSTT: unsupported version " +
                             std::to_string(static_cast<int>(version)) + " in " + src);
  const uint8_t dtype_code = static_cast<uint8_t>(dtype_c);
  if (dtype_code != 1 && dtype_code != 2)
    throw std::runtime_error("CSTT: unknown dtype code in " + src);
  const DType dt = static_cast<DType>(dtype_code);
  const int rank = static_cast<uint8_t>(rank_c);
  Shape shape(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) shape[static_cast<size_t>(i)] = static_cast<int64_t>(get_u64_le(is, src));
  const int64_t n = numel_of(shape);
  std::vector<double> values(static_cast<size_t>(n));
  if (dt == DType::F32) {
    for (int64_t i = 0; i < n; ++i) {
      unsigned char b[4];
      if (!is.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("CSTT: truncated data in " + src);
      uint32_t bits = 0;
      for (int j = 0; j < 4; ++j) bits |= static_cast<uint32_t>(b[j]) << (8 * j);
      float v;
      std::memcpy(&v, &bits, 4);
      values[static_cast<size_t>(i)] = v;
    }
  } else {
    for (int64_t i = 0; i < n; ++i) {
      uint64_t bits = get_u64_le(is, src);
      double v;
      std::memcpy(&v, &bits, 8);
      values[static_cast<size_t>(i)] = v;
    }
  }
  return Tensor::from_f64(shape, values, dt);
}

void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_tensor(os, t);
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return read_tensor(is, path);
}

}  // namespace constcl

#pragma once

#include <iosfwd>
#include <string>

#include "constcl/tensor.hpp"

namespace constcl {

// CSTT binary tensor format:
//   magic "CSTT" | u8 version (=1) | u8 dtype (1=f32, 2=f64) | u8 rank |
//   rank x u64 little-endian extents | row-major little-endian scalars.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is, const std::string& source_name);

void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

}  // namespace constcl

#pragma once

#include <iosfwd>
#include <string>

#include "mutr/tensor.hpp"

namespace mutr {

// Portable tensor format: magic "MUTR", version u32, dtype tag u32
// (0 = f32, 1 = f64), rank u32, extents u64[rank], then raw little-endian
// row-major element data.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace mutr

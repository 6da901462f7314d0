#include "mutr/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mutr {

static_assert(std::endian::native == std::endian::little,
              "tensor format assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'U', 'T', 'R'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxRank = 32;

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
  T v;
  const std::int64_t at = is.tellg();
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParseError(std::string("truncated tensor file reading ") + what, at);
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  write_pod<std::uint32_t>(os, kVersion);
  write_pod<std::uint32_t>(os, t.dtype() == DType::kF32 ? 0u : 1u);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::int64_t i = 0; i < t.rank(); ++i) {
    write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(t.dim(i)));
  }
  const char* data = t.dtype() == DType::kF32
                         ? reinterpret_cast<const char*>(t.data<float>())
                         : reinterpret_cast<const char*>(t.data<double>());
  os.write(data, static_cast<std::streamsize>(
                     static_cast<std::size_t>(t.numel()) * dtype_size(t.dtype())));
  if (!os) throw InputError("failed writing tensor stream");
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  const std::int64_t at0 = is.tellg();
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError("bad tensor magic, expected MUTR", at0);
  }
  const auto version = read_pod<std::uint32_t>(is, "version");
  if (version != kVersion) {
    throw ParseError("unsupported tensor format version " + std::to_string(version),
                     static_cast<std::int64_t>(is.tellg()) - 4);
  }
  const auto dtag = read_pod<std::uint32_t>(is, "dtype");
  if (dtag > 1) {
    throw ParseError("unknown dtype tag " + std::to_string(dtag),
                     static_cast<std::int64_t>(is.tellg()) - 4);
  }
  const auto rank = read_pod<std::uint32_t>(is, "rank");
  if (rank > kMaxRank) {
    throw ParseError("implausible tensor rank " + std::to_string(rank),
                     static_cast<std::int64_t>(is.tellg()) - 4);
  }
  std::vector<std::int64_t> shape(rank);
  for (auto& e : shape) {
    e = static_cast<std::int64_t>(read_pod<std::uint64_t>(is, "extent"));
    if (e <= 0) {
      throw ParseError("non-positive tensor extent",
                       static_cast<std::int64_t>(is.tellg()) - 8);
    }
  }
  Tensor t(shape, dtag == 0 ? DType::kF32 : DType::kF64);
  char* data = t.dtype() == DType::kF32
                   ? reinterpret_cast<char*>(t.data<float>())
                   : reinterpret_cast<char*>(t.data<double>());
  const std::int64_t at = is.tellg();
  is.read(data, static_cast<std::streamsize>(
                    static_cast<std::size_t>(t.numel()) * dtype_size(t.dtype())));
  if (!is) throw ParseError("truncated tensor payload", at);
  return t;
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open for writing: " + path);
  write_tensor(f, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open for reading: " + path);
  return read_tensor(f);
}

}  // namespace mutr

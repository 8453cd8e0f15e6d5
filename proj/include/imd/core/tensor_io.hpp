#pragma once

// IMDT tensor interchange format.
//
//   offset 0  : magic "IMDT"
//   offset 4  : u8 version (1)
//   offset 5  : u8 dtype (0 = f32, 1 = f64, 2 = u8)
//   offset 6  : u8 rank (0..4)
//   offset 7  : rank x u32 little-endian dims
//   then      : row-major little-endian payload

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <type_traits>
#include <variant>
#include <vector>

#include "imd/core/error.hpp"
#include "imd/core/tensor.hpp"

namespace imd {

static_assert(std::endian::native == std::endian::little, "IMDT payloads are written in host order");

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

inline constexpr std::uint8_t kImdtVersion = 1;
inline constexpr int kImdtMaxRank = 4;

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::F32;
  else if constexpr (std::is_same_v<T, double>) return DType::F64;
  else {
    static_assert(std::is_same_v<T, std::uint8_t>, "IMDT stores f32, f64 or u8");
    return DType::U8;
  }
}

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U8: return 1;
  }
  return 0;
}

using AnyTensor = std::variant<Tensor<float>, Tensor<double>, Tensor<std::uint8_t>>;

template <class T>
std::vector<std::uint8_t> encode_tensor(const Tensor<T>& t) {
  if (t.rank() > kImdtMaxRank) throw ShapeError("IMDT supports rank <= 4, got " + shape_str(t.shape));
  if constexpr (std::is_floating_point_v<T>) {
    for (T v : t.data)
      if (!std::isfinite(v)) throw Error("IMDT payload must be finite");
  }
  std::vector<std::uint8_t> out = {'I', 'M', 'D', 'T', kImdtVersion, static_cast<std::uint8_t>(dtype_of<T>()),
                                   static_cast<std::uint8_t>(t.rank())};
  for (int d : t.shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(t.shape));
    const auto u = static_cast<std::uint32_t>(d);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>((u >> (8 * b)) & 0xFF));
  }
  const std::size_t offset = out.size();
  out.resize(offset + t.data.size() * sizeof(T));
  if (!t.data.empty()) std::memcpy(out.data() + offset, t.data.data(), t.data.size() * sizeof(T));
  return out;
}

inline AnyTensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("file too short for IMDT magic", bytes.size());
  if (std::memcmp(bytes.data(), "IMDT", 4) != 0) throw FormatError("bad magic, expected \"IMDT\"", 0);
  if (bytes.size() < 7) throw FormatError("truncated IMDT header", bytes.size());
  if (bytes[4] != kImdtVersion) throw FormatError("unsupported IMDT version " + std::to_string(bytes[4]), 4);
  if (bytes[5] > 2) throw FormatError("unknown dtype code " + std::to_string(bytes[5]), 5);
  const auto dtype = static_cast<DType>(bytes[5]);
  const int rank = bytes[6];
  if (rank > kImdtMaxRank) throw FormatError("rank " + std::to_string(rank) + " exceeds 4", 6);
  std::size_t pos = 7;
  Shape shape;
  for (int i = 0; i < rank; ++i) {
    if (pos + 4 > bytes.size()) throw FormatError("truncated shape", bytes.size());
    std::uint32_t d = 0;
    for (int b = 0; b < 4; ++b) d |= static_cast<std::uint32_t>(bytes[pos + b]) << (8 * b);
    if (d > static_cast<std::uint32_t>(std::numeric_limits<int>::max()))
      throw FormatError("dimension too large", pos);
    shape.push_back(static_cast<int>(d));
    pos += 4;
  }
  const std::size_t expected = shape_numel(shape) * dtype_size(dtype);
  if (bytes.size() - pos != expected)
    throw FormatError("payload holds " + std::to_string(bytes.size() - pos) + " bytes, shape " + shape_str(shape) +
                          " needs " + std::to_string(expected),
                      bytes.size() < pos + expected ? bytes.size() : pos + expected);

  auto fill = [&](auto tag) -> AnyTensor {
    using T = decltype(tag);
    Tensor<T> t(shape);
    if (expected) std::memcpy(t.data.data(), bytes.data() + pos, expected);
    return t;
  };
  switch (dtype) {
    case DType::F32: return fill(float{});
    case DType::F64: return fill(double{});
    case DType::U8: return fill(std::uint8_t{});
  }
  throw FormatError("unreachable dtype", 5);
}

template <class T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path.string());
}

inline AnyTensor read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

/// Reads a tensor that must carry dtype T.
template <class T>
Tensor<T> read_tensor_as(const std::filesystem::path& path) {
  auto any = read_tensor(path);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw FormatError(path.string() + ": unexpected dtype", 5);
}

}  // namespace imd

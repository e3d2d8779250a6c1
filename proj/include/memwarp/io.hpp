#pragma once

#include "memwarp/tensor.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

namespace memwarp {

// Tensor file header:
//   bytes 0..3   magic "MWTN"
//   byte  4      version (0x01)
//   byte  5      dtype  (0x01 = 32-bit float)
//   bytes 6..7   reserved (zero)
//   bytes 8..19  H, W, C as little-endian uint32
// followed by H*W*C little-endian 32-bit floats, row-major channel-last.
inline constexpr char kTensorMagic[4] = {'M', 'W', 'T', 'N'};
inline constexpr std::uint8_t kTensorVersion = 0x01;
inline constexpr std::uint8_t kDtypeF32 = 0x01;

namespace detail {

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32_le(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32_le(os, bits);
}

inline float get_f32_le(std::istream& is) {
  std::uint32_t bits = get_u32_le(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

template <typename T>
void write_tensor(const std::filesystem::path& path, const FeatureMap<T>& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("write_tensor: cannot open " + path.string());
  os.write(kTensorMagic, 4);
  os.put(static_cast<char>(kTensorVersion));
  os.put(static_cast<char>(kDtypeF32));
  os.put(0);
  os.put(0);
  detail::put_u32_le(os, static_cast<std::uint32_t>(m.height));
  detail::put_u32_le(os, static_cast<std::uint32_t>(m.width));
  detail::put_u32_le(os, static_cast<std::uint32_t>(m.channels));
  for (Eigen::Index i = 0; i < m.data.size(); ++i)
    detail::put_f32_le(os, static_cast<float>(m.data[i]));
  if (!os) throw FormatError("write_tensor: short write to " + path.string());
}

template <typename T>
void write_field(const std::filesystem::path& path,
                 const DisplacementField<T>& f) {
  FeatureMap<T> as_map(f.height, f.width, 2);
  as_map.data = f.data;
  write_tensor(path, as_map);
}

inline FeatureMap<float> read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("read_tensor: cannot open " + path.string());
  const auto file_size = std::filesystem::file_size(path);
  if (file_size < 20)
    throw FormatError("read_tensor: truncated header in " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, kTensorMagic, 4) != 0)
    throw FormatError("read_tensor: bad magic in " + path.string());
  const int version = is.get();
  if (version != kTensorVersion)
    throw FormatError("read_tensor: unsupported version in " + path.string());
  const int dtype = is.get();
  if (dtype != kDtypeF32)
    throw FormatError("read_tensor: unsupported dtype in " + path.string());
  is.get();
  is.get();
  const std::uint64_t h = detail::get_u32_le(is);
  const std::uint64_t w = detail::get_u32_le(is);
  const std::uint64_t c = detail::get_u32_le(is);
  if (h == 0 || w == 0 || c == 0)
    throw FormatError("read_tensor: zero dimension in " + path.string());
  const std::uint64_t count = h * w * c;
  if (count > std::uint64_t(std::numeric_limits<int>::max()) / 4)
    throw FormatError("read_tensor: dim overflow in " + path.string());
  if (file_size != 20 + count * 4)
    throw FormatError("read_tensor: truncated payload in " + path.string());
  FeatureMap<float> m(static_cast<int>(h), static_cast<int>(w),
                      static_cast<int>(c));
  for (std::uint64_t i = 0; i < count; ++i)
    m.data[static_cast<Eigen::Index>(i)] = detail::get_f32_le(is);
  if (!is) throw FormatError("read_tensor: short read in " + path.string());
  return m;
}

inline DisplacementField<float> read_field(const std::filesystem::path& path) {
  FeatureMap<float> m = read_tensor(path);
  if (m.channels != 2)
    throw FormatError("read_field: expected 2 channels in " + path.string());
  DisplacementField<float> f(m.height, m.width);
  f.data = m.data;
  return f;
}

}  // namespace memwarp

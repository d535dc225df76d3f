#pragma once

// JPT1 tensor files: "JPT1", u32 ndim, ndim x u32 extents, then the values as
// float32, all little-endian, row-major.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "jpool/error.hpp"
#include "jpool/tensor.hpp"

namespace jpool {

namespace detail {

inline void put_u32(std::vector<char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

}  // namespace detail

inline constexpr std::array<char, 4> kTensorMagic = {'J', 'P', 'T', '1'};

inline std::vector<char> encode_tensor(const Tensor& t) {
  std::vector<char> buf(kTensorMagic.begin(), kTensorMagic.end());
  buf.reserve(8 + 4 * t.rank() + 4 * t.size());
  detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.dims()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("tensor extent exceeds u32");
    detail::put_u32(buf, static_cast<std::uint32_t>(d));
  }
  for (double v : t.values()) detail::put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return buf;
}

inline Tensor decode_tensor(std::span<const char> bytes, const std::string& origin = "<memory>") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  auto fail = [&](std::size_t offset, const std::string& what) -> ParseError {
    return ParseError(origin + ": offset " + std::to_string(offset) + ": " + what);
  };
  if (n < 8) throw fail(n, "truncated header");
  if (std::memcmp(p, kTensorMagic.data(), 4) != 0) throw fail(0, "bad magic (expected JPT1)");
  const std::uint32_t ndim = detail::get_u32(p + 4);
  if (ndim == 0) throw fail(4, "rank 0");
  if (n < 8 + 4 * std::size_t{ndim}) throw fail(n, "truncated extents");
  Dims dims(ndim);
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    dims[i] = detail::get_u32(p + 8 + 4 * i);
    if (dims[i] == 0) throw fail(8 + 4 * i, "zero extent");
    count *= dims[i];
  }
  const std::size_t body = 8 + 4 * std::size_t{ndim};
  if (n < body + 4 * count)
    throw fail(n, "truncated data: need " + std::to_string(4 * count) + " bytes, have " +
                      std::to_string(n - body));
  if (n > body + 4 * count) throw fail(body + 4 * count, "trailing bytes");
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i)
    values[i] = std::bit_cast<float>(detail::get_u32(p + body + 4 * i));
  return Tensor(std::move(dims), std::move(values));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto buf = encode_tensor(t);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("write failed: " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string() + ": cannot open");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(buf, path.string());
}

}  // namespace jpool

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "deformcast/error.hpp"

namespace deformcast::detail {

template <typename Float>
std::vector<char> to_little_endian(std::span<const Float> values) {
  using Bits = std::conditional_t<sizeof(Float) == 4, std::uint32_t, std::uint64_t>;
  std::vector<char> bytes(values.size() * sizeof(Float));
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<Bits>(values[i]);
    for (std::size_t b = 0; b < sizeof(Float); ++b) {
      bytes[i * sizeof(Float) + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
    }
  }
  return bytes;
}

template <typename Float>
void write_le(std::ostream& out, std::span<const Float> values) {
  const auto bytes = to_little_endian(values);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <typename Float>
std::vector<Float> read_le(std::istream& in, std::size_t count) {
  using Bits = std::conditional_t<sizeof(Float) == 4, std::uint32_t, std::uint64_t>;
  std::vector<unsigned char> bytes(count * sizeof(Float));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw Error(ErrorCode::FormatError, "binary blob truncated: expected " + std::to_string(bytes.size()) +
                                            " bytes, got " + std::to_string(in.gcount()));
  }
  std::vector<Float> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(Float); ++b) {
      bits |= static_cast<Bits>(bytes[i * sizeof(Float) + b]) << (8 * b);
    }
    values[i] = std::bit_cast<Float>(bits);
  }
  return values;
}

}  // namespace deformcast::detail

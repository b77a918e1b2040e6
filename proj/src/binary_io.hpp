#pragma once

// Raw little-endian helpers shared by the flat binary artifact formats.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "revrec/error.hpp"

namespace revrec::binary {

static_assert(std::endian::native == std::endian::little,
              "artifact formats are little-endian; add byte swapping for this target");

template <typename T>
  requires std::is_trivially_copyable_v<T>
void write(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
void write_array(std::ostream& out, const std::vector<T>& v) {
  write<std::uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

inline void write_string(std::ostream& out, std::string_view s) {
  write<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
T read(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("truncated binary artifact");
  return v;
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
std::vector<T> read_array(std::istream& in, std::uint64_t max_count = (1ULL << 34)) {
  const auto n = read<std::uint64_t>(in);
  if (n > max_count) throw DataError("implausible array length in binary artifact");
  std::vector<T> v(n);
  if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)))) {
    throw DataError("truncated binary artifact");
  }
  return v;
}

inline std::string read_string(std::istream& in) {
  const auto n = read<std::uint32_t>(in);
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw DataError("truncated binary artifact");
  return s;
}

inline void expect_magic(std::istream& in, std::string_view magic, const std::string& what) {
  std::string got(magic.size(), '\0');
  if (!in.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic) {
    throw DataError(what + ": bad magic, expected " + std::string(magic));
  }
}

}  // namespace revrec::binary

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <string>
#include <type_traits>

#include "prunelab/errors.hpp"

namespace prunelab::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  static_assert(std::is_trivially_copyable_v<T>);
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("unexpected end of file");
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::uint64_t limit = 1u << 26) {
  const auto n = get<std::uint64_t>(is);
  if (n > limit) throw FormatError("string length out of range");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("unexpected end of file");
  return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[9]) {
  char buf[8];
  if (!is.read(buf, 8) || std::memcmp(buf, magic, 8) != 0)
    throw FormatError(std::string("bad magic, expected ") + magic);
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace prunelab::binio

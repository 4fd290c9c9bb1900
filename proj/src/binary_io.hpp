#pragma once

// Little-endian scalar I/O for the binary containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "sklab/error.hpp"

namespace sk::io {

static_assert(std::endian::native == std::endian::little,
              "binary containers assume a little-endian host");

template <typename T>
void write_le(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw Error(ErrorKind::kFormat, what, "truncated file");
  }
  return value;
}

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5], const char* what) {
  char buf[4] = {};
  if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
    throw Error(ErrorKind::kFormat, what, std::string("missing magic ") + magic);
  }
}

}  // namespace sk::io

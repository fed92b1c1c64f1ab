#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "grn/error.hpp"

// Little-endian primitive I/O shared by the GRN1 / GRNM / GRNW file formats.

namespace grn::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
inline void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
  }
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

// Reader that tracks the byte offset so format errors can name where they happened.
class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  std::uint64_t offset() const { return offset_; }

  template <typename T>
  T read_le(std::string_view what) {
    unsigned char buf[sizeof(T)];
    is_.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (is_.gcount() != static_cast<std::streamsize>(sizeof(T)))
      fail("truncated while reading " + std::string(what));
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
    T value;
    std::memcpy(&value, buf, sizeof(T));
    offset_ += sizeof(T);
    return value;
  }

  std::string read_bytes(std::size_t n, std::string_view what) {
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (is_.gcount() != static_cast<std::streamsize>(n))
      fail("truncated while reading " + std::string(what));
    offset_ += n;
    return s;
  }

  void expect_magic(std::string_view magic) {
    const auto start = offset_;
    std::string got(magic.size(), '\0');
    is_.read(got.data(), static_cast<std::streamsize>(magic.size()));
    if (is_.gcount() != static_cast<std::streamsize>(magic.size()) || got != magic)
      throw FormatError("bad magic at offset " + std::to_string(start) + ": expected \"" +
                        std::string(magic) + "\"");
    offset_ += magic.size();
  }

  bool at_eof() { return is_.peek() == std::char_traits<char>::eof(); }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(msg + " at offset " + std::to_string(offset_));
  }

 private:
  std::istream& is_;
  std::uint64_t offset_ = 0;
};

}  // namespace grn::io

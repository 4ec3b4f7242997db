#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace noop::nd {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace le {

template <typename U>
void write(std::ostream& os, U value) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(bytes[i], bytes[sizeof(U) - 1 - i]);
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read(std::istream& is, const char* what) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(bytes[i], bytes[sizeof(U) - 1 - i]);
  }
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

inline void write_string_u16(std::ostream& os, const std::string& s) {
  if (s.size() > 0xffff) throw std::invalid_argument("string longer than 65535 bytes: " + s.substr(0, 32));
  write<std::uint16_t>(os, static_cast<std::uint16_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string_u16(std::istream& is, const char* what) {
  const auto len = read<std::uint16_t>(is, what);
  std::string s(len, '\0');
  if (len && !is.read(s.data(), len)) throw FormatError(std::string("truncated file while reading ") + what);
  return s;
}

inline void expect_magic(std::istream& is, const std::string& magic) {
  std::string got(magic.size(), '\0');
  if (!is.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic) {
    throw FormatError("bad magic: expected '" + magic + "'");
  }
}

}  // namespace le
}  // namespace noop::nd

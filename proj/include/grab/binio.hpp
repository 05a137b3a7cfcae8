#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "grab/error.hpp"

namespace grab::binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

template <typename T>
  requires std::is_trivially_copyable_v<T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
T get(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorKind::kIo, std::string("truncated input while reading ") + what);
  return v;
}

template <typename T>
void put_array(std::ostream& out, const T* data, std::size_t n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void get_array(std::istream& in, T* data, std::size_t n, const char* what) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  if (!in) fail(ErrorKind::kIo, std::string("truncated input while reading ") + what);
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, const char* what) {
  const auto n = get<std::uint32_t>(in, what);
  if (n > (1u << 24)) fail(ErrorKind::kIo, std::string("implausible string length in ") + what);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) fail(ErrorKind::kIo, std::string("truncated input while reading ") + what);
  return s;
}

}  // namespace grab::binio

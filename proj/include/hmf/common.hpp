#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace hmf {

// All factor storage and accumulation is double precision.
using Real = double;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input text; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), _line{line} {}

  std::size_t line() const noexcept { return _line; }

 private:
  std::size_t _line;
};

class NotCalibrated : public Error {
 public:
  using Error::Error;
};

class InvalidPlan : public Error {
 public:
  using Error::Error;
};

enum class WorkerClass : std::uint8_t { stream, batch };

inline const char* to_string(WorkerClass c) {
  return c == WorkerClass::stream ? "stream" : "batch";
}

enum class Region : std::uint8_t { stream, batch };

inline const char* to_string(Region r) {
  return r == Region::stream ? "stream" : "batch";
}

// Worker counts: n_c stream workers and n_g batch workers.
struct DeviceTopology {
  int n_c{1};
  int n_g{0};

  int total() const noexcept { return n_c + n_g; }

  void validate() const {
    if (n_c < 0 || n_g < 0 || n_c + n_g < 1) {
      throw Error("topology needs n_c >= 0, n_g >= 0 and at least one worker");
    }
  }

  friend bool operator==(const DeviceTopology&, const DeviceTopology&) = default;
};

// ----------------------------------------------------------------------------
// Little-endian binary helpers

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) {
      std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    }
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw Error("unexpected end of binary file");
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) {
      std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    }
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

// splitmix64 finalizer, used to derive independent seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename... Rest>
constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) noexcept {
  return mix_seed(mix_seed(a) ^ (b + 0x632be59bd9b4e019ULL), static_cast<std::uint64_t>(rest)...);
}

}  // namespace detail

}  // namespace hmf

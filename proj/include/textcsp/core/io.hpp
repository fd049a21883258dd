#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "textcsp/core/error.hpp"

namespace textcsp::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);
std::vector<std::uint8_t> read_bytes(const fs::path& path);
void write_bytes(const fs::path& path, const void* data, std::size_t size);

json read_json(const fs::path& path);
// Pretty-printed with sorted keys and a trailing newline.
void write_json(const fs::path& path, const json& value);

template <typename T>
void to_little_endian(const T* src, std::size_t count, std::uint8_t* dst) {
  std::memcpy(dst, src, count * sizeof(T));
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint8_t* p = dst + i * sizeof(T);
      for (std::size_t a = 0, b = sizeof(T) - 1; a < b; ++a, --b) std::swap(p[a], p[b]);
    }
  }
}

template <typename T>
void from_little_endian(const std::uint8_t* src, std::size_t count, T* dst) {
  std::memcpy(dst, src, count * sizeof(T));
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    auto* p0 = reinterpret_cast<std::uint8_t*>(dst);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint8_t* p = p0 + i * sizeof(T);
      for (std::size_t a = 0, b = sizeof(T) - 1; a < b; ++a, --b) std::swap(p[a], p[b]);
    }
  }
}

// Raw little-endian array files. Reading checks the exact byte count and
// names the file on any failure.
template <typename T>
void write_raw(const fs::path& path, const std::vector<T>& values) {
  std::vector<std::uint8_t> bytes(values.size() * sizeof(T));
  to_little_endian(values.data(), values.size(), bytes.data());
  write_bytes(path, bytes.data(), bytes.size());
}

template <typename T>
std::vector<T> read_raw(const fs::path& path, std::size_t count) {
  const auto bytes = read_bytes(path);
  if (bytes.size() != count * sizeof(T)) {
    throw IoError(path.filename().string() + ": expected " + std::to_string(count * sizeof(T)) +
                  " bytes, found " + std::to_string(bytes.size()));
  }
  std::vector<T> out(count);
  from_little_endian(bytes.data(), count, out.data());
  return out;
}

// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(const std::string& text);

}  // namespace textcsp::io

#pragma once

// Little-endian length-prefixed blobs and JSON manifests shared by the
// store, prototype and classifier containers.
//
// Blob layout: u64 payload byte length (little-endian), then the payload as
// little-endian 32-bit elements, row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "headaudit/error.hpp"

namespace headaudit::detail {

inline constexpr std::size_t kBlobHeaderBytes = 8;

inline std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) |
         (v >> 24);
}

inline std::size_t checked_mul(std::size_t a, std::size_t b,
                               const std::string& what) {
  if (a != 0 && b > std::numeric_limits<std::size_t>::max() / a) {
    throw Error(Errc::kFormat, what + ": dimension product overflows");
  }
  return a * b;
}

template <typename T>
void write_blob(const std::filesystem::path& path, const std::vector<T>& values) {
  static_assert(sizeof(T) == 4 && std::is_trivially_copyable_v<T>);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(Errc::kOutput, "cannot open " + path.string() + " for writing");
  }
  const std::uint64_t payload = static_cast<std::uint64_t>(values.size()) * 4;
  unsigned char header[kBlobHeaderBytes];
  for (std::size_t b = 0; b < kBlobHeaderBytes; ++b) {
    header[b] = static_cast<unsigned char>(payload >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(header), kBlobHeaderBytes);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(payload));
  } else {
    std::vector<std::uint32_t> swapped(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint32_t raw;
      std::memcpy(&raw, &values[i], 4);
      swapped[i] = byteswap32(raw);
    }
    out.write(reinterpret_cast<const char*>(swapped.data()),
              static_cast<std::streamsize>(payload));
  }
  if (!out) {
    throw Error(Errc::kOutput, "write failed for " + path.string());
  }
}

// Reads a blob that must hold exactly `expected_count` elements. Errors name
// the blob and the byte offset where the file disagrees with its header or
// with the manifest.
template <typename T>
std::vector<T> read_blob(const std::filesystem::path& path,
                         std::size_t expected_count) {
  static_assert(sizeof(T) == 4 && std::is_trivially_copyable_v<T>);
  const std::string name = path.filename().string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::kIo, name + ": cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  if (file_size < kBlobHeaderBytes) {
    throw Error(Errc::kTruncated,
                name + ": truncated length header (file is " +
                    std::to_string(file_size) + " bytes, header needs 8)");
  }
  unsigned char header[kBlobHeaderBytes];
  in.read(reinterpret_cast<char*>(header), kBlobHeaderBytes);
  std::uint64_t declared = 0;
  for (std::size_t b = 0; b < kBlobHeaderBytes; ++b) {
    declared |= static_cast<std::uint64_t>(header[b]) << (8 * b);
  }
  const std::uint64_t available = file_size - kBlobHeaderBytes;
  const std::size_t expected_bytes = checked_mul(expected_count, 4, name);
  if (declared != expected_bytes) {
    throw Error(Errc::kFormat,
                name + ": length header at byte offset 0 declares " +
                    std::to_string(declared) + " bytes, manifest dims require " +
                    std::to_string(expected_bytes));
  }
  if (available < declared) {
    throw Error(Errc::kTruncated,
                name + ": truncated payload, " + std::to_string(available) +
                    " of " + std::to_string(declared) +
                    " bytes present (data ends at byte offset " +
                    std::to_string(file_size) + ")");
  }
  if (available > declared) {
    throw Error(Errc::kFormat,
                name + ": " + std::to_string(available - declared) +
                    " trailing bytes after payload at byte offset " +
                    std::to_string(kBlobHeaderBytes + declared));
  }
  std::vector<T> values(expected_count);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(declared));
  if (!in) throw Error(Errc::kIo, name + ": read failed");
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : values) {
      std::uint32_t raw;
      std::memcpy(&raw, &v, 4);
      raw = byteswap32(raw);
      std::memcpy(&v, &raw, 4);
    }
  }
  return values;
}

inline nlohmann::json read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIo, "cannot open manifest " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kFormat,
                path.filename().string() + ": malformed JSON: " + e.what());
  }
}

inline void write_manifest(const std::filesystem::path& path,
                           const nlohmann::ordered_json& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error(Errc::kOutput, "cannot open " + path.string() + " for writing");
  }
  out << manifest.dump(2) << '\n';
  if (!out) throw Error(Errc::kOutput, "write failed for " + path.string());
}

inline void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw Error(Errc::kOutput,
                "cannot create directory " + dir.string() + ": " + ec.message());
  }
}

// Typed field access with errors that name the manifest field.
inline const nlohmann::json& field(const nlohmann::json& obj,
                                   const std::string& key,
                                   const std::string& context) {
  if (!obj.is_object()) {
    throw Error(Errc::kFormat, context + ": expected a JSON object");
  }
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw Error(Errc::kFormat, context + ": missing field '" + key + "'");
  }
  return *it;
}

inline std::size_t get_count(const nlohmann::json& obj, const std::string& key,
                             const std::string& context) {
  const auto& v = field(obj, key, context);
  if (!v.is_number_unsigned()) {
    throw Error(Errc::kFormat,
                context + ": field '" + key + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

inline std::string get_string(const nlohmann::json& obj, const std::string& key,
                              const std::string& context) {
  const auto& v = field(obj, key, context);
  if (!v.is_string()) {
    throw Error(Errc::kFormat,
                context + ": field '" + key + "' must be a string");
  }
  return v.get<std::string>();
}

inline std::vector<std::string> get_strings(const nlohmann::json& obj,
                                            const std::string& key,
                                            const std::string& context) {
  const auto& v = field(obj, key, context);
  if (!v.is_array()) {
    throw Error(Errc::kFormat,
                context + ": field '" + key + "' must be an array of strings");
  }
  std::vector<std::string> out;
  out.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_string()) {
      throw Error(Errc::kFormat, context + ": " + key + "[" +
                                     std::to_string(i) + "] must be a string");
    }
    out.push_back(v[i].get<std::string>());
  }
  return out;
}

inline void expect_header(const nlohmann::json& manifest,
                          const std::string& format,
                          const std::string& context) {
  if (get_string(manifest, "format", context) != format) {
    throw Error(Errc::kFormat,
                context + ": field 'format' must be \"" + format + "\"");
  }
  if (get_count(manifest, "version", context) != 1) {
    throw Error(Errc::kFormat, context + ": unsupported version");
  }
  if (get_string(manifest, "endianness", context) != "little") {
    throw Error(Errc::kFormat, context + ": field 'endianness' must be \"little\"");
  }
}

}  // namespace headaudit::detail

#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace fusionrec {

enum class DType : uint8_t { kF32, kF64 };

std::size_t dtype_size(DType dtype);
std::string dtype_name(DType dtype);
DType parse_dtype(const std::string& name);

struct TensorEntry {
  std::string name;
  DType dtype = DType::kF32;
  std::vector<int64_t> shape;
  // Row-major little-endian element bytes.
  std::vector<std::byte> data;

  int64_t element_count() const;

  template <class T>
  static TensorEntry from_values(std::string name, std::vector<int64_t> shape,
                                 std::span<const T> values);

  // Converts to T regardless of the stored dtype.
  template <class T>
  std::vector<T> values() const;

  bool operator==(const TensorEntry&) const = default;
};

struct TensorContainer {
  std::vector<TensorEntry> entries;
  nlohmann::json meta = nlohmann::json::object();

  const TensorEntry* find(const std::string& name) const;
  const TensorEntry& at(const std::string& name) const;
  void add(TensorEntry entry);
};

inline constexpr char kContainerMagic[4] = {'P', 'T', 'N', 'S'};
inline constexpr uint32_t kContainerVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

// Layout: "PTNS" | u32 version | u64 manifest length | manifest JSON | zero
// padding | payloads. Payload offsets in the manifest are relative to the
// data section, which begins at the first 64-byte boundary after the
// manifest; every offset is itself a multiple of 64.
std::vector<std::byte> serialize_container(const TensorContainer& container);
TensorContainer parse_container(std::span<const std::byte> bytes);

// Writes to a sibling temp file and renames it into place.
void write_container(const TensorContainer& container,
                     const std::filesystem::path& path);
TensorContainer read_container(const std::filesystem::path& path);

// Reads only the manifest (tensor table + meta) without payloads.
nlohmann::json read_manifest(const std::filesystem::path& path);

void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::byte> bytes);
inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::as_bytes(std::span<const char>(text.data(), text.size())));
}
std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);

// --- template definitions ---------------------------------------------------

template <class T>
DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

template <class T>
TensorEntry TensorEntry::from_values(std::string name,
                                     std::vector<int64_t> shape,
                                     std::span<const T> values) {
  TensorEntry entry;
  entry.name = std::move(name);
  entry.dtype = dtype_of<T>();
  entry.shape = std::move(shape);
  entry.data.resize(values.size() * sizeof(T));
  std::memcpy(entry.data.data(), values.data(), entry.data.size());
  return entry;
}

template <class T>
std::vector<T> TensorEntry::values() const {
  const auto count = static_cast<std::size_t>(element_count());
  std::vector<T> out(count);
  if (dtype == DType::kF32) {
    std::vector<float> raw(count);
    std::memcpy(raw.data(), data.data(), count * sizeof(float));
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<T>(raw[i]);
  } else {
    std::vector<double> raw(count);
    std::memcpy(raw.data(), data.data(), count * sizeof(double));
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<T>(raw[i]);
  }
  return out;
}

}  // namespace fusionrec

#include "fusionrec/tensor_store.hpp"

#include <bit>
#include <fstream>
#include <set>

#include "fusionrec/error.hpp"

namespace fusionrec {

static_assert(std::endian::native == std::endian::little,
              "container payloads are stored little-endian");

namespace {

constexpr std::size_t kHeaderSize = 4 + sizeof(uint32_t) + sizeof(uint64_t);

std::size_t align_up(std::size_t value) {
  return (value + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment;
}

template <class Int>
void put_le(std::vector<std::byte>& out, Int value) {
  for (std::size_t i = 0; i < sizeof(Int); ++i) {
    out.push_back(static_cast<std::byte>((value >> (8 * i)) & 0xff));
  }
}

template <class Int>
Int get_le(std::span<const std::byte> bytes, std::size_t at) {
  Int value = 0;
  for (std::size_t i = 0; i < sizeof(Int); ++i) {
    value |= static_cast<Int>(std::to_integer<uint8_t>(bytes[at + i])) << (8 * i);
  }
  return value;
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  return dtype == DType::kF32 ? 4 : 8;
}

std::string dtype_name(DType dtype) {
  return dtype == DType::kF32 ? "f32" : "f64";
}

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::kF32;
  if (name == "f64") return DType::kF64;
  fail(ErrorKind::kParse, "unknown dtype '" + name + "'");
}

int64_t TensorEntry::element_count() const {
  int64_t count = 1;
  for (int64_t dim : shape) count *= dim;
  return count;
}

const TensorEntry* TensorContainer::find(const std::string& name) const {
  for (const auto& entry : entries) {
    if (entry.name == name) return &entry;
  }
  return nullptr;
}

const TensorEntry& TensorContainer::at(const std::string& name) const {
  const TensorEntry* entry = find(name);
  if (entry == nullptr) fail(ErrorKind::kNotFound, "no tensor named '" + name + "'");
  return *entry;
}

void TensorContainer::add(TensorEntry entry) {
  if (find(entry.name) != nullptr) {
    fail(ErrorKind::kDuplicateName, "duplicate tensor name '" + entry.name + "'");
  }
  entries.push_back(std::move(entry));
}

std::vector<std::byte> serialize_container(const TensorContainer& container) {
  std::set<std::string> names;
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t cursor = 0;
  for (const auto& entry : container.entries) {
    if (!names.insert(entry.name).second) {
      fail(ErrorKind::kDuplicateName, "duplicate tensor name '" + entry.name + "'");
    }
    for (int64_t dim : entry.shape) {
      require(dim >= 0, ErrorKind::kShapeMismatch,
              "negative dimension in tensor '" + entry.name + "'");
    }
    const auto expected =
        static_cast<std::size_t>(entry.element_count()) * dtype_size(entry.dtype);
    if (expected != entry.data.size()) {
      fail(ErrorKind::kShapeMismatch,
           "tensor '" + entry.name + "' holds " + std::to_string(entry.data.size()) +
               " bytes, shape implies " + std::to_string(expected));
    }
    cursor = align_up(cursor);
    tensors.push_back({{"name", entry.name},
                       {"dtype", dtype_name(entry.dtype)},
                       {"shape", entry.shape},
                       {"offset", cursor},
                       {"length", entry.data.size()}});
    cursor += entry.data.size();
  }
  const nlohmann::json manifest = {
      {"tensors", tensors},
      {"meta", container.meta.is_null() ? nlohmann::json::object() : container.meta}};
  const std::string manifest_text = manifest.dump();

  std::vector<std::byte> out;
  for (char c : kContainerMagic) out.push_back(static_cast<std::byte>(c));
  put_le<uint32_t>(out, kContainerVersion);
  put_le<uint64_t>(out, manifest_text.size());
  for (char c : manifest_text) out.push_back(static_cast<std::byte>(c));
  const std::size_t data_start = align_up(out.size());
  out.resize(data_start, std::byte{0});

  for (std::size_t i = 0; i < container.entries.size(); ++i) {
    const auto& entry = container.entries[i];
    const std::size_t offset = data_start + tensors[i]["offset"].get<std::size_t>();
    out.resize(offset, std::byte{0});
    out.insert(out.end(), entry.data.begin(), entry.data.end());
  }
  return out;
}

namespace {

nlohmann::json parse_manifest(std::span<const std::byte> bytes,
                              std::size_t* data_start) {
  if (bytes.size() < 4 ||
      std::memcmp(bytes.data(), kContainerMagic, sizeof(kContainerMagic)) != 0) {
    fail(ErrorKind::kBadMagic, "bad magic: not a tensor container");
  }
  if (bytes.size() < kHeaderSize) {
    fail(ErrorKind::kTruncatedPayload, "truncated payload: header incomplete");
  }
  const auto version = get_le<uint32_t>(bytes, 4);
  if (version != kContainerVersion) {
    fail(ErrorKind::kVersionMismatch,
         "version mismatch: file has " + std::to_string(version) + ", expected " +
             std::to_string(kContainerVersion));
  }
  const auto manifest_len = get_le<uint64_t>(bytes, 8);
  if (manifest_len > bytes.size() - kHeaderSize) {
    fail(ErrorKind::kTruncatedPayload, "truncated payload: manifest incomplete");
  }
  const std::string text(reinterpret_cast<const char*>(bytes.data() + kHeaderSize),
                         manifest_len);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.is_object() || !manifest.contains("tensors") ||
      !manifest["tensors"].is_array()) {
    fail(ErrorKind::kParse, "manifest lacks a tensor list");
  }
  *data_start = align_up(kHeaderSize + manifest_len);
  return manifest;
}

}  // namespace

TensorContainer parse_container(std::span<const std::byte> bytes) {
  std::size_t data_start = 0;
  const nlohmann::json manifest = parse_manifest(bytes, &data_start);

  TensorContainer container;
  container.meta = manifest.value("meta", nlohmann::json::object());
  try {
    for (const auto& item : manifest["tensors"]) {
      TensorEntry entry;
      entry.name = item.at("name").get<std::string>();
      entry.dtype = parse_dtype(item.at("dtype").get<std::string>());
      entry.shape = item.at("shape").get<std::vector<int64_t>>();
      const auto offset = item.at("offset").get<std::size_t>();
      const auto length = item.at("length").get<std::size_t>();
      const auto expected =
          static_cast<std::size_t>(entry.element_count()) * dtype_size(entry.dtype);
      if (expected != length) {
        fail(ErrorKind::kShapeMismatch,
             "shape/length mismatch for tensor '" + entry.name + "'");
      }
      if (offset % kPayloadAlignment != 0) {
        fail(ErrorKind::kParse, "misaligned payload for tensor '" + entry.name + "'");
      }
      if (data_start + offset + length > bytes.size()) {
        fail(ErrorKind::kTruncatedPayload,
             "truncated payload in tensor '" + entry.name + "'");
      }
      const auto* begin = bytes.data() + data_start + offset;
      entry.data.assign(begin, begin + length);
      container.add(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("malformed tensor table: ") + e.what());
  }
  return container;
}

void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::byte> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::kIo, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::kIo, "rename to " + path.string() + " failed: " + ec.message());
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) fail(ErrorKind::kIo, "read failed for " + path.string());
  return bytes;
}

void write_container(const TensorContainer& container,
                     const std::filesystem::path& path) {
  write_file_atomic(path, serialize_container(container));
}

TensorContainer read_container(const std::filesystem::path& path) {
  return parse_container(read_file_bytes(path));
}

nlohmann::json read_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t data_start = 0;
  return parse_manifest(bytes, &data_start);
}

}  // namespace fusionrec

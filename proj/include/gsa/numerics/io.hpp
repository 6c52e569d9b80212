#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsa/error.hpp"
#include "gsa/numerics/params.hpp"
#include "gsa/numerics/tensor.hpp"

// Binary container shared by every on-disk format:
//
//   magic (5 bytes) | u64 LE manifest length | manifest (JSON text) | payload
//
// Payload offsets in the manifest are byte offsets from the start of the payload.
namespace gsa::io {

using nlohmann::json;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

/// Appends float32 little-endian encodings of `values`.
template <class T>
void put_f32_array(std::string& out, std::span<const T> values) {
  out.reserve(out.size() + 4 * values.size());
  for (T v : values) put_f32(out, static_cast<float>(v));
}

struct Container {
  json manifest;
  std::string payload;
};

inline std::string encode_container(std::string_view magic, const Container& c) {
  const std::string text = c.manifest.dump();
  std::string out;
  out.reserve(magic.size() + 8 + text.size() + c.payload.size());
  out.append(magic);
  put_u64(out, text.size());
  out.append(text);
  out.append(c.payload);
  return out;
}

/// Parses the envelope; the caller validates manifest contents against the payload.
inline Container decode_container(std::string_view magic, std::string_view bytes) {
  if (bytes.size() < magic.size() || bytes.substr(0, magic.size()) != magic) {
    throw Error(ErrorCode::kBadMagic, "bad magic: expected '" + std::string(magic) + "'");
  }
  const std::size_t head = magic.size() + 8;
  if (bytes.size() < head) throw Error(ErrorCode::kTruncated, "truncated header");
  const std::uint64_t mlen =
      get_u64(reinterpret_cast<const unsigned char*>(bytes.data()) + magic.size());
  if (mlen > bytes.size() - head) throw Error(ErrorCode::kTruncated, "truncated manifest");
  Container c;
  try {
    c.manifest = json::parse(bytes.substr(head, mlen));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("manifest is not valid JSON: ") + e.what());
  }
  c.payload = std::string(bytes.substr(head + mlen));
  return c;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write to '" + path.string() + "' failed");
}

// ---------------------------------------------------------------------------
// Tensor checkpoints

inline constexpr std::string_view kCheckpointMagic = "GSCK1";

/// Appends named tensors to a container as float32 payload records.
template <class T>
void append_tensors(Container& c, const TensorSet<T>& set, const std::string& prefix = "") {
  json& list = c.manifest["tensors"];
  if (list.is_null()) list = json::array();
  for (const auto& item : set) {
    json rec;
    rec["name"] = prefix + item.name;
    rec["shape"] = item.value.shape();
    rec["offset"] = c.payload.size();
    rec["count"] = item.value.size();
    list.push_back(rec);
    put_f32_array<T>(c.payload, item.value.span());
  }
}

/// Recovers every tensor recorded in the manifest whose name starts with `prefix`
/// (the prefix is stripped).
template <class T>
TensorSet<T> extract_tensors(const Container& c, const std::string& prefix = "") {
  TensorSet<T> out;
  const json& list = c.manifest.value("tensors", json::array());
  if (!list.is_array()) throw Error(ErrorCode::kCorrupt, "manifest 'tensors' is not an array");
  for (const json& rec : list) {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0, count = 0;
    try {
      name = rec.at("name").get<std::string>();
      shape = rec.at("shape").get<Shape>();
      offset = rec.at("offset").get<std::uint64_t>();
      count = rec.at("count").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kCorrupt, std::string("bad tensor record: ") + e.what());
    }
    if (name.rfind(prefix, 0) != 0) continue;
    if (shape_size(shape) != count) {
      throw Error(ErrorCode::kCorrupt, "tensor '" + name + "': shape does not match count");
    }
    if (offset > c.payload.size() || 4 * count > c.payload.size() - offset) {
      throw Error(ErrorCode::kTruncated, "tensor '" + name + "' extends past end of payload");
    }
    std::vector<T> data(count);
    const auto* base = reinterpret_cast<const unsigned char*>(c.payload.data()) + offset;
    for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<T>(get_f32(base + 4 * i));
    out.add(name.substr(prefix.size()), Tensor<T>(shape, std::move(data)));
  }
  return out;
}

/// Checks that tensor records tile the payload exactly.
inline void verify_payload_extent(const Container& c, std::uint64_t extra_bytes = 0) {
  std::uint64_t total = extra_bytes;
  for (const json& rec : c.manifest.value("tensors", json::array())) {
    total += 4 * rec.value("count", std::uint64_t{0});
  }
  if (total > c.payload.size()) throw Error(ErrorCode::kTruncated, "payload truncated");
  if (total < c.payload.size()) {
    throw Error(ErrorCode::kCorrupt, "manifest/payload length mismatch");
  }
}

template <class T>
std::string encode_checkpoint(const TensorSet<T>& tensors, const json& meta = json::object()) {
  Container c;
  c.manifest["format"] = "GSCK1";
  c.manifest["meta"] = meta;
  c.manifest["tensors"] = json::array();
  append_tensors(c, tensors);
  return encode_container(kCheckpointMagic, c);
}

template <class T>
TensorSet<T> decode_checkpoint(std::string_view bytes, json* meta = nullptr) {
  Container c = decode_container(kCheckpointMagic, bytes);
  verify_payload_extent(c);
  if (meta) *meta = c.manifest.value("meta", json::object());
  return extract_tensors<T>(c);
}

}  // namespace gsa::io

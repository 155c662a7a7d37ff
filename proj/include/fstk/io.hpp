#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "fstk/common.hpp"
#include "fstk/tensor.hpp"
#include <nlohmann/json.hpp>

namespace fstk {

// ---------------------------------------------------------------------------
// Little-endian primitives. Serialization is byte-wise so files are portable
// across hosts; round trips are bit-exact because floats are moved as raw
// bit patterns, never reformatted.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32_le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline uint32_t get_u32_le(const unsigned char* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
  return v;
}

inline uint64_t get_u64_le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32_le(std::string& out, float v) { put_u32_le(out, std::bit_cast<uint32_t>(v)); }
inline void put_f64_le(std::string& out, double v) { put_u64_le(out, std::bit_cast<uint64_t>(v)); }
inline float get_f32_le(const unsigned char* p) { return std::bit_cast<float>(get_u32_le(p)); }
inline double get_f64_le(const unsigned char* p) { return std::bit_cast<double>(get_u64_le(p)); }

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check_io(f.good(), "cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  f.flush();
  check_io(f.good(), "short write to '" + path + "'");
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check_io(f.good(), "cannot open '" + path + "' for reading");
  f.seekg(0, std::ios::end);
  std::streamoff len = f.tellg();
  check_io(len >= 0, "cannot determine size of '" + path + "'");
  f.seekg(0, std::ios::beg);
  std::vector<unsigned char> bytes(static_cast<size_t>(len));
  if (len > 0) f.read(reinterpret_cast<char*>(bytes.data()), len);
  check_io(f.good(), "failed reading '" + path + "'");
  return bytes;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// JSON files.
// ---------------------------------------------------------------------------

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  detail::write_file_bytes(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::vector<unsigned char> bytes = detail::read_file_bytes(path);
  nlohmann::json j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  check_io(!j.is_discarded(), "'" + path + "' is not valid JSON");
  return j;
}

// Stable fingerprint of a configuration document. nlohmann serializes object
// keys in sorted order, so semantically equal configs hash identically.
inline std::string config_hash_hex(const nlohmann::json& j) { return hash_hex(fnv1a64(j.dump())); }

// ---------------------------------------------------------------------------
// FSTK field stack: a binary container for a stack of single- or
// multi-channel scalar fields.
//
//   offset  size  contents
//   0       4     magic "FSTK"
//   4       4     version, little-endian u32, currently 1
//   8       16    n, C, H, W as little-endian u32
//   24      -     n*C*H*W little-endian IEEE-754 binary32 values,
//                 sample-major then channel, row-major within a field
//
// A JSON sidecar (same path + ".json") carries splits and metadata; the
// sidecar is written/read by the dataset and ensemble layers, not here.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kFieldStackVersion = 1;

inline void write_field_stack(const std::string& path, const Tensor<float>& t) {
  check_arg(t.rank() == 4, "field stack tensor must be rank 4, got " + shape_str(t.shape()));
  std::string out;
  out.reserve(24 + static_cast<size_t>(t.numel()) * 4);
  out += "FSTK";
  detail::put_u32_le(out, kFieldStackVersion);
  for (int d = 0; d < 4; ++d) {
    check_arg(t.dim(d) > 0, "field stack extents must be positive");
    detail::put_u32_le(out, static_cast<uint32_t>(t.dim(d)));
  }
  for (long long i = 0; i < t.numel(); ++i) detail::put_f32_le(out, t[i]);
  detail::write_file_bytes(path, out);
}

inline Tensor<float> read_field_stack(const std::string& path) {
  std::vector<unsigned char> bytes = detail::read_file_bytes(path);
  check_io(bytes.size() >= 24, "'" + path + "' is too short to be a field stack (" +
                                   std::to_string(bytes.size()) + " bytes, header needs 24)");
  check_io(std::memcmp(bytes.data(), "FSTK", 4) == 0, "'" + path + "' has a bad magic number (not a field stack)");
  uint32_t version = detail::get_u32_le(bytes.data() + 4);
  check_io(version == kFieldStackVersion, "'" + path + "' has unsupported field stack version " +
                                              std::to_string(version) + " (expected " +
                                              std::to_string(kFieldStackVersion) + ")");
  Shape shape(4);
  for (int d = 0; d < 4; ++d) {
    uint32_t e = detail::get_u32_le(bytes.data() + 8 + 4 * d);
    check_io(e > 0 && e <= (1u << 30), "'" + path + "' declares invalid extent " + std::to_string(e));
    shape[static_cast<size_t>(d)] = static_cast<int>(e);
  }
  long long count = shape_numel(shape);
  size_t expected = 24 + static_cast<size_t>(count) * 4;
  check_io(bytes.size() >= expected, "'" + path + "' payload is truncated: expected " + std::to_string(expected) +
                                         " bytes, found " + std::to_string(bytes.size()));
  check_io(bytes.size() == expected, "'" + path + "' has " + std::to_string(bytes.size() - expected) +
                                         " trailing bytes beyond the declared payload");
  std::vector<float> data(static_cast<size_t>(count));
  for (long long i = 0; i < count; ++i) data[static_cast<size_t>(i)] = detail::get_f32_le(bytes.data() + 24 + 4 * i);
  return Tensor<float>::from_data(std::move(shape), std::move(data));
}

// Convenience converters; generation quantizes through binary32 so that the
// in-memory values equal the persisted ones exactly.
inline Tensor<float> to_f32(const Tensor<double>& t) {
  std::vector<float> d(static_cast<size_t>(t.numel()));
  for (long long i = 0; i < t.numel(); ++i) d[static_cast<size_t>(i)] = static_cast<float>(t[i]);
  return Tensor<float>::from_data(t.shape(), std::move(d));
}

inline Tensor<double> to_f64(const Tensor<float>& t) {
  std::vector<double> d(static_cast<size_t>(t.numel()));
  for (long long i = 0; i < t.numel(); ++i) d[static_cast<size_t>(i)] = static_cast<double>(t[i]);
  return Tensor<double>::from_data(t.shape(), std::move(d));
}

// ---------------------------------------------------------------------------
// FSTK-CKPT: checkpoint container holding named sections of 64-bit reals
// plus a JSON header. Used for network weights, variational parameters, and
// posterior sample stacks.
//
//   offset  size  contents
//   0       4     magic "FCKP"
//   4       4     version, little-endian u32, currently 1
//   8       4     header length B as little-endian u32
//   12      B     header JSON, UTF-8:
//                   { "meta": {...}, "sections": [ {"name": .., "count": ..}, .. ] }
//   12+B    -     section payloads in declared order, little-endian binary64
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointFile {
  nlohmann::json meta;
  // Ordered named payloads; order is part of the on-disk format.
  std::vector<std::pair<std::string, std::vector<double>>> sections;

  const std::vector<double>& section(const std::string& name) const {
    for (const auto& [n, data] : sections)
      if (n == name) return data;
    throw io_error("checkpoint has no section named '" + name + "'");
  }
  bool has_section(const std::string& name) const {
    for (const auto& [n, data] : sections)
      if (n == name) return true;
    return false;
  }
};

inline void write_checkpoint(const std::string& path, const CheckpointFile& ckpt) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["sections"] = nlohmann::json::array();
  size_t total = 0;
  for (const auto& [name, data] : ckpt.sections) {
    header["sections"].push_back({{"name", name}, {"count", data.size()}});
    total += data.size();
  }
  std::string hj = header.dump();
  std::string out;
  out.reserve(12 + hj.size() + total * 8);
  out += "FCKP";
  detail::put_u32_le(out, kCheckpointVersion);
  detail::put_u32_le(out, static_cast<uint32_t>(hj.size()));
  out += hj;
  for (const auto& [name, data] : ckpt.sections)
    for (double v : data) detail::put_f64_le(out, v);
  detail::write_file_bytes(path, out);
}

inline CheckpointFile read_checkpoint(const std::string& path) {
  std::vector<unsigned char> bytes = detail::read_file_bytes(path);
  check_io(bytes.size() >= 12, "'" + path + "' is too short to be a checkpoint (" + std::to_string(bytes.size()) +
                                   " bytes, header needs 12)");
  check_io(std::memcmp(bytes.data(), "FCKP", 4) == 0, "'" + path + "' has a bad magic number (not a checkpoint)");
  uint32_t version = detail::get_u32_le(bytes.data() + 4);
  check_io(version == kCheckpointVersion, "'" + path + "' has unsupported checkpoint version " +
                                              std::to_string(version) + " (expected " +
                                              std::to_string(kCheckpointVersion) + ")");
  uint32_t hlen = detail::get_u32_le(bytes.data() + 8);
  check_io(bytes.size() >= 12 + static_cast<size_t>(hlen), "'" + path + "' header is truncated");
  nlohmann::json header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen, nullptr, false);
  check_io(!header.is_discarded(), "'" + path + "' checkpoint header is not valid JSON");
  check_io(header.contains("meta") && header.contains("sections") && header["sections"].is_array(),
           "'" + path + "' checkpoint header is missing meta/sections");

  CheckpointFile ckpt;
  ckpt.meta = header["meta"];
  size_t offset = 12 + hlen;
  for (const auto& sec : header["sections"]) {
    check_io(sec.contains("name") && sec.contains("count"), "'" + path + "' checkpoint section entry is malformed");
    std::string name = sec["name"].get<std::string>();
    size_t count = sec["count"].get<size_t>();
    size_t need = offset + count * 8;
    check_io(bytes.size() >= need, "'" + path + "' section '" + name + "' is truncated: expected " +
                                       std::to_string(need) + " bytes, found " + std::to_string(bytes.size()));
    std::vector<double> data(count);
    for (size_t i = 0; i < count; ++i) data[i] = detail::get_f64_le(bytes.data() + offset + 8 * i);
    offset = need;
    ckpt.sections.emplace_back(std::move(name), std::move(data));
  }
  check_io(offset == bytes.size(), "'" + path + "' has " + std::to_string(bytes.size() - offset) +
                                       " trailing bytes beyond the declared sections");
  return ckpt;
}

}  // namespace fstk

#pragma once

// Binary tensor container: "SASN" magic, u16 version, u32 header length, a JSON
// header {name -> {dtype, shape}} and the little-endian row-major payloads in
// header order.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace sasan::io {

enum class DType { f32, f64, u8 };

std::string to_string(DType d);
DType dtype_from_string(const std::string& name);
std::size_t dtype_size(DType d);

/// Raw tensor payload; bytes are little-endian regardless of the host.
struct RawTensor {
  DType dtype = DType::f32;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;

  std::size_t numel() const;

  static RawTensor from_f32(std::vector<std::int64_t> shape, const std::vector<float>& values);
  static RawTensor from_f64(std::vector<std::int64_t> shape, const std::vector<double>& values);
  static RawTensor from_u8(std::vector<std::int64_t> shape, std::vector<std::uint8_t> values);
  std::vector<float> as_f32() const;
  std::vector<double> as_f64() const;

  friend bool operator==(const RawTensor&, const RawTensor&) = default;
};

struct Container {
  std::vector<std::pair<std::string, RawTensor>> tensors;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();

  void add(std::string name, RawTensor t);
  const RawTensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

constexpr std::uint16_t kContainerVersion = 1;
/// Header key holding free-form metadata; not a tensor name.
inline constexpr const char* kMetadataKey = "__metadata__";

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(const std::vector<std::uint8_t>& data);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

}  // namespace sasan::io

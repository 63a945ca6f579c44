#include "sasan/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "sasan/error.hpp"

namespace sasan::io {

namespace {

constexpr char kMagic[4] = {'S', 'A', 'S', 'N'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p[i]) << (8 * i));
  return v;
}

template <typename F, typename U>
std::vector<std::uint8_t> encode_values(const std::vector<F>& values) {
  std::vector<std::uint8_t> out;
  out.reserve(values.size() * sizeof(F));
  for (F v : values) put_le<U>(out, std::bit_cast<U>(v));
  return out;
}

template <typename F, typename U>
std::vector<F> decode_values(const std::vector<std::uint8_t>& bytes) {
  std::vector<F> out(bytes.size() / sizeof(F));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<F>(get_le<U>(bytes.data() + i * sizeof(F)));
  return out;
}

std::size_t shape_product(const std::vector<std::int64_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace

std::string to_string(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::u8: return "u8";
  }
  return "?";
}

DType dtype_from_string(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  if (name == "u8") return DType::u8;
  throw FormatError("unsupported dtype '" + name + "'");
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  return 0;
}

std::size_t RawTensor::numel() const { return shape_product(shape); }

RawTensor RawTensor::from_f32(std::vector<std::int64_t> shape, const std::vector<float>& values) {
  if (shape_product(shape) != values.size()) throw ContractError("from_f32: shape does not match value count");
  return {DType::f32, std::move(shape), encode_values<float, std::uint32_t>(values)};
}

RawTensor RawTensor::from_f64(std::vector<std::int64_t> shape, const std::vector<double>& values) {
  if (shape_product(shape) != values.size()) throw ContractError("from_f64: shape does not match value count");
  return {DType::f64, std::move(shape), encode_values<double, std::uint64_t>(values)};
}

RawTensor RawTensor::from_u8(std::vector<std::int64_t> shape, std::vector<std::uint8_t> values) {
  if (shape_product(shape) != values.size()) throw ContractError("from_u8: shape does not match value count");
  return {DType::u8, std::move(shape), std::move(values)};
}

std::vector<float> RawTensor::as_f32() const {
  if (dtype != DType::f32) throw ContractError("as_f32: tensor dtype is " + to_string(dtype));
  return decode_values<float, std::uint32_t>(bytes);
}

std::vector<double> RawTensor::as_f64() const {
  if (dtype != DType::f64) throw ContractError("as_f64: tensor dtype is " + to_string(dtype));
  return decode_values<double, std::uint64_t>(bytes);
}

void Container::add(std::string name, RawTensor t) {
  if (name == kMetadataKey) throw ContractError("tensor name '" + name + "' is reserved");
  if (contains(name)) throw ContractError("duplicate tensor name '" + name + "'");
  if (t.bytes.size() != t.numel() * dtype_size(t.dtype)) {
    throw ContractError("tensor '" + name + "': payload size does not match shape");
  }
  tensors.emplace_back(std::move(name), std::move(t));
}

const RawTensor& Container::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("container has no tensor '" + name + "'");
}

bool Container::contains(const std::string& name) const {
  for (const auto& entry : tensors) {
    if (entry.first == name) return true;
  }
  return false;
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  std::set<std::string> seen;
  for (const auto& [name, t] : c.tensors) {
    if (!seen.insert(name).second) throw ContractError("duplicate tensor name '" + name + "'");
    header[name] = {{"dtype", to_string(t.dtype)}, {"shape", t.shape}};
  }
  if (!c.metadata.empty()) header[kMetadataKey] = c.metadata;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint16_t>(out, kContainerVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& entry : c.tensors) out.insert(out.end(), entry.second.bytes.begin(), entry.second.bytes.end());
  return out;
}

Container decode_container(const std::vector<std::uint8_t>& data) {
  if (data.size() < 4 || std::memcmp(data.data(), kMagic, 4) != 0) throw FormatError("invalid field 'magic'");
  if (data.size() < 6) throw FormatError("invalid field 'version': truncated");
  const auto version = get_le<std::uint16_t>(data.data() + 4);
  if (version != kContainerVersion) throw FormatError("invalid field 'version': " + std::to_string(version));
  if (data.size() < 10) throw FormatError("invalid field 'header_length': truncated");
  const auto header_len = get_le<std::uint32_t>(data.data() + 6);
  if (data.size() - 10 < header_len) throw FormatError("invalid field 'header': truncated");

  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(data.begin() + 10, data.begin() + 10 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid field 'header': ") + e.what());
  }
  if (!header.is_object()) throw FormatError("invalid field 'header': not an object");

  Container c;
  std::size_t offset = 10 + header_len;
  for (const auto& [name, entry] : header.items()) {
    if (name == kMetadataKey) {
      c.metadata = entry;
      continue;
    }
    const std::string field = "tensor '" + name + "'";
    if (!entry.is_object() || !entry.contains("dtype") || !entry["dtype"].is_string()) {
      throw FormatError("invalid field " + field + " dtype");
    }
    RawTensor t;
    try {
      t.dtype = dtype_from_string(entry["dtype"].get<std::string>());
    } catch (const FormatError&) {
      throw FormatError("invalid field " + field + " dtype");
    }
    if (!entry.contains("shape") || !entry["shape"].is_array()) throw FormatError("invalid field " + field + " shape");
    for (const auto& d : entry["shape"]) {
      if (!d.is_number_integer() || d.get<std::int64_t>() < 0) throw FormatError("invalid field " + field + " shape");
      t.shape.push_back(d.get<std::int64_t>());
    }
    const std::size_t nbytes = t.numel() * dtype_size(t.dtype);
    if (data.size() - offset < nbytes) throw FormatError("invalid field " + field + " payload: truncated");
    t.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(offset),
                   data.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
    offset += nbytes;
    c.tensors.emplace_back(name, std::move(t));
  }
  if (offset != data.size()) throw FormatError("invalid field 'payload': trailing bytes");
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

}  // namespace sasan::io

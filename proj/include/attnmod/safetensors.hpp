#pragma once

// Reader/writer for the safetensors container: an 8-byte little-endian header
// length, a JSON header {name: {dtype, shape, data_offsets: [begin, end]}},
// then the raw tensor bytes. F16 is upcast to f32 on load.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "attnmod/tensor.hpp"

namespace attnmod {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace detail {

inline float half_to_float(uint16_t h) {
  const uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
  uint32_t exponent = (h >> 10) & 0x1fu;
  uint32_t mantissa = h & 0x3ffu;
  uint32_t bits;
  if (exponent == 0) {
    if (mantissa == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      exponent = 127 - 15 + 1;
      while ((mantissa & 0x400u) == 0) {
        mantissa <<= 1;
        --exponent;
      }
      mantissa &= 0x3ffu;
      bits = sign | (exponent << 23) | (mantissa << 13);
    }
  } else if (exponent == 0x1f) {
    bits = sign | 0x7f800000u | (mantissa << 13);
  } else {
    bits = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(bits);
}

inline std::vector<char> read_file_bytes(const std::filesystem::path& path, ErrorKind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(kind, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

inline TensorStore parse_safetensors(std::span<const char> bytes) {
  if (bytes.size() < 8) fail(ErrorKind::model, "safetensors: truncated header length");
  uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8) fail(ErrorKind::model, "safetensors: header length exceeds file size");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::model, std::string("safetensors: bad header json: ") + e.what());
  }
  const size_t data_start = 8 + header_len;
  const size_t data_size = bytes.size() - data_start;

  TensorStore store;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") continue;
    const std::string dtype = info.at("dtype").get<std::string>();
    Shape shape = info.at("shape").get<Shape>();
    const auto offsets = info.at("data_offsets").get<std::vector<uint64_t>>();
    if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_size)
      fail(ErrorKind::model, "safetensors: bad data_offsets for " + name);
    const char* src = bytes.data() + data_start + offsets[0];
    const uint64_t nbytes = offsets[1] - offsets[0];
    const auto count = static_cast<size_t>(numel(shape));

    std::vector<float> values(count);
    if (dtype == "F32") {
      if (nbytes != count * 4) fail(ErrorKind::model, "safetensors: byte size mismatch for " + name);
      std::memcpy(values.data(), src, nbytes);
    } else if (dtype == "F16") {
      if (nbytes != count * 2) fail(ErrorKind::model, "safetensors: byte size mismatch for " + name);
      for (size_t i = 0; i < count; ++i) {
        uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        values[i] = detail::half_to_float(h);
      }
    } else {
      fail(ErrorKind::model, "unsupported dtype " + dtype + " for tensor " + name);
    }
    store.emplace(name, Tensor(std::move(shape), std::move(values)));
  }
  return store;
}

inline TensorStore load_safetensors(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path, ErrorKind::model);
  return parse_safetensors(bytes);
}

// Writes every tensor as F32. Keys are emitted in sorted order and the header
// is space-padded to an 8-byte boundary, so output is byte-reproducible.
inline void save_safetensors(const std::filesystem::path& path, const TensorStore& store,
                             const std::map<std::string, std::string>& metadata = {}) {
  nlohmann::json header = nlohmann::json::object();
  uint64_t offset = 0;
  for (const auto& [name, tensor] : store) {
    const uint64_t nbytes = static_cast<uint64_t>(tensor.data.size()) * 4;
    header[name] = {{"dtype", "F32"}, {"shape", tensor.shape}, {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::string text = header.dump();
  while ((8 + text.size()) % 8 != 0) text.push_back(' ');

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::data, "cannot write " + path.string());
  const uint64_t header_len = text.size();
  out.write(reinterpret_cast<const char*>(&header_len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, tensor] : store)
    out.write(reinterpret_cast<const char*>(tensor.data.data()), static_cast<std::streamsize>(tensor.data.size() * 4));
  if (!out) fail(ErrorKind::data, "write failed for " + path.string());
}

}  // namespace attnmod

#pragma once

// Images as normalized CHW float arrays, plus a minimal NPY reader/writer.

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <regex>
#include <string>
#include <vector>

#include "attnmod/config.hpp"
#include "attnmod/error.hpp"

namespace attnmod {

struct Image {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> data;  // CHW, already normalized

  float at(int c, int y, int x) const {
    return data[static_cast<size_t>((c * height + y) * width + x)];
  }
  bool operator==(const Image&) const = default;
};

// Raw pixels before normalization. Values in [0, 1].
struct RawImage {
  int height = 0;
  int width = 0;
  std::vector<float> chw;
};

inline Image normalize_image(const RawImage& raw, const std::array<float, 3>& mean, const std::array<float, 3>& std) {
  Image img{3, raw.height, raw.width, std::vector<float>(raw.chw.size())};
  const size_t plane = static_cast<size_t>(raw.height) * raw.width;
  for (size_t c = 0; c < 3; ++c)
    for (size_t i = 0; i < plane; ++i) img.data[c * plane + i] = (raw.chw[c * plane + i] - mean[c]) / std[c];
  return img;
}

inline Image normalize_image(const RawImage& raw, const ModelConfig& config) {
  return normalize_image(raw, config.image_mean, config.image_std);
}

// Reads .npy arrays of dtype <f4 or |u1 with shape (3,H,W) or (H,W,3).
// uint8 values are scaled to [0, 1]; float values are taken as-is.
inline RawImage load_npy_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::data, "cannot open image " + path.string());
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0) fail(ErrorKind::data, path.string() + ": not an npy file");
  unsigned char version[2];
  in.read(reinterpret_cast<char*>(version), 2);
  uint32_t header_len = 0;
  if (version[0] == 1) {
    uint16_t h = 0;
    in.read(reinterpret_cast<char*>(&h), 2);
    header_len = h;
  } else {
    in.read(reinterpret_cast<char*>(&header_len), 4);
  }
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  if (!in) fail(ErrorKind::data, path.string() + ": truncated npy header");

  std::smatch m;
  static const std::regex descr_re(R"('descr':\s*'([^']+)')");
  static const std::regex order_re(R"('fortran_order':\s*(True|False))");
  static const std::regex shape_re(R"('shape':\s*\(([^)]*)\))");
  if (!std::regex_search(header, m, descr_re)) fail(ErrorKind::data, path.string() + ": npy header lacks descr");
  const std::string descr = m[1];
  if (std::regex_search(header, m, order_re) && m[1] == "True")
    fail(ErrorKind::data, path.string() + ": fortran-order npy not supported");
  if (!std::regex_search(header, m, shape_re)) fail(ErrorKind::data, path.string() + ": npy header lacks shape");
  std::vector<int> dims;
  {
    const std::string s = m[1];
    static const std::regex num_re(R"(\d+)");
    for (auto it = std::sregex_iterator(s.begin(), s.end(), num_re); it != std::sregex_iterator(); ++it)
      dims.push_back(std::stoi(it->str()));
  }
  if (dims.size() != 3) fail(ErrorKind::data, path.string() + ": wrong image shape (expected 3-D array)");

  const size_t count = static_cast<size_t>(dims[0]) * dims[1] * dims[2];
  std::vector<float> values(count);
  if (descr == "<f4") {
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * 4));
  } else if (descr == "|u1" || descr == "<u1") {
    std::vector<unsigned char> bytes(count);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(count));
    for (size_t i = 0; i < count; ++i) values[i] = static_cast<float>(bytes[i]) / 255.0f;
  } else {
    fail(ErrorKind::data, path.string() + ": unsupported npy dtype " + descr);
  }
  if (!in) fail(ErrorKind::data, path.string() + ": truncated npy data");

  RawImage raw;
  if (dims[0] == 3) {
    raw.height = dims[1];
    raw.width = dims[2];
    raw.chw = std::move(values);
  } else if (dims[2] == 3) {
    raw.height = dims[0];
    raw.width = dims[1];
    raw.chw.resize(count);
    const size_t plane = static_cast<size_t>(raw.height) * raw.width;
    for (size_t i = 0; i < plane; ++i)
      for (size_t c = 0; c < 3; ++c) raw.chw[c * plane + i] = values[i * 3 + c];
  } else {
    fail(ErrorKind::data, path.string() + ": wrong image shape (need 3 channels)");
  }
  return raw;
}

// Writes a float32 (3,H,W) npy array.
inline void save_npy_image(const std::filesystem::path& path, const RawImage& raw) {
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': (3, " + std::to_string(raw.height) + ", " +
                       std::to_string(raw.width) + "), }";
  while ((10 + header.size() + 1) % 64 != 0) header.push_back(' ');
  header.push_back('\n');
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::data, "cannot write " + path.string());
  out.write("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<uint16_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(raw.chw.data()), static_cast<std::streamsize>(raw.chw.size() * 4));
}

}  // namespace attnmod

#pragma once
// Dataset ingestion (IDX, PGM/PPM directories) and the DMFA tensor container.
//
// Container layout, all integers little-endian:
//   "DMFA" | u32 version (=1) | u32 header length | JSON header | f32 payload
// The JSON header lists the tensors in payload order with their shapes and
// role tags, plus free-form metadata under "meta".

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmfa/error.hpp"

namespace dmfa {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct ImageShape {
  int channels = 1;
  int height = 0;
  int width = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  bool operator==(const ImageShape&) const = default;
};

inline void to_json(json& j, const ImageShape& s) {
  j = json::array({s.channels, s.height, s.width});
}
inline void from_json(const json& j, ImageShape& s) {
  s.channels = j.at(0).get<int>();
  s.height = j.at(1).get<int>();
  s.width = j.at(2).get<int>();
}

/// Images stored contiguously, one flat channel-major (C,H,W) vector per
/// sample. Loaders guarantee values in [0,1].
struct Dataset {
  ImageShape shape;
  std::vector<float> values;

  std::size_t dim() const { return shape.size(); }
  std::size_t count() const { return dim() == 0 ? 0 : values.size() / dim(); }

  std::span<const float> sample(std::size_t i) const {
    return {values.data() + i * dim(), dim()};
  }
  std::span<float> sample(std::size_t i) { return {values.data() + i * dim(), dim()}; }

  void push_back(std::span<const float> x) {
    if (x.size() != dim()) throw ShapeError("sample length does not match dataset shape");
    values.insert(values.end(), x.begin(), x.end());
  }

  /// Samples [first, first + n) as a new dataset.
  Dataset slice(std::size_t first, std::size_t n) const {
    if (first + n > count()) throw IndexError("dataset slice out of range");
    Dataset out{shape, {}};
    out.values.assign(values.begin() + static_cast<std::ptrdiff_t>(first * dim()),
                      values.begin() + static_cast<std::ptrdiff_t>((first + n) * dim()));
    return out;
  }
};

namespace detail {

inline std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
         (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

inline std::uint32_t read_le32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[3]} << 24);
}

inline void put_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline float byte_to_unit(unsigned char v) { return static_cast<float>(v) / 255.0f; }

inline unsigned char unit_to_byte(float v) {
  if (!(v > 0.0f)) return 0;  // also maps NaN to 0
  if (v >= 1.0f) return 255;
  return static_cast<unsigned char>(std::lround(v * 255.0f));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

inline Dataset load_idx(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 4) throw FormatError("IDX file too short: " + path.string());
  const std::uint32_t magic = detail::read_be32(bytes.data());
  if (magic == kIdxLabelMagic) throw WrongKindError("IDX file holds labels, not images: " + path.string());
  if (magic != kIdxImageMagic) throw FormatError("bad IDX magic in " + path.string());
  if (bytes.size() < 16) throw FormatError("truncated IDX header in " + path.string());

  const std::uint64_t count = detail::read_be32(bytes.data() + 4);
  const std::uint64_t rows = detail::read_be32(bytes.data() + 8);
  const std::uint64_t cols = detail::read_be32(bytes.data() + 12);
  const std::uint64_t expected = count * rows * cols;
  if (bytes.size() - 16 != expected) {
    throw FormatError("IDX payload is " + std::to_string(bytes.size() - 16) + " bytes, expected " +
                      std::to_string(expected));
  }

  Dataset out;
  out.shape = {1, static_cast<int>(rows), static_cast<int>(cols)};
  out.values.resize(expected);
  std::transform(bytes.begin() + 16, bytes.end(), out.values.begin(), detail::byte_to_unit);
  return out;
}

/// Binary PGM (P5) / PPM (P6) image with 8-bit samples, converted to planar
/// [0,1] floats.
struct PnmImage {
  ImageShape shape;
  std::vector<float> values;
};

inline PnmImage read_pnm(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw FormatError("bad PNM header in " + path.string());
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("not a binary PGM/PPM file: " + path.string());
  }
  const int channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  const long width = read_int();
  const long height = read_int();
  const long maxval = read_int();
  if (maxval != 255) throw FormatError("only 8-bit PNM files are supported: " + path.string());
  ++pos;  // single whitespace byte before the raster

  const std::size_t pixels = static_cast<std::size_t>(width) * height;
  if (bytes.size() < pos + pixels * channels) throw FormatError("truncated PNM raster in " + path.string());

  PnmImage img;
  img.shape = {channels, static_cast<int>(height), static_cast<int>(width)};
  img.values.resize(pixels * channels);
  // interleaved RGB on disk, planar in memory
  for (std::size_t p = 0; p < pixels; ++p)
    for (int c = 0; c < channels; ++c)
      img.values[c * pixels + p] = detail::byte_to_unit(bytes[pos + p * channels + c]);
  return img;
}

/// Writes planar [0,1] values as P5 (1 channel) or P6 (3 channels); values are
/// clamped to [0,1] before scaling to bytes.
inline void write_pnm(const fs::path& path, const ImageShape& shape, std::span<const float> values) {
  if (shape.channels != 1 && shape.channels != 3) throw ShapeError("PNM output needs 1 or 3 channels");
  if (values.size() != shape.size()) throw ShapeError("PNM value count does not match shape");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << (shape.channels == 1 ? "P5" : "P6") << '\n' << shape.width << ' ' << shape.height << "\n255\n";
  const std::size_t pixels = shape.pixels();
  std::string raster(values.size(), '\0');
  for (std::size_t p = 0; p < pixels; ++p)
    for (int c = 0; c < shape.channels; ++c)
      raster[p * shape.channels + c] = static_cast<char>(detail::unit_to_byte(values[c * pixels + p]));
  out.write(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (!out) throw Error("write failed for " + path.string());
}

/// Loads every *.pgm / *.ppm file of a directory in lexicographic order. No
/// resampling: every image must already have the requested size.
inline Dataset load_image_dir(const fs::path& dir, int height, int width) {
  if (!fs::is_directory(dir)) throw FormatError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".pgm" || ext == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

  Dataset out;
  out.shape = {1, height, width};
  bool first = true;
  for (const auto& f : files) {
    PnmImage img = read_pnm(f);
    if (first) {
      out.shape.channels = img.shape.channels;
      first = false;
    } else if (img.shape.channels != out.shape.channels) {
      throw FormatError("directory mixes gray-scale and color images: " + f.string());
    }
    if (img.shape.height != height || img.shape.width != width) {
      throw ShapeError(f.string() + " is " + std::to_string(img.shape.height) + "x" +
                       std::to_string(img.shape.width) + ", expected " + std::to_string(height) + "x" +
                       std::to_string(width));
    }
    out.values.insert(out.values.end(), img.values.begin(), img.values.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tensor container

inline constexpr char kContainerMagic[4] = {'D', 'M', 'F', 'A'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct Tensor {
  std::string name;
  std::string role;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::size_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::int64_t b) { return a * static_cast<std::size_t>(b); });
  }
};

struct Container {
  json meta = json::object();
  std::vector<Tensor> tensors;

  void add(std::string name, std::string role, std::vector<std::int64_t> shape, std::vector<float> data) {
    tensors.push_back({std::move(name), std::move(role), std::move(shape), std::move(data)});
  }

  const Tensor& at(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw FormatError("container has no tensor named '" + name + "'");
  }

  bool contains(const std::string& name) const {
    return std::any_of(tensors.begin(), tensors.end(), [&](const Tensor& t) { return t.name == name; });
  }
};

inline void save_container(const fs::path& path, const Container& c) {
  json header;
  header["dtype"] = "f32";
  header["byte_order"] = "little";
  header["meta"] = c.meta;
  header["tensors"] = json::array();
  std::size_t total = 0;
  for (const auto& t : c.tensors) {
    if (t.numel() != t.data.size()) {
      throw FormatError("tensor '" + t.name + "' shape does not match its payload length");
    }
    for (float v : t.data)
      if (!std::isfinite(v)) throw InvalidValueError("tensor '" + t.name + "' contains a non-finite value");
    header["tensors"].push_back({{"name", t.name}, {"role", t.role}, {"shape", t.shape}});
    total += t.data.size();
  }

  const std::string text = header.dump();
  std::string blob(kContainerMagic, 4);
  detail::put_le32(blob, kContainerVersion);
  detail::put_le32(blob, static_cast<std::uint32_t>(text.size()));
  blob += text;
  blob.reserve(blob.size() + 4 * total);
  for (const auto& t : c.tensors)
    for (float v : t.data) detail::put_le32(blob, std::bit_cast<std::uint32_t>(v));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw Error("write failed for " + path.string());
}

inline Container load_container(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 12 || !std::equal(kContainerMagic, kContainerMagic + 4, bytes.begin())) {
    throw FormatError("bad container magic in " + path.string());
  }
  const std::uint32_t version = detail::read_le32(bytes.data() + 4);
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version));
  }
  const std::size_t header_len = detail::read_le32(bytes.data() + 8);
  if (bytes.size() < 12 + header_len) throw FormatError("truncated container header");

  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("container header is not valid JSON: ") + e.what());
  }

  Container c;
  std::size_t offset = 12 + header_len;
  try {
    if (header.at("dtype") != "f32" || header.at("byte_order") != "little") {
      throw FormatError("unsupported container dtype/byte order");
    }
    c.meta = header.value("meta", json::object());
    std::size_t total = 0;
    for (const auto& jt : header.at("tensors")) {
      Tensor t;
      t.name = jt.at("name").get<std::string>();
      t.role = jt.at("role").get<std::string>();
      t.shape = jt.at("shape").get<std::vector<std::int64_t>>();
      for (auto d : t.shape)
        if (d < 0) throw FormatError("negative tensor dimension");
      total += t.numel();
      c.tensors.push_back(std::move(t));
    }
    if (bytes.size() - offset != 4 * total) {
      throw FormatError("container payload is " + std::to_string(bytes.size() - offset) + " bytes, header declares " +
                        std::to_string(4 * total));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed container header: ") + e.what());
  }

  for (auto& t : c.tensors) {
    t.data.resize(t.numel());
    for (auto& v : t.data) {
      v = std::bit_cast<float>(detail::read_le32(bytes.data() + offset));
      offset += 4;
    }
  }
  return c;
}

}  // namespace dmfa

#pragma once
// Small file-system helpers shared by the test executables.

#include <gtest/gtest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace fixture {

namespace fs = std::filesystem;

/// Fresh per-test scratch directory, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "dmfa_test";
    if (info) name += std::string("_") + info->test_suite_name() + "_" + info->name();
    path_ = fs::temp_directory_path() / (name + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  fs::path path_;
};

inline void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void push_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>((v >> s) & 0xFF));
}

/// IDX image file with the given raster bytes (count x rows x cols).
inline std::vector<unsigned char> idx_images(std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                                             const std::vector<unsigned char>& raster) {
  std::vector<unsigned char> out;
  push_be32(out, 0x00000803);
  push_be32(out, count);
  push_be32(out, rows);
  push_be32(out, cols);
  out.insert(out.end(), raster.begin(), raster.end());
  return out;
}

/// Binary PNM with the given header tag ("P5" or "P6") and interleaved raster.
inline void write_pnm_bytes(const fs::path& path, const std::string& tag, int w, int h,
                            const std::vector<unsigned char>& raster) {
  std::ofstream out(path, std::ios::binary);
  out << tag << "\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
}

}  // namespace fixture

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>

namespace graphtok::io {

// Every binary artifact starts with a 4-byte magic followed by a 1-byte
// format version. All multi-byte values are little-endian regardless of host.
using Magic = std::array<char, 4>;

inline constexpr Magic kCheckpointMagic{'G', 'T', 'C', 'K'};
inline constexpr Magic kCodebookMagic{'G', 'T', 'C', 'B'};
inline constexpr Magic kTokenMagic{'G', 'T', 'T', 'K'};
inline constexpr Magic kSequenceMagic{'G', 'T', 'S', 'Q'};
inline constexpr std::uint8_t kFormatVersion = 1;

class BinaryWriter {
 public:
  BinaryWriter(const std::filesystem::path& path, const Magic& magic,
               std::uint8_t version = kFormatVersion);

  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void str(std::string_view s);
  void f64s(std::span<const double> v);
  void f32s(std::span<const float> v);
  void u32s(std::span<const std::uint32_t> v);

  // Flushes and throws on any stream failure.
  void close();

 private:
  void raw(const void* data, std::size_t n);

  std::filesystem::path path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  BinaryReader(const std::filesystem::path& path, const Magic& magic,
               std::uint8_t max_version = kFormatVersion);

  std::uint8_t version() const { return version_; }

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();
  void f64s(std::span<double> out);
  void f32s(std::span<float> out);
  void u32s(std::span<std::uint32_t> out);

  // Throws unless every byte of the file was consumed.
  void expect_end();

 private:
  void raw(void* data, std::size_t n);

  std::filesystem::path path_;
  std::ifstream in_;
  std::uint8_t version_ = 0;
};

}  // namespace graphtok::io

#include "graphtok/binary_io.hpp"

#include <bit>
#include <cstring>

#include "graphtok/errors.hpp"

namespace graphtok::io {
namespace {

template <typename U>
void to_le(U v, unsigned char* out) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out[i] = static_cast<unsigned char>(v >> (8 * i));
}

template <typename U>
U from_le(const unsigned char* in) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in[i]) << (8 * i);
  return v;
}

}  // namespace

BinaryWriter::BinaryWriter(const std::filesystem::path& path, const Magic& magic,
                           std::uint8_t version)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw FormatError("cannot open " + path.string() + " for writing");
  raw(magic.data(), magic.size());
  u8(version);
}

void BinaryWriter::raw(const void* data, std::size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void BinaryWriter::u8(std::uint8_t v) { raw(&v, 1); }

void BinaryWriter::u32(std::uint32_t v) {
  unsigned char buf[4];
  to_le(v, buf);
  raw(buf, 4);
}

void BinaryWriter::u64(std::uint64_t v) {
  unsigned char buf[8];
  to_le(v, buf);
  raw(buf, 8);
}

void BinaryWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  raw(s.data(), s.size());
}

void BinaryWriter::f64s(std::span<const double> v) {
  for (double x : v) f64(x);
}
void BinaryWriter::f32s(std::span<const float> v) {
  for (float x : v) f32(x);
}
void BinaryWriter::u32s(std::span<const std::uint32_t> v) {
  for (std::uint32_t x : v) u32(x);
}

void BinaryWriter::close() {
  out_.flush();
  if (!out_) throw FormatError("write failed for " + path_.string());
  out_.close();
}

BinaryReader::BinaryReader(const std::filesystem::path& path, const Magic& magic,
                           std::uint8_t max_version)
    : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw FormatError("cannot open " + path.string());
  Magic got{};
  raw(got.data(), got.size());
  if (got != magic) {
    throw FormatError(path.string() + ": bad magic, expected '" +
                      std::string(magic.data(), magic.size()) + "'");
  }
  version_ = u8();
  if (version_ == 0 || version_ > max_version) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version_));
  }
}

void BinaryReader::raw(void* data, std::size_t n) {
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw FormatError(path_.string() + ": unexpected end of file");
  }
}

std::uint8_t BinaryReader::u8() {
  std::uint8_t v;
  raw(&v, 1);
  return v;
}

std::uint32_t BinaryReader::u32() {
  unsigned char buf[4];
  raw(buf, 4);
  return from_le<std::uint32_t>(buf);
}

std::uint64_t BinaryReader::u64() {
  unsigned char buf[8];
  raw(buf, 8);
  return from_le<std::uint64_t>(buf);
}

float BinaryReader::f32() { return std::bit_cast<float>(u32()); }
double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

std::string BinaryReader::str() {
  const std::uint32_t n = u32();
  std::string s(n, '\0');
  raw(s.data(), n);
  return s;
}

void BinaryReader::f64s(std::span<double> out) {
  for (double& x : out) x = f64();
}
void BinaryReader::f32s(std::span<float> out) {
  for (float& x : out) x = f32();
}
void BinaryReader::u32s(std::span<std::uint32_t> out) {
  for (std::uint32_t& x : out) x = u32();
}

void BinaryReader::expect_end() {
  if (in_.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path_.string() + ": trailing bytes after payload");
  }
}

}  // namespace graphtok::io

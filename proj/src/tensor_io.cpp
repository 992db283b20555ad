// SPDX-License-Identifier: Apache-2.0

#include "aquila/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "aquila/error.hpp"

namespace aquila {

namespace {
constexpr std::string_view kMagic = "AQTF";
}

void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_f32(std::string& out, float v) { append_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t load_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

std::uint64_t load_u64(const unsigned char* p) {
  return std::uint64_t(load_u32(p)) | (std::uint64_t(load_u32(p + 4)) << 32);
}

float load_f32(const unsigned char* p) { return std::bit_cast<float>(load_u32(p)); }

std::string encode_aqtf(const Tensor<float>& t) {
  std::string out;
  out.reserve(8 + 4 * t.rank() + 4 * t.size());
  out.append(kMagic);
  append_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) append_u32(out, static_cast<std::uint32_t>(e));
  for (float v : t.data()) append_f32(out, v);
  return out;
}

Tensor<float> decode_aqtf(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8 || bytes.substr(0, 4) != kMagic) throw FormatError("AQTF: bad magic");
  const std::uint32_t rank = load_u32(p + 4);
  if (rank == 0 || bytes.size() < 8 + 4ull * rank) throw FormatError("AQTF: truncated header");
  Shape shape(rank);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = load_u32(p + 8 + 4 * i);
    if (shape[i] == 0) throw FormatError("AQTF: zero extent in " + shape_str(shape));
    count *= shape[i];
  }
  const std::size_t header = 8 + 4ull * rank;
  if (bytes.size() != header + 4 * count) {
    throw FormatError("AQTF: payload of " + std::to_string(bytes.size() - header) +
                      " bytes does not match shape " + shape_str(shape));
  }
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = load_f32(p + header + 4 * i);
  return Tensor<float>(std::move(shape), std::move(data));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

void write_aqtf(const std::filesystem::path& path, const Tensor<float>& t) {
  write_file(path, encode_aqtf(t));
}

Tensor<float> read_aqtf(const std::filesystem::path& path) {
  try {
    return decode_aqtf(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace aquila

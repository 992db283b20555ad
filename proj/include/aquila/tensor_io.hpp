// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "aquila/tensor.hpp"

// AQTF tensor files: the 4 bytes "AQTF", u32 rank, rank x u32 extents, then
// the payload as little-endian f32 in row-major order. All integers are
// little-endian regardless of host byte order.
namespace aquila {

void append_u32(std::string& out, std::uint32_t v);
void append_u64(std::string& out, std::uint64_t v);
void append_f32(std::string& out, float v);
std::uint32_t load_u32(const unsigned char* p);
std::uint64_t load_u64(const unsigned char* p);
float load_f32(const unsigned char* p);

std::string encode_aqtf(const Tensor<float>& t);
Tensor<float> decode_aqtf(std::string_view bytes);

void write_aqtf(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> read_aqtf(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace aquila

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "burstmamba/tensor.hpp"

namespace burstmamba {

// ".nt" layout: "NT01", u32 LE rank, rank x u32 LE extents, then product(extents)
// little-endian float32 values. No padding.

std::vector<std::uint8_t> encode_tensor(const Tensor& t);

/// Decodes one tensor starting at `offset` and advances it past the payload.
/// Error offsets are absolute positions in `bytes`.
Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t offset);
std::uint64_t get_u64(std::span<const std::uint8_t> bytes, std::size_t offset);

}  // namespace burstmamba

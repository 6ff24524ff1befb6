#include "burstmamba/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace burstmamba {

namespace {
constexpr char kMagic[4] = {'N', 'T', '0', '1'};
constexpr std::uint32_t kMaxRank = 16;
}  // namespace

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[offset + i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::span<const std::uint8_t> bytes, std::size_t offset) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[offset + i]) << (8 * i);
  return v;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  const auto& shape = t.shape();
  out.reserve(8 + 4 * shape.size() + 4 * static_cast<std::size_t>(t.numel()));
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) put_u32(out, static_cast<std::uint32_t>(e));
  for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  const std::size_t start = offset;
  if (bytes.size() < offset + 4 || std::memcmp(bytes.data() + offset, kMagic, 4) != 0) {
    throw ParseError("bad magic: expected \"NT01\"", start);
  }
  offset += 4;
  if (bytes.size() < offset + 4) throw ParseError("header short: missing rank", offset);
  const std::uint32_t rank = get_u32(bytes, offset);
  if (rank > kMaxRank) throw ParseError("bad rank " + std::to_string(rank), offset);
  offset += 4;
  Shape shape;
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    if (bytes.size() < offset + 4) throw ParseError("header short: missing extent " + std::to_string(i), offset);
    const std::uint32_t e = get_u32(bytes, offset);
    if (e == 0) throw ParseError("bad extent 0 on axis " + std::to_string(i), offset);
    count *= e;
    if (count > (std::uint64_t{1} << 40)) throw ParseError("bad extent: tensor too large", offset);
    shape.push_back(e);
    offset += 4;
  }
  const std::uint64_t payload = count * 4;
  const std::size_t available = bytes.size() - offset;
  if (available < payload) {
    throw ParseError("payload short: expected " + std::to_string(payload) + " bytes, found " +
                         std::to_string(available),
                     offset);
  }
  std::vector<float> data(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(get_u32(bytes, offset));
    offset += 4;
  }
  return Tensor(std::move(shape), std::move(data));
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  std::size_t offset = 0;
  return decode_tensor(bytes, offset);
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  write_file_bytes(path, encode_tensor(t));
}

Tensor load_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_tensor(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + std::string(e.what()).substr(0, std::string(e.what()).rfind(" at byte offset")),
                     e.offset());
  }
}

}  // namespace burstmamba

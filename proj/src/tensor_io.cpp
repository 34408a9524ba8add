#include "icam/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>

namespace icam {
namespace {

constexpr std::size_t kMaxDims = 8;

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> bytes = {static_cast<char>(v & 0xffu), static_cast<char>((v >> 8) & 0xffu),
                                     static_cast<char>((v >> 16) & 0xffu),
                                     static_cast<char>((v >> 24) & 0xffu)};
  out.write(bytes.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw IoError("tensor record truncated in header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

std::size_t TensorRecord::element_count() const {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         [](std::size_t acc, std::uint32_t d) { return acc * d; });
}

void write_tensor_record(std::ostream& out, const TensorRecord& record) {
  if (record.dims.size() > kMaxDims) throw ContractError("tensor record: too many dims");
  if (record.element_count() != record.values.size()) {
    throw ContractError("tensor record: payload length does not match dims");
  }
  out.write(kTensorMagic, sizeof kTensorMagic);
  out.put(static_cast<char>(kDtypeFloat32));
  out.put(static_cast<char>(record.dims.size()));
  for (auto d : record.dims) put_u32(out, d);

  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(record.values.data()),
              static_cast<std::streamsize>(record.values.size() * sizeof(float)));
  } else {
    for (float v : record.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw IoError("tensor record: write failed");
}

TensorRecord read_tensor_record(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kTensorMagic, sizeof magic) != 0) {
    throw IoError("tensor record: bad magic");
  }
  const int dtype = in.get();
  const int ndim = in.get();
  if (!in) throw IoError("tensor record truncated in header");
  if (dtype != kDtypeFloat32) throw IoError("tensor record: unsupported dtype " + std::to_string(dtype));
  if (ndim < 0 || static_cast<std::size_t>(ndim) > kMaxDims) throw IoError("tensor record: bad ndim");

  TensorRecord record;
  record.dims.resize(static_cast<std::size_t>(ndim));
  for (auto& d : record.dims) d = get_u32(in);
  record.values.resize(record.element_count());

  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(record.values.data()),
            static_cast<std::streamsize>(record.values.size() * sizeof(float)));
    if (!in) throw IoError("tensor record: payload truncated");
  } else {
    for (auto& v : record.values) v = std::bit_cast<float>(get_u32(in));
  }
  return record;
}

void write_tensor_file(const std::filesystem::path& path, const TensorRecord& record) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_tensor_record(out, record);
}

TensorRecord read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  auto record = read_tensor_record(in);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw IoError("trailing bytes after tensor record: " + path.string());
  }
  return record;
}

TensorRecord to_record(const Image& image) {
  return {{static_cast<std::uint32_t>(image.height), static_cast<std::uint32_t>(image.width)}, image.data};
}

TensorRecord to_record(const Mask& mask) {
  TensorRecord r{{static_cast<std::uint32_t>(mask.height), static_cast<std::uint32_t>(mask.width)}, {}};
  r.values.assign(mask.data.begin(), mask.data.end());
  return r;
}

Image image_from_record(const TensorRecord& record) {
  std::vector<std::uint32_t> dims = record.dims;
  if (dims.size() == 3 && dims[0] == 1) dims.erase(dims.begin());
  if (dims.size() != 2) throw ContractError("expected an H x W (or 1 x H x W) tensor");
  Image image(dims[0], dims[1]);
  image.data = record.values;
  return image;
}

}  // namespace icam

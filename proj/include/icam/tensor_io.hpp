#pragma once

// Binary tensor record ("ICAMTNS1"):
//   magic      8 bytes  "ICAMTNS1"
//   dtype      u8       0 = float32
//   ndim       u8
//   dims       ndim x u32, little-endian
//   payload    prod(dims) x float32, little-endian, row-major
//
// A tensor file holds exactly one record. Checkpoints concatenate records.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "icam/grid.hpp"

namespace icam {

inline constexpr char kTensorMagic[8] = {'I', 'C', 'A', 'M', 'T', 'N', 'S', '1'};
inline constexpr std::uint8_t kDtypeFloat32 = 0;

struct TensorRecord {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  std::size_t element_count() const;
  bool operator==(const TensorRecord&) const = default;
};

void write_tensor_record(std::ostream& out, const TensorRecord& record);
TensorRecord read_tensor_record(std::istream& in);

void write_tensor_file(const std::filesystem::path& path, const TensorRecord& record);
TensorRecord read_tensor_file(const std::filesystem::path& path);

TensorRecord to_record(const Image& image);
TensorRecord to_record(const Mask& mask);
/// Accepts H x W or 1 x H x W records.
Image image_from_record(const TensorRecord& record);

}  // namespace icam

#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace clim {

/// Fixed 30-byte header of the CLIMTNSR container. All integers little-endian.
///
///   magic "CLIMTNSR" (8) | u32 version | u8 dtype | u8 has_labels |
///   u32 n | u32 H | u32 W | u32 C
///
/// followed by n*H*W*C little-endian f32 values and, if has_labels, n u32 labels.
struct TensorHeader {
  std::uint32_t version = 1;
  std::uint8_t dtype = 0;  // 0 = f32
  bool has_labels = false;
  std::uint32_t n = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;

  std::uint64_t element_count() const;  // throws IoError(dim_overflow)
};

inline constexpr char kTensorMagic[8] = {'C', 'L', 'I', 'M', 'T', 'N', 'S', 'R'};
inline constexpr std::size_t kTensorHeaderBytes = 30;

struct TensorRecord {
  TensorHeader header;
  std::vector<float> values;
  std::vector<std::uint32_t> labels;
};

void write_tensor_record(std::ostream& out, const TensorHeader& header, std::span<const float> values,
                         std::span<const std::uint32_t> labels);
/// Reads one record. Bytes after the record are left in the stream.
TensorRecord read_tensor_record(std::istream& in);

void write_u32_le(std::ostream& out, std::uint32_t v);
std::uint32_t read_u32_le(std::istream& in);

}  // namespace clim

#pragma once

// Group-wise 4-bit affine weight quantization (weights only; compute stays float).

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hprune/model.hpp"
#include "hprune/tensor.hpp"

namespace hprune {

inline constexpr std::size_t kDefaultGroupSize = 64;

struct QTensor {
  Shape shape;
  std::size_t group_size = kDefaultGroupSize;
  std::vector<std::uint8_t> packed;       // two codes per byte, even index in the low nibble
  std::vector<float> scales;              // one per group
  std::vector<std::uint8_t> zero_points;  // one per group, in [0, 15]

  std::size_t numel() const { return shape_numel(shape); }
  std::size_t num_groups() const { return (numel() + group_size - 1) / group_size; }
  std::uint8_t code(std::size_t i) const;
  // Bytes of packed codes, scales and zero points.
  std::size_t payload_bytes() const;

  bool operator==(const QTensor&) const = default;
};

std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes);
// Throws CorruptionError when `packed` is too short for `count` codes.
std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count);

// Per group the range is widened to contain zero, scale = (max - min) / 15 and
// zero_point = round(-min / scale). When re-quantizing the reconstruction would
// not reproduce it, the scale is rounded to a 20-bit mantissa instead. A
// constant nonzero group v uses scale |v|; an all-zero group uses scale 1.
// Throws ContractError for non-finite input or group_size < 2.
QTensor quantize_tensor(const Tensor& t, std::size_t group_size = kDefaultGroupSize);
// (code - zero_point) * scale. Throws CorruptionError on an out-of-range
// zero point or a malformed layout.
Tensor dequantize(const QTensor& q);

// True for parameters stored as q4 by quantize_model: every Linear weight and
// bias outside the embeddings.
bool is_quantized_param(const ParamRef& p);

struct QuantizedModel {
  Model model;                            // quantized slots hold dequantized values
  std::map<std::string, QTensor> tensors; // by parameter name
  std::size_t group_size = kDefaultGroupSize;
};

QuantizedModel quantize_model(const Model& model, std::size_t group_size = kDefaultGroupSize);

struct MemoryReport {
  std::uint64_t bytes_before = 0;       // 32-bit serialized transformer blocks
  std::uint64_t bytes_before_16 = 0;    // same blocks with 16-bit payload
  std::uint64_t bytes_after = 0;        // serialized transformer blocks as quantized
  double reduction_percent = 0.0;       // against bytes_before
  double reduction_percent_16 = 0.0;    // against bytes_before_16
};

// Compares the serialized transformer-block checkpoint of `original` (float)
// with that of `compressed`.
MemoryReport memory_report(const Model& original, const QuantizedModel& compressed);

}  // namespace hprune

#pragma once

// Binary container: "HPRN", u32 LE version, u64 LE metadata length, UTF-8 JSON
// metadata, payload. The JSON holds free-form metadata under "meta" and a
// tensor directory under "tensors" (name, dtype, shape, offset, length).
// f32 tensors are little-endian row-major; q4 tensors store packed nibbles,
// then f32 scales, then one zero-point byte per group.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hprune/data.hpp"
#include "hprune/model.hpp"
#include "hprune/quant.hpp"

namespace hprune {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  bool quantized = false;
  Tensor f32;  // when !quantized
  QTensor q4;  // when quantized
};

struct Checkpoint {
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<CheckpointEntry> tensors;

  const CheckpointEntry* find(std::string_view name) const;
  // Dequantizes when needed. Throws ContractError when absent.
  Tensor tensor(std::string_view name) const;
};

std::string dtype_name(const CheckpointEntry& e);

// Throws ContractError on duplicate names or non-finite f32 data.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
// Throws FormatError (with byte offset) on bad magic, version, truncation or
// an inconsistent directory.
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

std::uint64_t save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct CheckpointLayout {
  std::uint64_t header_bytes = 0;  // magic + version + length + JSON
  std::uint64_t payload_bytes = 0;
};
CheckpointLayout checkpoint_layout(std::span<const std::uint8_t> bytes);

nlohmann::ordered_json config_to_json(const ModelConfig& c);
// Throws ConfigError on missing or invalid fields.
ModelConfig config_from_json(const nlohmann::json& j);

// Every parameter of `model` (only the transformer blocks when blocks_only),
// stored as q4 where `quantized` has an entry of the same name.
Checkpoint model_checkpoint(const Model& model, const std::map<std::string, QTensor>* quantized = nullptr,
                            bool blocks_only = false);
// Rebuilds a full model; q4 tensors are dequantized. Throws FormatError when
// the checkpoint does not describe a consistent model.
Model model_from_checkpoint(const Checkpoint& ckpt);
QuantizedModel quantized_from_checkpoint(const Checkpoint& ckpt);

Checkpoint probe_checkpoint(const Probe& probe);
Probe probe_from_checkpoint(const Checkpoint& ckpt);

}  // namespace hprune

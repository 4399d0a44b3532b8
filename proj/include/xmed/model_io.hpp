#pragma once

// Model file layout (all integers little-endian, no padding):
//   "XMED" | u32 format version | u64 JSON length N | N bytes UTF-8 JSON |
//   every parameter tensor as f32 little-endian, in the order the JSON lists.
// The JSON describes layers, hyperparameters, metadata and tensor shapes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xmed/model.hpp"

namespace xmed {

inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr std::size_t kModelHeaderSize = 16;

/// The JSON section written for `model`.
std::string describe_model(const Model& model);

std::vector<std::byte> serialize_model(const Model& model);

/// Throws FormatError (with byte offset) on bad magic, unsupported version,
/// truncation, trailing bytes, or a description that does not match the
/// tensor data. No partially built model escapes.
Model deserialize_model(std::span<const std::byte> bytes);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace xmed

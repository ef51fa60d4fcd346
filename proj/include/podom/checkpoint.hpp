#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "podom/autodiff.hpp"

namespace podom {

inline constexpr char kTensorFileMagic[4] = {'P', 'D', 'T', 'F'};
inline constexpr std::uint32_t kTensorFileVersion = 1;

/// Named tensors plus a free-form JSON header (architecture config, label
/// statistics). Layout, little-endian:
///   "PDTF" | u32 version | u32 header bytes | header |
///   u32 tensor count | per tensor: u32 name bytes | name | u8 trainable |
///   u32 rank | rank x u32 dims | f64 payload
struct TensorFile {
  std::string header;
  std::vector<std::pair<std::string, ad::Tensor>> tensors;
  std::vector<bool> trainable;

  const ad::Tensor& get(const std::string& name) const;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

/// Every parameter of the store, in insertion order.
TensorFile to_tensor_file(const ad::ParameterStore& store, std::string header);
/// Copies values into an existing store; names and shapes must match.
void load_into(ad::ParameterStore& store, const TensorFile& file);

}  // namespace podom

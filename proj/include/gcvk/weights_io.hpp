#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gcvk/model.hpp"

// Binary weights file, little-endian:
//   "GCVK" | u32 version (1) | u32 count
//   count x { u16 name_len | name | u8 dtype (0 f32, 1 f64) | u8 rank |
//             rank x u32 extent | row-major payload }
namespace gcvk {

inline constexpr std::uint32_t kWeightsVersion = 1;

using NamedTensor = std::pair<std::string, Tensor>;

std::string encode_tensors(const std::vector<NamedTensor>& tensors);
// Throws ErrorKind::format on bad magic/version, truncation, trailing bytes
// or duplicate names.
std::vector<NamedTensor> decode_tensors(const std::string& bytes);

std::string encode_weights(Model& model);
// All-or-nothing: the model is untouched unless every tensor matches by name,
// dtype and shape and no tensor is missing or extra.
void decode_weights(Model& model, const std::string& bytes);

void save_weights(Model& model, const std::string& path);
void load_weights(Model& model, const std::string& path);

}  // namespace gcvk

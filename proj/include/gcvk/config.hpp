#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gcvk/blocks.hpp"

namespace gcvk {

enum class MixerKind { gcvit, mamba_hybrid };

const char* to_string(MixerKind k) noexcept;
MixerKind parse_mixer(const std::string& name);

struct ModelConfig {
  std::string variant = "custom";
  std::int64_t base_dim = 64;
  std::array<int, 4> depths{2, 2, 2, 2};
  std::array<int, 4> heads{2, 4, 8, 16};
  std::array<int, 4> windows{7, 7, 14, 7};
  // Windows are quoted for this input size; other sizes scale them
  // proportionally. 0 means the windows are absolute.
  std::int64_t window_ref_size = 224;
  double mlp_ratio = 3.0;
  std::int64_t img_size = 224;
  std::int64_t num_classes = 1000;
  int se_ratio = 4;
  DownsamplerKind downsampler = DownsamplerKind::conv;
  MixerKind mixer = MixerKind::gcvit;

  std::int64_t stage_dim(int stage) const { return base_dim << stage; }
  // Square feature extent entering attention at stage 0..3 (img / 4, / 8, ...).
  std::int64_t stage_resolution(int stage) const { return img_size >> (stage + 2); }
  // Window after scaling to img_size and clamping to the stage extent.
  std::int64_t stage_window(int stage) const;
  std::int64_t mlp_hidden(int stage) const;

  // Throws ErrorKind::config naming the failing field.
  void validate() const;
};

std::vector<std::string> variant_names();
// Throws ErrorKind::usage listing the known variants.
ModelConfig variant_config(const std::string& name);

// Flat JSON document; unknown keys are rejected. "variant", when present,
// supplies defaults for every other key.
ModelConfig config_from_json(const std::string& text);
ModelConfig config_from_file(const std::string& path);
std::string config_to_json(const ModelConfig& cfg);

}  // namespace gcvk

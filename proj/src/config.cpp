#include "gcvk/config.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

namespace gcvk {

using nlohmann::json;

const char* to_string(MixerKind k) noexcept {
  return k == MixerKind::gcvit ? "gcvit" : "mamba_hybrid";
}

MixerKind parse_mixer(const std::string& name) {
  if (name == "gcvit") return MixerKind::gcvit;
  if (name == "mamba_hybrid") return MixerKind::mamba_hybrid;
  fail(ErrorKind::config, "mixer must be \"gcvit\" or \"mamba_hybrid\", got \"" + name + "\"");
}

std::int64_t ModelConfig::stage_window(int stage) const {
  std::int64_t w = windows.at(static_cast<std::size_t>(stage));
  if (window_ref_size > 0 && img_size != window_ref_size) {
    require(w * img_size % window_ref_size == 0, ErrorKind::config,
            "windows[" + std::to_string(stage) + "]: window " + std::to_string(w) + " quoted at " +
                std::to_string(window_ref_size) + " does not scale to img_size " + std::to_string(img_size));
    w = w * img_size / window_ref_size;
  }
  return std::min(w, stage_resolution(stage));
}

std::int64_t ModelConfig::mlp_hidden(int stage) const {
  return static_cast<std::int64_t>(std::llround(mlp_ratio * static_cast<double>(stage_dim(stage))));
}

void ModelConfig::validate() const {
  auto field = [](const char* name, int i) { return std::string(name) + "[" + std::to_string(i) + "]"; };
  require(base_dim >= 1, ErrorKind::config, "base_dim must be >= 1");
  require(img_size >= 32 && img_size % 32 == 0, ErrorKind::config,
          "img_size must be a positive multiple of 32, got " + std::to_string(img_size));
  require(num_classes >= 1, ErrorKind::config, "num_classes must be >= 1");
  require(mlp_ratio > 0.0 && std::isfinite(mlp_ratio), ErrorKind::config, "mlp_ratio must be positive");
  require(se_ratio >= 1 && base_dim % se_ratio == 0, ErrorKind::config,
          "se_ratio " + std::to_string(se_ratio) + " must divide base_dim " + std::to_string(base_dim));
  if (mixer == MixerKind::mamba_hybrid) {
    require(base_dim % 2 == 0, ErrorKind::config, "base_dim must be even for the mamba_hybrid mixer");
  }
  for (int i = 0; i < 4; ++i) {
    require(depths[i] >= 2, ErrorKind::config,
            field("depths", i) + " = " + std::to_string(depths[i]) + " must be >= 2");
    require(heads[i] >= 1 && stage_dim(i) % heads[i] == 0, ErrorKind::config,
            field("heads", i) + " = " + std::to_string(heads[i]) + " does not divide stage dim " +
                std::to_string(stage_dim(i)));
    require(mlp_hidden(i) >= 1, ErrorKind::config, "mlp_ratio gives an empty hidden layer");
    if (mixer != MixerKind::gcvit) continue;
    require(windows[i] >= 1, ErrorKind::config, field("windows", i) + " must be >= 1");
    const std::int64_t res = stage_resolution(i);
    const std::int64_t w = stage_window(i);
    require(res % w == 0, ErrorKind::config,
            "stage " + std::to_string(i + 1) + ": resolution " + std::to_string(res) + " is not divisible by window " +
                std::to_string(w));
    try {
      gtg_repetitions(res, w);
    } catch (const Error& e) {
      fail(ErrorKind::config, "stage " + std::to_string(i + 1) + ": " + e.what());
    }
  }
}

namespace {

ModelConfig preset(const char* name, std::int64_t dim, std::array<int, 4> depths, std::array<int, 4> heads,
                   double mlp_ratio) {
  ModelConfig c;
  c.variant = name;
  c.base_dim = dim;
  c.depths = depths;
  c.heads = heads;
  c.mlp_ratio = mlp_ratio;
  return c;
}

ModelConfig toy(const char* name, MixerKind mixer) {
  ModelConfig c = preset(name, 8, {2, 2, 2, 2}, {1, 2, 4, 8}, 3.0);
  c.windows = {4, 4, 4, 4};
  c.window_ref_size = 0;
  c.img_size = 32;
  c.num_classes = 2;
  c.mixer = mixer;
  return c;
}

}  // namespace

std::vector<std::string> variant_names() { return {"xxt", "xt", "tiny", "small", "base", "toy", "toy-hybrid"}; }

ModelConfig variant_config(const std::string& name) {
  if (name == "xxt") return preset("xxt", 64, {2, 2, 6, 2}, {2, 4, 8, 16}, 3.0);
  if (name == "xt") return preset("xt", 64, {3, 4, 6, 5}, {2, 4, 8, 16}, 3.0);
  if (name == "tiny") return preset("tiny", 64, {3, 4, 19, 5}, {2, 4, 8, 16}, 3.0);
  if (name == "small") return preset("small", 96, {3, 4, 19, 5}, {3, 6, 12, 24}, 2.0);
  if (name == "base") return preset("base", 128, {3, 4, 19, 5}, {4, 8, 16, 32}, 2.0);
  if (name == "toy") return toy("toy", MixerKind::gcvit);
  if (name == "toy-hybrid") return toy("toy-hybrid", MixerKind::mamba_hybrid);
  std::string known;
  for (const auto& v : variant_names()) known += (known.empty() ? "" : ", ") + v;
  fail(ErrorKind::usage, "unknown variant \"" + name + "\" (known: " + known + ")");
}

namespace {

template <typename T>
T get_field(const json& doc, const char* key) {
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::config, std::string("config key \"") + key + "\" has the wrong type");
  }
}

std::array<int, 4> get_stages(const json& doc, const char* key) {
  const json& v = doc.at(key);
  require(v.is_array() && v.size() == 4, ErrorKind::config,
          std::string("config key \"") + key + "\" must be an array of 4 integers");
  std::array<int, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    require(v[i].is_number_integer(), ErrorKind::config,
            std::string("config key \"") + key + "\" must be an array of 4 integers");
    out[i] = v[i].get<int>();
  }
  return out;
}

}  // namespace

ModelConfig config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::config, std::string("config is not valid JSON: ") + e.what());
  }
  require(doc.is_object(), ErrorKind::config, "config must be a JSON object");
  static const std::set<std::string> known{"variant",   "base_dim",    "depths",   "heads",
                                           "windows",   "mlp_ratio",   "img_size", "num_classes",
                                           "se_ratio",  "downsampler", "mixer"};
  for (const auto& item : doc.items()) {
    require(known.count(item.key()) != 0, ErrorKind::config, "unknown config key \"" + item.key() + "\"");
  }

  ModelConfig cfg;
  if (doc.contains("variant")) {
    cfg = variant_config(get_field<std::string>(doc, "variant"));
  } else {
    for (const char* key : {"base_dim", "depths", "heads"}) {
      require(doc.contains(key), ErrorKind::config,
              std::string("config without \"variant\" must set \"") + key + "\"");
    }
  }
  if (doc.contains("base_dim")) cfg.base_dim = get_field<std::int64_t>(doc, "base_dim");
  if (doc.contains("depths")) cfg.depths = get_stages(doc, "depths");
  if (doc.contains("heads")) cfg.heads = get_stages(doc, "heads");
  if (doc.contains("windows")) {
    cfg.windows = get_stages(doc, "windows");
    cfg.window_ref_size = 0;
  }
  if (doc.contains("mlp_ratio")) cfg.mlp_ratio = get_field<double>(doc, "mlp_ratio");
  if (doc.contains("img_size")) cfg.img_size = get_field<std::int64_t>(doc, "img_size");
  if (doc.contains("num_classes")) cfg.num_classes = get_field<std::int64_t>(doc, "num_classes");
  if (doc.contains("se_ratio")) cfg.se_ratio = get_field<int>(doc, "se_ratio");
  if (doc.contains("downsampler")) cfg.downsampler = parse_downsampler(get_field<std::string>(doc, "downsampler"));
  if (doc.contains("mixer")) cfg.mixer = parse_mixer(get_field<std::string>(doc, "mixer"));
  cfg.validate();
  return cfg;
}

ModelConfig config_from_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::config, "cannot open config file " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return config_from_json(text.str());
}

std::string config_to_json(const ModelConfig& cfg) {
  std::array<std::int64_t, 4> windows{};
  for (int i = 0; i < 4; ++i) windows[i] = cfg.stage_window(i);
  json doc{{"variant", cfg.variant},
           {"base_dim", cfg.base_dim},
           {"depths", cfg.depths},
           {"heads", cfg.heads},
           {"windows", windows},
           {"mlp_ratio", cfg.mlp_ratio},
           {"img_size", cfg.img_size},
           {"num_classes", cfg.num_classes},
           {"se_ratio", cfg.se_ratio},
           {"downsampler", to_string(cfg.downsampler)},
           {"mixer", to_string(cfg.mixer)}};
  if (cfg.variant == "custom") doc.erase("variant");
  return doc.dump(2);
}

}  // namespace gcvk

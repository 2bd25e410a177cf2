#include "gcvk/model.hpp"

#include <cstdio>
#include <json.hpp>
#include <sstream>

namespace gcvk {

void GcVitBlockParams::visit(const std::string& prefix, const ParamFn& fn) {
  norm1.visit(join_name(prefix, "norm1"), fn);
  attn.visit(join_name(prefix, "attn"), fn);
  norm2.visit(join_name(prefix, "norm2"), fn);
  mlp.visit(join_name(prefix, "mlp"), fn);
}

Tensor gcvit_block(const Tensor& tokens, const Tensor& q_global, const GcVitBlockParams& p) {
  Tensor mixed;
  {
    CostCategoryScope cat(CostCategory::attention);
    const Tensor normed = p.norm1(tokens);
    mixed = p.is_global() ? global_attention(normed, q_global, p.attn) : local_attention(normed, p.attn);
  }
  const Tensor h = ops::add(tokens, mixed);
  CostCategoryScope cat(CostCategory::mlp);
  return ops::add(h, p.mlp(p.norm2(h)));
}

void GcVitStageParams::visit(const std::string& prefix, const ParamFn& fn) {
  down.visit(join_name(prefix, "down"), fn);
  gtg.visit(join_name(prefix, "gtg"), fn);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].visit(join_name(prefix, "blocks." + std::to_string(i)), fn);
  }
}

Tensor gcvit_stage(const Tensor& x, const GcVitStageParams& p) {
  Tensor h, q_global;
  CostCategoryScope conv(CostCategory::conv);
  h = downsample(x, p.down);
  const std::int64_t batch = h.dim(0), height = h.dim(2), width = h.dim(3);
  require(height % p.window == 0 && width % p.window == 0, ErrorKind::config,
          "resolution " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible by window " +
              std::to_string(p.window));
  q_global = global_token_gen(h, p.gtg);  // computed once, shared by every global block
  const WindowLayout layout{height, width, p.window, p.window};
  Tensor tokens = window_partition(h, layout);
  for (const auto& block : p.blocks) tokens = gcvit_block(tokens, q_global, block);
  return window_reverse(tokens, layout, batch);
}

void ConvUnitParams::visit(const std::string& prefix, const ParamFn& fn) {
  conv.visit(join_name(prefix, "conv"), fn);
  norm.visit(join_name(prefix, "norm"), fn);
}

void ResidualConvBlockParams::visit(const std::string& prefix, const ParamFn& fn) {
  first.visit(join_name(prefix, "first"), fn);
  second.visit(join_name(prefix, "second"), fn);
}

Tensor residual_conv_block(const Tensor& x, const ResidualConvBlockParams& p) {
  const Tensor h = ops::gelu(p.first.norm(p.first.conv(x)));
  return ops::add(p.second.norm(p.second.conv(h)), x);
}

void HybridStageParams::visit(const std::string& prefix, const ParamFn& fn) {
  if (has_down) down.visit(join_name(prefix, "down"), fn);
  for (std::size_t i = 0; i < convs.size(); ++i) convs[i].visit(join_name(prefix, "convs." + std::to_string(i)), fn);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].visit(join_name(prefix, "layers." + std::to_string(i)), fn);
  }
}

namespace {

Tensor hybrid_stage(const Tensor& x, const HybridStageParams& p) {
  Tensor h = x;
  CostCategoryScope conv(CostCategory::conv);
  if (p.has_down) h = p.down.norm(p.down.conv(h));
  for (const auto& block : p.convs) h = residual_conv_block(h, block);
  if (p.layers.empty()) return h;
  const std::int64_t b = h.dim(0), c = h.dim(1), height = h.dim(2), width = h.dim(3);
  Tensor tokens = ops::reshape(ops::permute(h, {0, 2, 3, 1}), {b, height * width, c});
  for (const auto& layer : p.layers) tokens = mamba::hybrid_layer(tokens, layer);
  return ops::permute(ops::reshape(tokens, {b, height, width, c}), {0, 3, 1, 2});
}

Tensor with_stage(int stage, const std::function<Tensor()>& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.kind(), "stage " + std::to_string(stage + 1) + ": " + e.what());
  }
}

}  // namespace

std::vector<Tensor> Model::features(const Tensor& images) const {
  require(images.rank() == 4 && images.dim(1) == 3, ErrorKind::shape,
          "model input must be [B, 3, S, S], got " + shape_str(images.shape()));
  require(images.dtype() == dtype, ErrorKind::usage,
          "model is " + std::string(to_string(dtype)) + " but input is " + to_string(images.dtype()));
  require(images.dim(2) == config.img_size && images.dim(3) == config.img_size, ErrorKind::config,
          "model was built for " + std::to_string(config.img_size) + "x" + std::to_string(config.img_size) +
              " inputs, got " + shape_str(images.shape()));
  std::vector<Tensor> out;
  {
    CostCategoryScope conv(CostCategory::conv);
    if (config.mixer == MixerKind::gcvit) {
      out.push_back(patch_stem(images, stem));
    } else {
      Tensor h = images;
      for (const auto& unit : hybrid_stem) h = ops::relu(unit.norm(unit.conv(h)));
      out.push_back(h);
    }
  }
  for (int i = 0; i < 4; ++i) {
    out.push_back(with_stage(i, [&] {
      return config.mixer == MixerKind::gcvit ? gcvit_stage(out.back(), stages[i])
                                              : hybrid_stage(out.back(), hybrid_stages[i]);
    }));
  }
  return out;
}

Tensor Model::forward(const Tensor& images) const {
  const Tensor last = features(images).back();
  CostCategoryScope cat(CostCategory::head);
  return head(ops::global_avg_pool(head_norm.channels(last)));
}

void Model::visit(const std::string& prefix, const ParamFn& fn) {
  if (config.mixer == MixerKind::gcvit) {
    stem.visit(join_name(prefix, "stem"), fn);
    for (int i = 0; i < 4; ++i) stages[i].visit(join_name(prefix, "stages." + std::to_string(i)), fn);
  } else {
    for (int i = 0; i < 2; ++i) hybrid_stem[i].visit(join_name(prefix, "stem." + std::to_string(i)), fn);
    for (int i = 0; i < 4; ++i) hybrid_stages[i].visit(join_name(prefix, "stages." + std::to_string(i)), fn);
  }
  head_norm.visit(join_name(prefix, "head_norm"), fn);
  head.visit(join_name(prefix, "head"), fn);
}

std::int64_t Model::param_count() const { return gcvk::param_count(const_cast<Model&>(*this)); }

namespace {

ConvUnitParams conv_unit(std::int64_t cin, std::int64_t cout, int stride, DType dtype, Rng& rng) {
  ops::Conv2dOptions opt;
  opt.stride_h = opt.stride_w = stride;
  opt.pad_h = opt.pad_w = 1;
  return ConvUnitParams{Conv2dParams::init(cin, cout, 3, opt, dtype, rng, false),
                        ChannelAffineParams::init(cout, dtype)};
}

void build_gcvit(Model& m, Rng& rng) {
  const ModelConfig& cfg = m.config;
  m.stem = PatchStemParams::init(3, cfg.base_dim, cfg.se_ratio, m.dtype, rng);
  for (int i = 0; i < 4; ++i) {
    GcVitStageParams& s = m.stages[i];
    const std::int64_t dim = cfg.stage_dim(i);
    const std::int64_t cin = i == 0 ? dim : cfg.stage_dim(i - 1);
    const std::int64_t res = cfg.stage_resolution(i);
    s.window = cfg.stage_window(i);
    s.down = DownsampleParams::init(cin, dim, cfg.se_ratio, cfg.downsampler, m.dtype, rng);
    s.gtg = GtgParams::init(dim, res, res, s.window, s.window, cfg.se_ratio, m.dtype, rng);
    for (int j = 0; j < cfg.depths[i]; ++j) {
      GcVitBlockParams b;
      b.norm1 = LayerNormParams::init(dim, m.dtype);
      b.attn = AttentionParams::init(j % 2 == 0 ? AttentionKind::local : AttentionKind::global, dim, cfg.heads[i],
                                     s.window, s.window, m.dtype, rng);
      b.norm2 = LayerNormParams::init(dim, m.dtype);
      b.mlp = MlpParams::init(dim, cfg.mlp_hidden(i), m.dtype, rng);
      s.blocks.push_back(std::move(b));
    }
  }
}

void build_hybrid(Model& m, Rng& rng) {
  const ModelConfig& cfg = m.config;
  m.hybrid_stem[0] = conv_unit(3, cfg.base_dim, 2, m.dtype, rng);
  m.hybrid_stem[1] = conv_unit(cfg.base_dim, cfg.base_dim, 2, m.dtype, rng);
  for (int i = 0; i < 4; ++i) {
    HybridStageParams& s = m.hybrid_stages[i];
    const std::int64_t dim = cfg.stage_dim(i);
    if (i > 0) {
      s.has_down = true;
      s.down = conv_unit(cfg.stage_dim(i - 1), dim, 2, m.dtype, rng);
    }
    if (i < 2) {
      for (int j = 0; j < cfg.depths[i]; ++j) {
        s.convs.push_back({conv_unit(dim, dim, 1, m.dtype, rng), conv_unit(dim, dim, 1, m.dtype, rng)});
      }
    } else {
      for (char kind : mamba::hybrid_pattern(cfg.depths[i])) {
        s.layers.push_back(mamba::HybridLayerParams::init(
            kind == 'M' ? mamba::LayerKind::mamba : mamba::LayerKind::attention, dim, cfg.heads[i], cfg.mlp_ratio,
            16, m.dtype, rng));
      }
    }
  }
}

}  // namespace

namespace {

Model build_with(const ModelConfig& config, DType dtype, Rng& rng) {
  config.validate();
  Model m;
  m.config = config;
  m.dtype = dtype;
  if (config.mixer == MixerKind::gcvit) {
    build_gcvit(m, rng);
  } else {
    build_hybrid(m, rng);
  }
  m.head_norm = LayerNormParams::init(config.stage_dim(3), dtype);
  m.head = LinearParams::init(config.stage_dim(3), config.num_classes, dtype, rng);
  return m;
}

}  // namespace

Model build_model(const ModelConfig& config, std::uint64_t seed, DType dtype) {
  Rng rng(seed);
  return build_with(config, dtype, rng);
}

Model build_model_shapes(const ModelConfig& config, DType dtype) {
  Rng rng = Rng::shape_only();
  return build_with(config, dtype, rng);
}

// ---- analytic cost model (MACs for batch 1, scaled at the end) ----

std::uint64_t attention_closed_form(std::int64_t height, std::int64_t width, std::int64_t dim,
                                    std::int64_t window_h, std::int64_t window_w) {
  return static_cast<std::uint64_t>(2 * height * width * (2 * dim * dim + window_h * window_w * dim));
}

namespace {

using u64 = std::uint64_t;

u64 conv_macs(std::int64_t cin, std::int64_t cout, std::int64_t kernel, std::int64_t groups, std::int64_t out_hw) {
  return static_cast<u64>(cout * out_hw * out_hw * (cin / groups) * kernel * kernel);
}

u64 mbconv_macs(std::int64_t c, std::int64_t hw, int se_ratio) {
  return conv_macs(c, c, 3, c, hw) + static_cast<u64>(2 * c * (c / se_ratio)) + conv_macs(c, c, 1, 1, hw);
}

u64 attention_macs(std::int64_t tokens, std::int64_t window_tokens, std::int64_t dim, int projections) {
  const auto t = static_cast<u64>(tokens), n = static_cast<u64>(window_tokens), c = static_cast<u64>(dim);
  return t * c * c * static_cast<u64>(projections) + 2 * t * n * c + t * c * c;
}

u64 mlp_macs(std::int64_t tokens, std::int64_t dim, std::int64_t hidden) {
  return static_cast<u64>(2 * tokens * dim * hidden);
}

u64 mixer_macs(std::int64_t tokens, const mamba::MixerParams& p) {
  const auto t = static_cast<u64>(tokens), c = static_cast<u64>(p.dim), d = static_cast<u64>(p.branch());
  const auto r = static_cast<u64>(p.dt_rank), m = static_cast<u64>(p.state);
  return 2 * t * c * c          // in_proj, out_proj
         + 2 * d * t * 3        // two depthwise kernel-3 convs
         + t * d * (r + 2 * m)  // x_proj
         + t * r * d            // dt_proj
         + d * t * (3 * m + 1); // scan recurrence and skip
}

void add(FlopTally& into, const FlopTally& part) {
  for (std::size_t i = 0; i < into.macs.size(); ++i) into.macs[i] += part.macs[i];
}

void scale(FlopTally& t, std::int64_t batch) {
  for (auto& v : t.macs) v *= static_cast<u64>(batch);
}

StageCost gcvit_stage_cost(const Model& m, int i) {
  const ModelConfig& cfg = m.config;
  const GcVitStageParams& s = m.stages[i];
  StageCost sc;
  sc.stage = i + 1;
  sc.dim = cfg.stage_dim(i);
  sc.resolution = cfg.stage_resolution(i);
  sc.window = s.window;
  sc.gtg_repetitions = static_cast<int>(s.gtg.layers.size());
  sc.params = param_count(const_cast<GcVitStageParams&>(s));
  const std::int64_t c = sc.dim, res = sc.resolution, cin = i == 0 ? c : cfg.stage_dim(i - 1);
  FlopTally& f = sc.flops;
  f[CostCategory::conv] += mbconv_macs(cin, 2 * res, cfg.se_ratio);
  f[CostCategory::conv] += s.down.kind == DownsamplerKind::conv ? conv_macs(cin, c, 3, 1, res)
                                                                : conv_macs(cin, c, 1, 1, res);
  std::int64_t hw = res;
  for (int r = 0; r < sc.gtg_repetitions; ++r, hw /= 2) f[CostCategory::conv] += mbconv_macs(c, hw, cfg.se_ratio);
  const std::int64_t tokens = res * res, window_tokens = s.window * s.window;
  for (const auto& b : s.blocks) {
    (b.is_global() ? sc.global_blocks : sc.local_blocks) += 1;
    sc.pattern += b.is_global() ? 'G' : 'L';
    f[CostCategory::attention] += attention_macs(tokens, window_tokens, c, b.is_global() ? 2 : 3);
    f[CostCategory::mlp] += mlp_macs(tokens, c, b.mlp.fc1.out_features());
    sc.attention_closed_form += attention_closed_form(res, res, c, s.window, s.window);
  }
  return sc;
}

StageCost hybrid_stage_cost(const Model& m, int i) {
  const ModelConfig& cfg = m.config;
  const HybridStageParams& s = m.hybrid_stages[i];
  StageCost sc;
  sc.stage = i + 1;
  sc.dim = cfg.stage_dim(i);
  sc.resolution = cfg.stage_resolution(i);
  sc.params = param_count(const_cast<HybridStageParams&>(s));
  const std::int64_t c = sc.dim, res = sc.resolution, tokens = res * res;
  FlopTally& f = sc.flops;
  if (s.has_down) f[CostCategory::conv] += conv_macs(cfg.stage_dim(i - 1), c, 3, 1, res);
  for (std::size_t j = 0; j < s.convs.size(); ++j) {
    sc.pattern += 'C';
    f[CostCategory::conv] += 2 * conv_macs(c, c, 3, 1, res);
  }
  for (const auto& layer : s.layers) {
    if (layer.kind == mamba::LayerKind::mamba) {
      sc.pattern += 'M';
      f[CostCategory::mixer] += mixer_macs(tokens, layer.mixer);
    } else {
      sc.pattern += 'S';
      f[CostCategory::attention] += attention_macs(tokens, tokens, c, 3);
    }
    f[CostCategory::mlp] += mlp_macs(tokens, c, layer.mlp.fc1.out_features());
  }
  return sc;
}

}  // namespace

CostReport cost_report(const Model& model, std::int64_t batch) {
  require(batch >= 1, ErrorKind::usage, "batch must be >= 1");
  const ModelConfig& cfg = model.config;
  Model& m = const_cast<Model&>(model);
  CostReport r;
  r.variant = cfg.variant;
  r.img_size = cfg.img_size;
  r.batch = batch;
  const std::int64_t c = cfg.base_dim, half = cfg.img_size / 2, quarter = cfg.img_size / 4;
  if (cfg.mixer == MixerKind::gcvit) {
    r.stem_params = param_count(m.stem);
    r.stem_flops[CostCategory::conv] = conv_macs(3, c, 3, 1, half) + mbconv_macs(c, half, cfg.se_ratio);
  } else {
    r.stem_params = param_count(m.hybrid_stem[0]) + param_count(m.hybrid_stem[1]);
    r.stem_flops[CostCategory::conv] = conv_macs(3, c, 3, 1, half) + conv_macs(c, c, 3, 1, quarter);
  }
  r.head_params = param_count(m.head_norm) + param_count(m.head);
  r.head_flops[CostCategory::head] = static_cast<u64>(cfg.stage_dim(3) * cfg.num_classes);
  for (int i = 0; i < 4; ++i) {
    r.stages.push_back(cfg.mixer == MixerKind::gcvit ? gcvit_stage_cost(model, i) : hybrid_stage_cost(model, i));
  }
  scale(r.stem_flops, batch);
  scale(r.head_flops, batch);
  r.total_params = r.stem_params + r.head_params;
  add(r.total_flops, r.stem_flops);
  add(r.total_flops, r.head_flops);
  for (auto& s : r.stages) {
    scale(s.flops, batch);
    s.attention_closed_form *= static_cast<u64>(batch);
    r.total_params += s.params;
    add(r.total_flops, s.flops);
  }
  return r;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

std::string format_report(const CostReport& r) {
  std::ostringstream os;
  os << "variant " << r.variant << "  input " << r.img_size << "x" << r.img_size << "  batch " << r.batch
     << "  (1 FLOP = 1 multiply-accumulate)\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-6s %5s %5s %4s %-22s %4s %11s %14s %14s %14s %14s\n", "stage", "dim", "res",
                "win", "blocks", "gtg", "params", "attn", "attn_closed", "mlp", "conv+mixer");
  os << line;
  for (const auto& s : r.stages) {
    std::string blocks = s.pattern;
    if (s.local_blocks + s.global_blocks > 0) {
      blocks = std::to_string(s.local_blocks + s.global_blocks) + " (" + std::to_string(s.local_blocks) + "L/" +
               std::to_string(s.global_blocks) + "G)";
    }
    std::snprintf(line, sizeof line, "%-6d %5lld %5lld %4lld %-22s %4d %11lld %14llu %14llu %14llu %14llu\n",
                  s.stage, static_cast<long long>(s.dim), static_cast<long long>(s.resolution),
                  static_cast<long long>(s.window), blocks.c_str(), s.gtg_repetitions,
                  static_cast<long long>(s.params),
                  static_cast<unsigned long long>(s.flops[CostCategory::attention]),
                  static_cast<unsigned long long>(s.attention_closed_form),
                  static_cast<unsigned long long>(s.flops[CostCategory::mlp]),
                  static_cast<unsigned long long>(s.flops[CostCategory::conv] + s.flops[CostCategory::mixer]));
    os << line;
  }
  os << "stem params " << r.stem_params << ", head params " << r.head_params << "\n";
  os << "total params " << r.total_params << " (" << fmt("%.2f", r.total_params / 1e6) << "M)\n";
  os << "total FLOPs " << r.total_flops.total() << " (" << fmt("%.3f", r.total_flops.total() / 1e9) << "G):";
  for (int c = 0; c < static_cast<int>(CostCategory::count); ++c) {
    os << " " << to_string(static_cast<CostCategory>(c)) << " " << r.total_flops.macs[c];
  }
  os << "\n";
  return os.str();
}

namespace {

nlohmann::json tally_json(const FlopTally& t) {
  nlohmann::json j;
  for (int c = 0; c < static_cast<int>(CostCategory::count); ++c) {
    j[to_string(static_cast<CostCategory>(c))] = t.macs[c];
  }
  j["total"] = t.total();
  return j;
}

}  // namespace

std::string report_to_json(const CostReport& r) {
  nlohmann::json doc{{"variant", r.variant},
                     {"img_size", r.img_size},
                     {"batch", r.batch},
                     {"flop_unit", "multiply-accumulate"},
                     {"stem", {{"params", r.stem_params}, {"flops", tally_json(r.stem_flops)}}},
                     {"head", {{"params", r.head_params}, {"flops", tally_json(r.head_flops)}}},
                     {"total_params", r.total_params},
                     {"total_flops", tally_json(r.total_flops)}};
  doc["stages"] = nlohmann::json::array();
  for (const auto& s : r.stages) {
    doc["stages"].push_back({{"stage", s.stage},
                             {"dim", s.dim},
                             {"resolution", s.resolution},
                             {"window", s.window},
                             {"blocks", s.pattern.size()},
                             {"local_blocks", s.local_blocks},
                             {"global_blocks", s.global_blocks},
                             {"pattern", s.pattern},
                             {"gtg_repetitions", s.gtg_repetitions},
                             {"params", s.params},
                             {"attention_closed_form", s.attention_closed_form},
                             {"flops", tally_json(s.flops)}});
  }
  return doc.dump(2);
}

}  // namespace gcvk

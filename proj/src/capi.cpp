#include "gcvk/gcvk.h"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <json.hpp>
#include <sstream>

#include "gcvk/commands.hpp"
#include "gcvk/weights_io.hpp"

struct gcvk_config {
  gcvk::ModelConfig cfg;
};

struct gcvk_model {
  gcvk::Model model;
};

namespace {

thread_local std::string g_last_error;

gcvk_status status_of(gcvk::ErrorKind k) {
  using gcvk::ErrorKind;
  switch (k) {
    case ErrorKind::usage: return GCVK_ERR_USAGE;
    case ErrorKind::config: return GCVK_ERR_CONFIG;
    case ErrorKind::shape: return GCVK_ERR_SHAPE;
    case ErrorKind::layout: return GCVK_ERR_LAYOUT;
    case ErrorKind::numeric: return GCVK_ERR_NUMERIC;
    case ErrorKind::domain: return GCVK_ERR_DOMAIN;
    case ErrorKind::format: return GCVK_ERR_FORMAT;
    case ErrorKind::unsupported: return GCVK_ERR_UNSUPPORTED;
  }
  return GCVK_ERR_INTERNAL;
}

template <typename F>
gcvk_status guarded(F&& f) {
  try {
    g_last_error.clear();
    f();
    return GCVK_OK;
  } catch (const gcvk::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return GCVK_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return GCVK_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  gcvk::require(p != nullptr, gcvk::ErrorKind::usage, std::string(what) + " must not be NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

gcvk_status make_config(gcvk_config** out, const std::function<gcvk::ModelConfig()>& f) {
  return guarded([&] {
    need(out, "out");
    *out = nullptr;
    auto cfg = f();
    cfg.validate();
    *out = new gcvk_config{std::move(cfg)};
  });
}

template <typename T>
gcvk_status forward(const gcvk_model* model, const T* images, std::int64_t batch, T* logits) {
  return guarded([&] {
    need(model, "model");
    need(images, "images");
    need(logits, "logits");
    const auto& m = model->model;
    gcvk::require(m.dtype == gcvk::dtype_of<T>(), gcvk::ErrorKind::usage,
                  std::string("model dtype is ") + gcvk::to_string(m.dtype));
    gcvk::require(batch >= 1, gcvk::ErrorKind::usage, "batch must be >= 1");
    const std::int64_t s = m.config.img_size;
    std::vector<T> in(images, images + batch * 3 * s * s);
    gcvk::NoGradScope no_grad;
    const gcvk::Tensor out = m.forward(gcvk::Tensor::from<T>({batch, 3, s, s}, std::move(in)));
    const auto v = out.data<T>();
    std::copy(v.begin(), v.end(), logits);
  });
}

std::string fmt_double(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

extern "C" {

const char* gcvk_last_error(void) { return g_last_error.c_str(); }

const char* gcvk_status_name(gcvk_status status) {
  switch (status) {
    case GCVK_OK: return "ok";
    case GCVK_ERR_USAGE: return "usage error";
    case GCVK_ERR_CONFIG: return "config error";
    case GCVK_ERR_SHAPE: return "shape error";
    case GCVK_ERR_LAYOUT: return "layout error";
    case GCVK_ERR_NUMERIC: return "numeric error";
    case GCVK_ERR_DOMAIN: return "domain error";
    case GCVK_ERR_FORMAT: return "format error";
    case GCVK_ERR_UNSUPPORTED: return "unsupported";
    case GCVK_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void gcvk_string_free(char* s) { std::free(s); }

gcvk_status gcvk_variant_names(char** out) {
  return guarded([&] {
    need(out, "out");
    std::string s;
    for (const auto& v : gcvk::variant_names()) s += v + "\n";
    *out = dup(s);
  });
}

gcvk_status gcvk_config_from_variant(const char* name, gcvk_config** out) {
  return make_config(out, [&] {
    need(name, "name");
    return gcvk::variant_config(name);
  });
}

gcvk_status gcvk_config_from_file(const char* path, gcvk_config** out) {
  return make_config(out, [&] {
    need(path, "path");
    return gcvk::config_from_file(path);
  });
}

gcvk_status gcvk_config_from_json(const char* json, gcvk_config** out) {
  return make_config(out, [&] {
    need(json, "json");
    return gcvk::config_from_json(json);
  });
}

gcvk_status gcvk_config_set_img_size(gcvk_config* cfg, int64_t img_size) {
  return guarded([&] {
    need(cfg, "cfg");
    gcvk::ModelConfig next = cfg->cfg;
    next.img_size = img_size;
    next.validate();
    cfg->cfg = next;
  });
}

gcvk_status gcvk_config_to_json(const gcvk_config* cfg, char** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = dup(gcvk::config_to_json(cfg->cfg));
  });
}

void gcvk_config_free(gcvk_config* cfg) { delete cfg; }

gcvk_status gcvk_model_build(const gcvk_config* cfg, uint64_t seed, gcvk_dtype dtype, gcvk_model** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = nullptr;
    *out = new gcvk_model{gcvk::build_model(cfg->cfg, seed, static_cast<gcvk::DType>(dtype))};
  });
}

void gcvk_model_free(gcvk_model* model) { delete model; }

gcvk_status gcvk_model_param_count(const gcvk_model* model, int64_t* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = model->model.param_count();
  });
}

gcvk_dtype gcvk_model_dtype(const gcvk_model* model) { return static_cast<gcvk_dtype>(model->model.dtype); }
int64_t gcvk_model_img_size(const gcvk_model* model) { return model->model.config.img_size; }
int64_t gcvk_model_num_classes(const gcvk_model* model) { return model->model.config.num_classes; }

gcvk_status gcvk_summary(const gcvk_config* cfg, int64_t batch, int as_json, char** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    const gcvk::Model shapes = gcvk::build_model_shapes(cfg->cfg);
    const gcvk::CostReport report = gcvk::cost_report(shapes, batch);
    *out = dup(as_json ? gcvk::report_to_json(report) : gcvk::format_report(report));
  });
}

gcvk_status gcvk_model_forward_f32(const gcvk_model* model, const float* images, int64_t batch, float* logits) {
  return forward(model, images, batch, logits);
}

gcvk_status gcvk_model_forward_f64(const gcvk_model* model, const double* images, int64_t batch,
                                   double* logits) {
  return forward(model, images, batch, logits);
}

gcvk_status gcvk_model_save(gcvk_model* model, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "path");
    gcvk::save_weights(model->model, path);
  });
}

gcvk_status gcvk_model_load(const gcvk_config* cfg, const char* path, gcvk_model** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto m = std::make_unique<gcvk_model>();
    m->model = gcvk::build_model_shapes(cfg->cfg);
    // The file decides the dtype; shape-only skeletons are cheap to rebuild.
    const auto tensors = [&] {
      std::ifstream in(path, std::ios::binary);
      gcvk::require(in.good(), gcvk::ErrorKind::format, std::string("cannot open weights file ") + path);
      std::ostringstream buf;
      buf << in.rdbuf();
      return buf.str();
    }();
    const auto decoded = gcvk::decode_tensors(tensors);
    if (!decoded.empty() && decoded.front().second.dtype() != m->model.dtype) {
      m->model = gcvk::build_model_shapes(cfg->cfg, decoded.front().second.dtype());
    }
    gcvk::decode_weights(m->model, tensors);
    *out = m.release();
  });
}

gcvk_status gcvk_gradcheck(const char* block, uint64_t seed, int inject_fault, int as_json, char** report,
                           int* passed) {
  return guarded([&] {
    need(report, "report");
    need(passed, "passed");
    const auto entries = gcvk::run_gradcheck(block ? block : "", seed, inject_fault != 0);
    bool ok = true;
    std::ostringstream os;
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& e : entries) {
      const bool entry_ok = e.max_rel_error < 1e-5;
      ok = ok && entry_ok;
      char line[160];
      std::snprintf(line, sizeof line, "%-20s max_rel_err %.3e  elements %6lld  %s\n", e.block.c_str(),
                    e.max_rel_error, static_cast<long long>(e.elements), entry_ok ? "ok" : "FAIL");
      os << line;
      doc.push_back({{"block", e.block},
                     {"max_rel_error", e.max_rel_error},
                     {"elements", e.elements},
                     {"target", e.tolerance},
                     {"ok", entry_ok}});
    }
    *passed = ok ? 1 : 0;
    *report = dup(as_json ? doc.dump(2) : os.str());
  });
}

gcvk_status gcvk_bench(const gcvk_model* model, int64_t batch, int iters, int warmup, int threads, uint64_t seed,
                       gcvk_bench_result* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    gcvk::BenchOptions opt;
    opt.batch = batch;
    opt.iters = iters;
    opt.warmup = warmup;
    opt.threads = threads;
    opt.seed = seed;
    const auto r = gcvk::run_bench(model->model, opt);
    *out = gcvk_bench_result{r.median_ms,        r.p95_ms,   r.analytic_flops, r.measured_flops,
                             r.flops_per_second, r.checksum, r.iters,          r.threads};
  });
}

void gcvk_train_options_default(gcvk_train_options* opt) {
  const gcvk::TrainOptions d;
  *opt = gcvk_train_options{d.steps, d.lr, d.batch, d.eval_every, d.stop_accuracy, d.seed};
}

gcvk_status gcvk_train_toy(gcvk_model* model, const gcvk_train_options* opt, int as_json, char** report,
                           double* initial_loss, double* final_loss, double* final_accuracy) {
  return guarded([&] {
    need(model, "model");
    need(opt, "opt");
    gcvk::TrainOptions o;
    o.steps = opt->steps;
    o.lr = opt->lr;
    o.batch = opt->batch;
    o.eval_every = opt->eval_every;
    o.stop_accuracy = opt->stop_accuracy;
    o.seed = opt->seed;
    const auto r = gcvk::train_toy(model->model, o);
    if (initial_loss) *initial_loss = r.initial_loss();
    if (final_loss) *final_loss = r.final_loss();
    if (final_accuracy) *final_accuracy = r.final_accuracy();
    if (report) {
      std::ostringstream os;
      nlohmann::json curve = nlohmann::json::array();
      for (const auto& p : r.curve) {
        os << "step " << p.step << "  loss " << fmt_double("%.6f", p.loss) << "  accuracy "
           << fmt_double("%.4f", p.accuracy) << "\n";
        curve.push_back({{"step", p.step}, {"loss", p.loss}, {"accuracy", p.accuracy}});
      }
      nlohmann::json doc{{"steps_run", r.steps_run},
                         {"initial_loss", r.initial_loss()},
                         {"final_loss", r.final_loss()},
                         {"final_accuracy", r.final_accuracy()},
                         {"curve", curve}};
      *report = dup(as_json ? doc.dump(2) : os.str());
    }
  });
}

}  // extern "C"

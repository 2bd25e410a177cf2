#ifndef GCVK_H
#define GCVK_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define GCVK_API __declspec(dllexport)
#else
#define GCVK_API __attribute__((visibility("default")))
#endif

typedef enum gcvk_status {
  GCVK_OK = 0,
  GCVK_ERR_USAGE = 1,
  GCVK_ERR_CONFIG = 2,
  GCVK_ERR_SHAPE = 3,
  GCVK_ERR_LAYOUT = 4,
  GCVK_ERR_NUMERIC = 5,
  GCVK_ERR_DOMAIN = 6,
  GCVK_ERR_FORMAT = 7,
  GCVK_ERR_UNSUPPORTED = 8,
  GCVK_ERR_INTERNAL = 9
} gcvk_status;

typedef enum gcvk_dtype { GCVK_F32 = 0, GCVK_F64 = 1 } gcvk_dtype;

typedef struct gcvk_config gcvk_config;
typedef struct gcvk_model gcvk_model;

/* Message of the last failed call on this thread ("" if none). */
GCVK_API const char* gcvk_last_error(void);
GCVK_API const char* gcvk_status_name(gcvk_status status);

/* Strings returned through char** out-params are owned by the caller. */
GCVK_API void gcvk_string_free(char* s);

/* Newline-separated list of built-in variant names. */
GCVK_API gcvk_status gcvk_variant_names(char** out);

GCVK_API gcvk_status gcvk_config_from_variant(const char* name, gcvk_config** out);
GCVK_API gcvk_status gcvk_config_from_file(const char* path, gcvk_config** out);
GCVK_API gcvk_status gcvk_config_from_json(const char* json, gcvk_config** out);
GCVK_API gcvk_status gcvk_config_set_img_size(gcvk_config* cfg, int64_t img_size);
GCVK_API gcvk_status gcvk_config_to_json(const gcvk_config* cfg, char** out);
GCVK_API void gcvk_config_free(gcvk_config* cfg);

GCVK_API gcvk_status gcvk_model_build(const gcvk_config* cfg, uint64_t seed, gcvk_dtype dtype, gcvk_model** out);
GCVK_API void gcvk_model_free(gcvk_model* model);
GCVK_API gcvk_status gcvk_model_param_count(const gcvk_model* model, int64_t* out);
GCVK_API gcvk_dtype gcvk_model_dtype(const gcvk_model* model);
GCVK_API int64_t gcvk_model_img_size(const gcvk_model* model);
GCVK_API int64_t gcvk_model_num_classes(const gcvk_model* model);

/* Cost report (parameters and analytic multiply-accumulates). Text when
 * as_json is 0, JSON document otherwise. Does not need seeded weights. */
GCVK_API gcvk_status gcvk_summary(const gcvk_config* cfg, int64_t batch, int as_json, char** out);

/* images: batch x 3 x S x S row-major; logits: batch x classes. */
GCVK_API gcvk_status gcvk_model_forward_f32(const gcvk_model* model, const float* images, int64_t batch,
                                            float* logits);
GCVK_API gcvk_status gcvk_model_forward_f64(const gcvk_model* model, const double* images, int64_t batch,
                                            double* logits);

GCVK_API gcvk_status gcvk_model_save(gcvk_model* model, const char* path);
/* Builds the structure for cfg and fills it from path; nothing is returned
 * unless every tensor matches. */
GCVK_API gcvk_status gcvk_model_load(const gcvk_config* cfg, const char* path, gcvk_model** out);

/* Gradient suite: block NULL or "" runs all. Report lists one line per block.
 * passed is 1 when every error is below 1e-5. */
GCVK_API gcvk_status gcvk_gradcheck(const char* block, uint64_t seed, int inject_fault, int as_json, char** report,
                                    int* passed);

typedef struct gcvk_bench_result {
  double median_ms;
  double p95_ms;
  uint64_t analytic_flops;
  uint64_t measured_flops;
  double flops_per_second;
  double checksum;
  int iters;
  int threads;
} gcvk_bench_result;

GCVK_API gcvk_status gcvk_bench(const gcvk_model* model, int64_t batch, int iters, int warmup, int threads,
                                uint64_t seed, gcvk_bench_result* out);

typedef struct gcvk_train_options {
  int steps;
  double lr;
  int64_t batch;
  int eval_every;
  double stop_accuracy; /* 0 disables early stop */
  uint64_t seed;
} gcvk_train_options;

GCVK_API void gcvk_train_options_default(gcvk_train_options* opt);

/* Trains in place. Report holds the loss curve (text or JSON); the initial
 * and final full-set losses and final accuracy are returned separately. */
GCVK_API gcvk_status gcvk_train_toy(gcvk_model* model, const gcvk_train_options* opt, int as_json, char** report,
                                    double* initial_loss, double* final_loss, double* final_accuracy);

#ifdef __cplusplus
}
#endif

#endif

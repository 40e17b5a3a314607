#ifndef CPNET_CPNET_H
#define CPNET_CPNET_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CPNET_API __declspec(dllexport)
#else
#define CPNET_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Every call returns a status. On failure, cpnet_last_error() describes it
 * until the next failing call on the same thread. */
typedef enum cpnet_status {
  CPNET_OK = 0,
  CPNET_ERR_INVALID = 1, /* bad arguments, configuration or shapes */
  CPNET_ERR_RUNTIME = 2, /* numeric failure, e.g. a diverging loss */
  CPNET_ERR_IO = 3,      /* file could not be read or written */
  CPNET_ERR_INTERNAL = 4
} cpnet_status;

CPNET_API const char* cpnet_last_error(void);
CPNET_API const char* cpnet_version(void);

/* Caps worker threads for parallel kernels (at least 1). The initial cap
 * comes from the CPNET_THREADS environment variable, default 1. */
CPNET_API cpnet_status cpnet_set_threads(size_t threads);

typedef enum cpnet_split { CPNET_SPLIT_TRAIN = 0, CPNET_SPLIT_VAL = 1 } cpnet_split;
typedef enum cpnet_model_kind { CPNET_MODEL_C2D = 0, CPNET_MODEL_CPNET = 1 } cpnet_model_kind;
typedef enum cpnet_backend { CPNET_BACKEND_BRUTE = 0, CPNET_BACKEND_TREE = 1 } cpnet_backend;

/* ---- dataset: moving-square videos, 4 x 32 x 32, labels 0..3 = left, right, up, down */

typedef struct cpnet_dataset cpnet_dataset;

CPNET_API cpnet_status cpnet_dataset_generate(uint64_t seed, cpnet_dataset** out);
CPNET_API cpnet_status cpnet_dataset_load(const char* path, cpnet_dataset** out);
CPNET_API cpnet_status cpnet_dataset_save(const cpnet_dataset* ds, const char* path);
CPNET_API cpnet_status cpnet_dataset_size(const cpnet_dataset* ds, cpnet_split split, size_t* out);
CPNET_API cpnet_status cpnet_dataset_label(const cpnet_dataset* ds, cpnet_split split, size_t index, int* out);
/* Copies one sample's 4096 pixels (0 or 1) in [t][y][x] order. */
CPNET_API cpnet_status cpnet_dataset_frames(const cpnet_dataset* ds, cpnet_split split, size_t index,
                                            uint8_t* pixels, size_t capacity);
CPNET_API void cpnet_dataset_free(cpnet_dataset* ds);

/* ---- model */

typedef struct cpnet_model cpnet_model;

/* k is ignored for C2D. */
CPNET_API cpnet_status cpnet_model_create(cpnet_model_kind kind, size_t k, uint64_t seed, cpnet_model** out);
CPNET_API cpnet_status cpnet_model_load(const char* path, cpnet_model** out);
CPNET_API cpnet_status cpnet_model_save(cpnet_model* model, const char* path);
CPNET_API cpnet_status cpnet_model_kind_of(const cpnet_model* model, cpnet_model_kind* out);
CPNET_API cpnet_status cpnet_model_neighbors(const cpnet_model* model, size_t* out);
CPNET_API cpnet_status cpnet_model_parameter_count(cpnet_model* model, size_t* out);
CPNET_API cpnet_status cpnet_model_set_backend(cpnet_model* model, cpnet_backend backend);
CPNET_API void cpnet_model_free(cpnet_model* model);

/* ---- training */

typedef struct cpnet_train_config {
  size_t epochs;
  size_t batch_size;
  float learning_rate;
  float beta1;
  float beta2;
  float adam_epsilon;
  uint64_t seed;
  double early_stop_train_accuracy; /* stop once an epoch reaches it; > 1 disables */
} cpnet_train_config;

typedef struct cpnet_epoch_metrics {
  size_t epoch; /* 1-based */
  double train_loss;
  double train_accuracy;
  double val_loss;
  double val_accuracy;
} cpnet_epoch_metrics;

typedef void (*cpnet_epoch_callback)(const cpnet_epoch_metrics* metrics, void* user);

CPNET_API void cpnet_train_config_default(cpnet_train_config* config);

/* Trains in place; on return the model holds its best-validation parameters,
 * whose metrics are written to *best. metrics_csv may be NULL. */
CPNET_API cpnet_status cpnet_train(cpnet_model* model, const cpnet_dataset* ds, const cpnet_train_config* config,
                                   const char* metrics_csv, cpnet_epoch_callback on_epoch, void* user,
                                   cpnet_epoch_metrics* best);

CPNET_API cpnet_status cpnet_evaluate(cpnet_model* model, const cpnet_dataset* ds, cpnet_split split,
                                      double* accuracy, double* loss);

/* ---- diagnostics */

/* Central-difference check of every op, the CE layer and the toy CPNet loss.
 * *passed is 1 when every group is within tolerance. report_csv may be NULL. */
CPNET_API cpnet_status cpnet_gradcheck(uint64_t seed, float epsilon, const char* report_csv, int* passed);

/* JSONL dump of CP-module correspondences for one sample. */
CPNET_API cpnet_status cpnet_visualize(cpnet_model* model, const cpnet_dataset* ds, cpnet_split split,
                                       size_t sample_index, const char* out_path);

typedef struct cpnet_bench_row {
  cpnet_backend backend;
  size_t thw;
  size_t channels;
  size_t k;
  double millis;
} cpnet_bench_row;

/* Times the requested backends on one random cloud per size. rows must hold
 * n_sizes * n_backends entries. *agree is 1 when all backends returned the
 * same neighbors for every size. csv_path may be NULL. */
CPNET_API cpnet_status cpnet_bench_knn(const size_t* sizes, size_t n_sizes, const cpnet_backend* backends,
                                       size_t n_backends, size_t channels, size_t k, size_t repetitions,
                                       uint64_t seed, const char* csv_path, cpnet_bench_row* rows, int* agree);

#ifdef __cplusplus
}
#endif

#endif

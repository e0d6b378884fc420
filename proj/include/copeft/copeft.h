#ifndef COPEFT_COPEFT_H
#define COPEFT_COPEFT_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#if defined(COPEFT_BUILDING_LIBRARY)
#define COPEFT_API __declspec(dllexport)
#else
#define COPEFT_API __declspec(dllimport)
#endif
#else
#define COPEFT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum copeft_status {
  COPEFT_OK = 0,
  COPEFT_ERR_INVALID_ARGUMENT = 1,
  COPEFT_ERR_SHAPE = 2,
  COPEFT_ERR_CONFIG = 3,
  COPEFT_ERR_IO = 4,
  COPEFT_ERR_FORMAT = 5,
  COPEFT_ERR_NUMERIC = 6,
  COPEFT_ERR_MISSING_PARAMETER = 7,
  COPEFT_ERR_INTERNAL = 99
} copeft_status;

typedef struct copeft_dataset copeft_dataset;
typedef struct copeft_model copeft_model;
typedef struct copeft_report copeft_report;

typedef struct copeft_train_options {
  double lr;
  uint64_t batch;
  uint64_t epochs;
} copeft_train_options;

typedef struct copeft_param_count {
  uint64_t trainable;
  uint64_t total;
  double ratio;
} copeft_param_count;

typedef struct copeft_metrics {
  double ap50;
  double ap70;
  uint64_t num_detections;
  uint64_t num_gt;
  uint64_t params_trainable;
  uint64_t params_total;
  double seconds;
} copeft_metrics;

COPEFT_API const char* copeft_version(void);
COPEFT_API const char* copeft_status_name(copeft_status status);
/* Message of the last failure on the calling thread; "" after a success. */
COPEFT_API const char* copeft_last_error(void);

/* lr 0.002, batch 2, epochs 20 */
COPEFT_API copeft_train_options copeft_train_options_default(void);

/* domain: preset name or path to a JSON domain file */
COPEFT_API copeft_status copeft_dataset_generate(const char* domain, uint64_t count, uint64_t seed,
                                                 copeft_dataset** out);
COPEFT_API copeft_status copeft_dataset_load(const char* path, copeft_dataset** out);
COPEFT_API copeft_status copeft_dataset_save(const copeft_dataset* ds, const char* path);
COPEFT_API copeft_status copeft_dataset_size(const copeft_dataset* ds, uint64_t* out);
COPEFT_API void copeft_dataset_free(copeft_dataset* ds);

/* config_path may be NULL (defaults); it holds "model", "base_epochs",
   "base_lr", "base_batch" and "base_seed". */
COPEFT_API copeft_status copeft_model_train_base(const copeft_dataset* data, const char* config_path,
                                                 copeft_model** out);
/* geometry may be NULL; the model then uses the default grid. */
COPEFT_API copeft_status copeft_model_load(const char* path, const copeft_dataset* geometry, copeft_model** out);
COPEFT_API copeft_status copeft_model_save(const copeft_model* model, const char* path);
/* opts may be NULL. */
COPEFT_API copeft_status copeft_model_adapt(const copeft_model* base, const copeft_dataset* data, const char* method,
                                            double rate, uint64_t seed, const copeft_train_options* opts,
                                            copeft_model** out);
/* Writes only the tensors the model's method trains. */
COPEFT_API copeft_status copeft_model_save_delta(const copeft_model* model, const char* path);
COPEFT_API copeft_status copeft_model_apply_delta(const copeft_model* base, const char* delta_path,
                                                  copeft_model** out);
/* Counts for `method` layered on the model's architecture. */
COPEFT_API copeft_status copeft_count_params(const copeft_model* base, const char* method, copeft_param_count* out);
/* Canonical method label; *needed receives strlen + 1. buf may be NULL when cap is 0. */
COPEFT_API copeft_status copeft_model_method(const copeft_model* model, char* buf, size_t cap, size_t* needed);
COPEFT_API void copeft_model_free(copeft_model* model);

/* record_wall_clock 0 stores seconds = 0. */
COPEFT_API copeft_status copeft_evaluate(const copeft_model* model, const copeft_dataset* data, uint64_t seed,
                                         int record_wall_clock, copeft_report** out);
COPEFT_API copeft_status copeft_report_metrics(const copeft_report* report, copeft_metrics* out);
COPEFT_API copeft_status copeft_report_save(const copeft_report* report, const char* path);
COPEFT_API void copeft_report_free(copeft_report* report);

/* Table of every *.json report in dir, ordered by file name. */
COPEFT_API copeft_status copeft_table_from_dir(const char* dir, const char* csv_path);
COPEFT_API copeft_status copeft_run_experiment(const char* config_path, int verbose);

#ifdef __cplusplus
}
#endif

#endif

#ifndef AIREX_H
#define AIREX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum {
  AIREX_STATUS_OK = 0,
  AIREX_STATUS_NULL_ARGUMENT = 1,
  AIREX_STATUS_INVALID_ARGUMENT = 2,
  AIREX_STATUS_IO = 3,
  AIREX_STATUS_PARSE = 4,
  // Dataset integrity problems or missing readings.
  AIREX_STATUS_DATA = 5,
  AIREX_STATUS_CHECKPOINT = 6,
  AIREX_STATUS_DIVERGED = 7,
  // An output buffer is too small; nothing was written to it.
  AIREX_STATUS_BUFFER_TOO_SMALL = 8,
  // A Rust panic was caught. Handles touched by the call stay valid.
  AIREX_STATUS_PANIC = 9,
} AirexStatus;

// A loaded or generated dataset.
typedef struct AirexDataset AirexDataset;

// A trained network together with its feature normalization.
typedef struct AirexModel AirexModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` as a
// NUL-terminated string, truncating to `cap` bytes. Returns the buffer
// size needed for the full message including the terminator. `buf` may be
// null to query the size.
//
// # Safety
// `buf` must be null or point to at least `cap` writable bytes.
uintptr_t airex_last_error(char *buf, uintptr_t cap);

// Loads the six dataset CSV files from directory `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be writable.
AirexStatus airex_dataset_load(const char *dir, AirexDataset **out);

// Generates a synthetic dataset. `config_json` is null for the defaults or
// a JSON object overriding individual generator fields, e.g.
// `{"n_cities": 3, "seed": 7}`.
//
// # Safety
// `config_json` must be null or NUL-terminated; `out` must be writable.
AirexStatus airex_dataset_synthetic(const char *config_json, AirexDataset **out);

// Writes the dataset as CSV files into directory `dir`.
//
// # Safety
// `dataset` must be a live handle; `dir` must be NUL-terminated.
AirexStatus airex_dataset_save(const AirexDataset *dataset, const char *dir);

// # Safety
// `dataset` must be a live handle and `out` writable.
AirexStatus airex_dataset_station_count(const AirexDataset *dataset, uintptr_t *out);

// Releases a dataset. Null is ignored.
//
// # Safety
// `dataset` must be null or a handle not yet freed.
void airex_dataset_free(AirexDataset *dataset);

// # Safety
// `path` must be NUL-terminated; `out` must be writable.
AirexStatus airex_model_load(const char *path, AirexModel **out);

// # Safety
// `model` must be a live handle; `path` must be NUL-terminated.
AirexStatus airex_model_save(const AirexModel *model, const char *path);

// Trains a model for `target_city`. `sources_csv` is a comma-separated
// list of source cities, or null for every other city. `config_json` is
// null or a JSON object overriding training fields, e.g.
// `{"epochs": 5, "lstm_hidden": 8}`.
//
// # Safety
// `dataset` must be a live handle, string arguments NUL-terminated or
// null where allowed, and `out` writable.
AirexStatus airex_model_train(const AirexDataset *dataset,
                              const char *target_city,
                              const char *sources_csv,
                              const char *config_json,
                              AirexModel **out);

// Number of source cities, which is also the length of the `beta` output
// of [`airex_model_predict`].
//
// # Safety
// `model` must be a live handle and `out` writable.
AirexStatus airex_model_source_count(const AirexModel *model, uintptr_t *out);

// # Safety
// `model` must be a live handle and `out` writable.
AirexStatus airex_model_window(const AirexModel *model, uintptr_t *out);

// Infers PM2.5 at (`lat`, `lon`) in `city_id` for the window ending at
// hour `t`. When `station_id` is non-null that station's own readings are
// excluded from the inputs. Writes the estimate to `out_y` and, when
// `out_beta` is non-null, the city weights in source-city order.
//
// # Safety
// Handles must be live, strings NUL-terminated (or null for
// `station_id`), `out_y` writable and `out_beta` null or valid for
// `beta_cap` doubles.
AirexStatus airex_model_predict(const AirexModel *model,
                                const AirexDataset *dataset,
                                const char *city_id,
                                double lat,
                                double lon,
                                const char *station_id,
                                int64_t t,
                                double *out_y,
                                double *out_beta,
                                uintptr_t beta_cap);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void airex_model_free(AirexModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AIREX_H */

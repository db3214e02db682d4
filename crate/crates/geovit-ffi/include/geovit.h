/* C ABI for the geovit vision-transformer library.
 *
 * Every function returns a GvStatus; on any status other than GV_STATUS_OK
 * the thread-local message from gv_last_error_message() describes the
 * failure. Out-parameters are written only on GV_STATUS_OK. Handles are
 * opaque: create them with gv_*_new/load/generate, release them with the
 * matching gv_*_free. Strings returned through char** out-parameters are
 * owned by the caller and must be released with gv_string_free.
 */

#ifndef GEOVIT_H
#define GEOVIT_H

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call in this ABI.
typedef enum GvStatus {
  // The call succeeded and all out-parameters were written.
  GV_STATUS_OK = 0,
  // A required pointer argument was null.
  GV_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  GV_STATUS_INVALID_UTF8 = 2,
  // A configuration document or value was rejected.
  GV_STATUS_CONFIG = 3,
  // Tensor shapes disagreed.
  GV_STATUS_SHAPE = 4,
  // An API precondition was violated (wrong variant, bad buffer length, ...).
  GV_STATUS_CONTRACT = 5,
  // A numerical check failed (non-finite loss, gradient check, ...).
  GV_STATUS_NUMERICAL = 6,
  // A file existed but its contents were malformed.
  GV_STATUS_FORMAT = 7,
  // The operating system reported an I/O failure.
  GV_STATUS_IO = 8,
  // An internal invariant broke; the library state is still consistent.
  GV_STATUS_PANIC = 9,
} GvStatus;

// Which task a model solves.
typedef enum GvVariant {
  // Plume segmentation, fuel classification, and power regression.
  GV_VARIANT_CO2 = 0,
  // Surface concentration regression from two image streams.
  GV_VARIANT_NO2 = 1,
} GvVariant;

// Which part of a dataset an operation runs over.
typedef enum GvSplit {
  // Every sample.
  GV_SPLIT_ALL = 0,
  // The deterministic leading 80% used for optimization.
  GV_SPLIT_TRAIN = 1,
  // The deterministic trailing 20% held out for evaluation.
  GV_SPLIT_EVAL = 2,
} GvSplit;

// Opaque dataset handle.
typedef struct GvDataset GvDataset;

// Opaque model handle: the network parameters plus the training
// configuration and target statistics that travel with them through
// checkpoints.
typedef struct GvModel GvModel;

// Per-record training callback: receives one JSON history record per
// optimization step. Returning nonzero aborts the run.
typedef int32_t (*GvRecordCallback)(const char *record_json, void *user_data);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static, nul-terminated string. Never fails; the
// returned pointer is valid for the lifetime of the process.
const char *gv_version(void);

// Message describing the most recent failure on the calling thread, as a
// nul-terminated string. The pointer stays valid until the next geovit
// call on the same thread. Returns an empty string when no failure has
// been recorded.
const char *gv_last_error_message(void);

// Release a string previously returned through a `char**` out-parameter.
// Passing null is a no-op.
//
// # Safety
// `s` must have been returned by this library and not freed before.
void gv_string_free(char *s);

// Create a model with the default architecture for `variant`, initializing
// parameters from `seed`. On success `*out` owns the new handle.
//
// # Safety
// `out` must point to writable memory for one pointer.
enum GvStatus gv_model_new(enum GvVariant variant, uint64_t seed, struct GvModel **out);

// Create a model from a complete architecture document — the same JSON
// shape that gv_model_config_json() returns — initializing parameters
// from `seed`.
//
// # Safety
// `config_json` must be a nul-terminated string; `out` must point to
// writable memory for one pointer.
enum GvStatus gv_model_new_from_json(const char *config_json, uint64_t seed, struct GvModel **out);

// Release a model handle. Passing null is a no-op.
//
// # Safety
// `model` must have been returned by this library and not freed before.
void gv_model_free(struct GvModel *model);

// Report which task `model` solves.
//
// # Safety
// Both pointers must be valid; `out` must be writable.
enum GvStatus gv_model_variant(const struct GvModel *model, enum GvVariant *out);

// Serialize the model architecture as JSON. On success `*out` owns the
// string; release it with gv_string_free().
//
// # Safety
// Both pointers must be valid; `out` must be writable.
enum GvStatus gv_model_config_json(const struct GvModel *model, char **out);

// Total number of trainable scalars in the model.
//
// # Safety
// Both pointers must be valid; `out` must be writable.
enum GvStatus gv_model_scalar_count(const struct GvModel *model, size_t *out);

// Number of optimization steps the model has absorbed.
//
// # Safety
// Both pointers must be valid; `out` must be writable.
enum GvStatus gv_model_step_count(const struct GvModel *model, uint64_t *out);

// Target destandardization statistics carried by the model: predictions
// are reported as `value * std + mean`.
//
// # Safety
// All pointers must be valid; the out-parameters must be writable.
enum GvStatus gv_model_norm(const struct GvModel *model, double *out_mean, double *out_std);

// Write the model, its optimizer state, its training configuration, and
// its target statistics as a checkpoint directory.
//
// # Safety
// `model` must be valid; `dir` must be a nul-terminated path.
enum GvStatus gv_model_save(const struct GvModel *model, const char *dir);

// Load a checkpoint directory into a fresh handle. On success `*out` owns
// the model together with the training configuration and target
// statistics stored alongside it.
//
// # Safety
// `dir` must be a nul-terminated path; `out` must point to writable
// memory for one pointer.
enum GvStatus gv_model_load(const char *dir, struct GvModel **out);

// Generate `count` synthetic samples matching the model's architecture
// (variant, image size, band counts), seeded by `seed`. On success `*out`
// owns the dataset handle.
//
// # Safety
// `model` must be valid; `out` must point to writable memory for one
// pointer.
enum GvStatus gv_dataset_generate(const struct GvModel *model,
                                  size_t count,
                                  uint64_t seed,
                                  struct GvDataset **out);

// Load a dataset directory written by gv_dataset_save() (or the CLI).
//
// # Safety
// `dir` must be a nul-terminated path; `out` must point to writable
// memory for one pointer.
enum GvStatus gv_dataset_load(const char *dir, struct GvDataset **out);

// Write the dataset as a manifest plus one tensor file per array.
//
// # Safety
// `dataset` must be valid; `dir` must be a nul-terminated path.
enum GvStatus gv_dataset_save(const struct GvDataset *dataset, const char *dir);

// Number of samples in the dataset.
//
// # Safety
// Both pointers must be valid; `out` must be writable.
enum GvStatus gv_dataset_len(const struct GvDataset *dataset, size_t *out);

// Report which task the dataset's samples belong to.
//
// # Safety
// Both pointers must be valid; `out` must be writable.
enum GvStatus gv_dataset_variant(const struct GvDataset *dataset, enum GvVariant *out);

// Release a dataset handle. Passing null is a no-op.
//
// # Safety
// `dataset` must have been returned by this library and not freed before.
void gv_dataset_free(struct GvDataset *dataset);

// Run optimization steps on `model` over the dataset's train split.
//
// `train_config_json` may be null to keep the configuration already
// carried by the handle; otherwise it is parsed as a training
// configuration document in which every omitted key takes its built-in
// default. A nonzero `steps` overrides the step count from either source.
// `on_record` (nullable) receives one JSON history record per step;
// returning nonzero aborts the run with a contract error. On success the
// handle's training configuration and target statistics are updated to
// match the run, so a following gv_model_save() records them.
//
// # Safety
// `model` and `dataset` must be valid handles; `train_config_json`, when
// non-null, must be nul-terminated; `user_data` is passed through to the
// callback untouched.
enum GvStatus gv_train(struct GvModel *model,
                       const struct GvDataset *dataset,
                       const char *train_config_json,
                       uint64_t steps,
                       GvRecordCallback on_record,
                       void *user_data);

// Evaluate `model` over one split of the dataset and return the metrics
// report as JSON. Regression metrics are destandardized with the target
// statistics carried by the model handle (for a loaded checkpoint these
// are its training-time statistics). On success `*out_report_json` owns
// the string; release it with gv_string_free().
//
// # Safety
// All pointers must be valid; `out_report_json` must be writable.
enum GvStatus gv_evaluate(const struct GvModel *model,
                          const struct GvDataset *dataset,
                          enum GvSplit split,
                          char **out_report_json);

// Run the CO2 model on one scene.
//
// `s2` must hold exactly `s2_bands * image_size * image_size` values in
// band-major row-major order; `weather` must hold exactly 3 values. The
// predicted power (destandardized) and fuel class are written to
// `out_power` and `out_fuel_class`. When `out_mask` is non-null it must
// hold `image_size * image_size` floats (`mask_len`) and receives the
// predicted plume mask as 0.0/1.0 values.
//
// # Safety
// All non-null pointers must reference buffers of the stated lengths.
enum GvStatus gv_predict_co2(const struct GvModel *model,
                             const float *s2,
                             size_t s2_len,
                             const float *weather,
                             size_t weather_len,
                             double *out_power,
                             uint32_t *out_fuel_class,
                             float *out_mask,
                             size_t mask_len);

// Run the NO2 model on one scene.
//
// `s2` must hold exactly `s2_bands * image_size * image_size` values and
// `s5p` exactly `s5p_bands * image_size * image_size`, both band-major
// row-major. The predicted concentration (destandardized) is written to
// `out_concentration`.
//
// # Safety
// All pointers must reference buffers of the stated lengths.
enum GvStatus gv_predict_no2(const struct GvModel *model,
                             const float *s2,
                             size_t s2_len,
                             const float *s5p,
                             size_t s5p_len,
                             double *out_concentration);

// Compare analytic gradients of a small 64-bit model against central
// finite differences. On success writes the largest relative error seen;
// a failed comparison returns GV_STATUS_NUMERICAL with the offending
// parameter named in the error message.
//
// # Safety
// `out_max_rel_error` must point to writable memory for one double.
enum GvStatus gv_gradcheck(enum GvVariant variant, uint64_t seed, double *out_max_rel_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOVIT_H */

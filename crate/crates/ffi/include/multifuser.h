#ifndef MULTIFUSER_H
#define MULTIFUSER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_CONFIG = 2,
  MF_STATUS_DIMENSION = 3,
  MF_STATUS_NUMERIC = 4,
  MF_STATUS_CONTRACT = 5,
  MF_STATUS_LOAD = 6,
  MF_STATUS_DIVERGED = 7,
  MF_STATUS_IO = 8,
  MF_STATUS_INVALID_UTF8 = 9,
  MF_STATUS_PANIC = 10,
} MfStatus;

typedef struct MfDataset MfDataset;

/**
 * A model with its optimizer state.
 */
typedef struct MfModel MfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library.
 */
const char *mf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mf_version(void);

/**
 * Creates a freshly initialized model.
 *
 * # Safety
 * `config` is NULL or a NUL-terminated string; `out` is a valid pointer.
 */
enum MfStatus mf_model_new(const char *config, struct MfModel **out);

/**
 * # Safety
 * `model` is NULL or a handle from this library not yet freed.
 */
void mf_model_free(struct MfModel *model);

/**
 * Number of scalar parameters.
 *
 * # Safety
 * `model` is a live handle; `out` is a valid pointer.
 */
enum MfStatus mf_model_param_count(const struct MfModel *model, size_t *out);

/**
 * Number of output classes.
 *
 * # Safety
 * `model` is a live handle; `out` is a valid pointer.
 */
enum MfStatus mf_model_num_classes(const struct MfModel *model, size_t *out);

/**
 * Scalars per clip, `M·T·H·W·C`.
 *
 * # Safety
 * `model` is a live handle; `out` is a valid pointer.
 */
enum MfStatus mf_model_clip_len(const struct MfModel *model, size_t *out);

/**
 * Logits for one clip of row-major `[M, T, H, W, C]` pixels.
 *
 * # Safety
 * `pixels` holds `pixels_len` doubles and `logits` holds `logits_len` doubles.
 */
enum MfStatus mf_model_forward(const struct MfModel *model,
                               const double *pixels,
                               size_t pixels_len,
                               double *logits,
                               size_t logits_len);

/**
 * Logits for clip `index` of a dataset.
 *
 * # Safety
 * Handles are live; `logits` holds `logits_len` doubles.
 */
enum MfStatus mf_model_logits(const struct MfModel *model,
                              const struct MfDataset *dataset,
                              size_t index,
                              double *logits,
                              size_t logits_len);

/**
 * Trains until `train.epochs` epochs have run in total (so a loaded
 * checkpoint resumes). Writes the last epoch's mean loss to `final_loss`
 * when it is not NULL; it is left untouched if no epoch ran.
 *
 * # Safety
 * Handles are live; `config` is NULL or a NUL-terminated string.
 */
enum MfStatus mf_model_train(struct MfModel *model,
                             const struct MfDataset *dataset,
                             const char *config,
                             double *final_loss);

/**
 * Top-1 and Mean-1 accuracy on a dataset.
 *
 * # Safety
 * Handles are live; `top1` and `mean1` are valid pointers.
 */
enum MfStatus mf_model_evaluate(const struct MfModel *model,
                                const struct MfDataset *dataset,
                                double *top1,
                                double *mean1);

/**
 * # Safety
 * `model` is a live handle; `path` is a NUL-terminated string.
 */
enum MfStatus mf_model_save(const struct MfModel *model, const char *path);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is a valid pointer.
 */
enum MfStatus mf_model_load(const char *path, struct MfModel **out);

/**
 * Generates the train and eval splits described by `config`.
 *
 * # Safety
 * `config` is NULL or a NUL-terminated string; both outputs are valid pointers.
 */
enum MfStatus mf_dataset_generate(const char *config,
                                  struct MfDataset **train,
                                  struct MfDataset **eval);

/**
 * # Safety
 * `dataset` is NULL or a handle from this library not yet freed.
 */
void mf_dataset_free(struct MfDataset *dataset);

/**
 * # Safety
 * `dataset` is a live handle; `out` is a valid pointer.
 */
enum MfStatus mf_dataset_len(const struct MfDataset *dataset, size_t *out);

/**
 * # Safety
 * `dataset` is a live handle; `out` is a valid pointer.
 */
enum MfStatus mf_dataset_label(const struct MfDataset *dataset, size_t index, size_t *out);

/**
 * Copies the pixels of clip `index` into `pixels` (`len` doubles).
 *
 * # Safety
 * `dataset` is a live handle; `pixels` holds `len` writable doubles.
 */
enum MfStatus mf_dataset_pixels(const struct MfDataset *dataset,
                                size_t index,
                                double *pixels,
                                size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MULTIFUSER_H */

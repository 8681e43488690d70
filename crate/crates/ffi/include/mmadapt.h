#ifndef MMADAPT_H
#define MMADAPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. The non-zero values for configuration, numeric and I/O
 * failures match the CLI exit codes.
 */
typedef enum ArcStatus {
  ARC_STATUS_OK = 0,
  ARC_STATUS_FAILED = 1,
  ARC_STATUS_CONFIG = 2,
  ARC_STATUS_NUMERIC = 3,
  ARC_STATUS_IO = 4,
  ARC_STATUS_NULL_ARGUMENT = 5,
  ARC_STATUS_INVALID_UTF8 = 6,
  ARC_STATUS_PANIC = 7,
} ArcStatus;

/**
 * Opaque model handle.
 */
typedef struct ArcModel ArcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library from the same thread.
 */
const char *arc_last_error(void);

/**
 * Builds a freshly initialised model from a JSON configuration (null or
 * empty for the defaults) and stores the handle in `*out`.
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be a
 * valid pointer.
 */
enum ArcStatus arc_model_new(const char *config_json, struct ArcModel **out);

/**
 * Releases a handle from [`arc_model_new`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void arc_model_free(struct ArcModel *model);

/**
 * Trainable and frozen element counts.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid.
 */
enum ArcStatus arc_model_param_counts(const struct ArcModel *model,
                                      uint64_t *trainable,
                                      uint64_t *frozen);

/**
 * Number of visual tokens the decoder receives per image.
 *
 * # Safety
 * `model` must be a live handle; `out` must be valid.
 */
enum ArcStatus arc_model_visual_tokens(const struct ArcModel *model, uint64_t *out);

/**
 * Writes the model's parameters as a checkpoint.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum ArcStatus arc_model_save(const struct ArcModel *model, const char *path);

/**
 * Restores parameters from a checkpoint written for the same configuration.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum ArcStatus arc_model_load(struct ArcModel *model, const char *path);

/**
 * Trains according to the handle's configuration, replacing its weights, and
 * reports held-out accuracy (NaN when no fine-tune stage ran). Results are
 * written to the configured output directory.
 *
 * # Safety
 * `model` must be a live handle; `accuracy` must be valid.
 */
enum ArcStatus arc_model_train(struct ArcModel *model, double *accuracy);

/**
 * Finite-difference audit of the configuration's trainable groups (null or
 * empty config for the tiny model). Returns `Numeric` when it fails.
 *
 * # Safety
 * `config_json` must be null or NUL-terminated; `max_rel_err` must be valid.
 */
enum ArcStatus arc_grad_check(const char *config_json, double *max_rel_err);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMADAPT_H */

#pragma once

/* Generated by cbindgen from the rclarc-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Anything but OK leaves a message for
 * [`rclarc_last_error_message`] on the calling thread.
 */
typedef enum RclarcStatus {
  RCLARC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  RCLARC_STATUS_NULL_POINTER = 1,
  /**
   * An argument failed validation (wrong length, unknown mode, ...).
   */
  RCLARC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read or parsed.
   */
  RCLARC_STATUS_IO_ERROR = 3,
  /**
   * The computation failed numerically.
   */
  RCLARC_STATUS_NUMERIC_ERROR = 4,
  /**
   * A string argument was not valid UTF-8.
   */
  RCLARC_STATUS_UTF8_ERROR = 5,
} RclarcStatus;

/**
 * A model bundled with a direction bank and a correction mode, ready for
 * corrected inference. Create with [`rclarc_corrector_load`], release with
 * [`rclarc_corrector_free`].
 */
typedef struct RclarcCorrector RclarcCorrector;

/**
 * A loaded feed-forward model. Create with [`rclarc_model_load`], release
 * with [`rclarc_model_free`].
 */
typedef struct RclarcModel RclarcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rclarc_version(void);

/**
 * Message describing the last failure on the calling thread, or null if no
 * call failed yet. The pointer stays valid until the next failing call on
 * the same thread.
 */
const char *rclarc_last_error_message(void);

/**
 * Loads a model saved by the library or CLI. Returns null on failure.
 */
struct RclarcModel *rclarc_model_load(const char *path);

/**
 * Releases a model handle. Null is ignored.
 */
void rclarc_model_free(struct RclarcModel *model);

/**
 * Input width of the model; 0 if `model` is null.
 */
size_t rclarc_model_input_dim(const struct RclarcModel *model);

/**
 * Number of output logits; 0 if `model` is null.
 */
size_t rclarc_model_output_dim(const struct RclarcModel *model);

/**
 * Uncorrected forward pass. `x` holds `x_len` inputs and `out` must hold
 * exactly `out_len == output_dim` values.
 */
enum RclarcStatus rclarc_model_forward(const struct RclarcModel *model,
                                       const double *x,
                                       size_t x_len,
                                       double *out,
                                       size_t out_len);

/**
 * Uncorrected class prediction (argmax of the logits) into `out_class`.
 */
enum RclarcStatus rclarc_model_predict(const struct RclarcModel *model,
                                       const double *x,
                                       size_t x_len,
                                       size_t *out_class);

/**
 * Bundles a model with a saved direction bank and correction mode.
 *
 * `bank_path` is a bank JSON written by `fit-cav`; `data_path` and
 * `manifest_path` are the dataset pair the bank's negative ids refer to
 * (needed to rebuild the anchor activations); `probes_path` is a probe map
 * JSON written by `fit-probe` and may be null for modes that do not use
 * probes. `mode` is one of `vanilla`, `pclarc`, `rclarc-class`,
 * `rclarc-artifact`, `rclarc-both`. Returns null on failure.
 */
struct RclarcCorrector *rclarc_corrector_load(const struct RclarcModel *model,
                                              const char *bank_path,
                                              const char *data_path,
                                              const char *manifest_path,
                                              const char *probes_path,
                                              const char *mode);

/**
 * Releases a corrector handle. Null is ignored.
 */
void rclarc_corrector_free(struct RclarcCorrector *corrector);

/**
 * Number of directions in the corrector's bank; 0 if `corrector` is null.
 */
size_t rclarc_corrector_bank_len(const struct RclarcCorrector *corrector);

/**
 * Forward pass under the corrector's mode. `logits` must hold exactly
 * `logits_len == output_dim` values. When `applied_count` is non-null it
 * receives the number of directions suppressed for this sample (0 means
 * the output equals the uncorrected forward pass bit for bit).
 */
enum RclarcStatus rclarc_corrector_forward(const struct RclarcCorrector *corrector,
                                           const double *x,
                                           size_t x_len,
                                           double *logits,
                                           size_t logits_len,
                                           size_t *applied_count);

/**
 * Stateless joint suppression: removes from `a` every component along the
 * given directions, measured relative to `anchor`. `directions` is row-major
 * with `n_directions` rows of `dim` values; `a`, `anchor`, and `out` hold
 * `dim` values each. Directions must be nonzero but need not be normalized
 * or orthogonal.
 */
enum RclarcStatus rclarc_project(const double *a,
                                 size_t dim,
                                 const double *directions,
                                 size_t n_directions,
                                 const double *anchor,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

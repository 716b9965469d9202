#ifndef RATIOVR_H
#define RATIOVR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RvrStatus {
  RVR_STATUS_OK = 0,
  RVR_STATUS_NULL_POINTER = 1,
  RVR_STATUS_INVALID_UTF8 = 2,
  /**
   * Rejected input data or configuration.
   */
  RVR_STATUS_VALIDATION = 3,
  RVR_STATUS_IO = 4,
  RVR_STATUS_INTERNAL = 5,
  RVR_STATUS_PANIC = 6,
} RvrStatus;

/**
 * Unit records collected for one experiment.
 */
typedef struct RvrExperiment RvrExperiment;

/**
 * A trained gradient-boosted tree ensemble.
 */
typedef struct RvrModel RvrModel;

typedef struct RvrGbdtParams {
  size_t n_trees;
  double learning_rate;
  size_t max_depth;
  size_t min_samples_leaf;
  size_t max_bins;
  double subsample;
  uint64_t seed;
} RvrGbdtParams;

/**
 * Raw and variance-reduced test of one experiment.
 */
typedef struct RvrAnalysis {
  double z_raw;
  double p_raw;
  double ate_raw;
  double z_reduced;
  double p_reduced;
  double ate_reduced;
  double variance_reduction_pct;
  double linearization_c;
  size_t n_treatment;
  size_t n_control;
} RvrAnalysis;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rvr_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on the same thread.
 */
const char *rvr_last_error(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void rvr_string_free(char *s);

double rvr_std_normal_cdf(double x);

/**
 * Two-tailed p-value of a z statistic.
 */
double rvr_p_value(double z);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum RvrStatus rvr_sample_size_reduction(double relative_z, double *out);

/**
 * Per-unit Delta-method variance of a ratio from component moments.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum RvrStatus rvr_delta_variance(double mean_num,
                                  double var_num,
                                  double mean_den,
                                  double var_den,
                                  double cov,
                                  double *out);

/**
 * # Safety
 * `control` must be a NUL-terminated string and `out` valid for writes.
 */
enum RvrStatus rvr_experiment_new(const char *control, struct RvrExperiment **out);

/**
 * Appends one unit. Pass NaN for a missing pre-period value; `features` may
 * be NULL when `n_features` is 0.
 *
 * # Safety
 * `experiment` must be a live handle, the strings NUL-terminated and
 * `features` readable for `n_features` values.
 */
enum RvrStatus rvr_experiment_add_unit(struct RvrExperiment *experiment,
                                       const char *unit_id,
                                       const char *variant,
                                       double numerator,
                                       double denominator,
                                       double pre_numerator,
                                       double pre_denominator,
                                       const double *features,
                                       size_t n_features);

/**
 * Loads unit records from a CSV or JSONL file. `format` is "csv", "jsonl"
 * or NULL to infer it from the extension.
 *
 * # Safety
 * Strings must be NUL-terminated (`format` may be NULL) and `out` valid for
 * writes.
 */
enum RvrStatus rvr_experiment_load(const char *path,
                                   const char *format,
                                   const char *control,
                                   struct RvrExperiment **out);

/**
 * Number of units held, or 0 for NULL.
 *
 * # Safety
 * `experiment` must be NULL or a live handle.
 */
size_t rvr_experiment_len(const struct RvrExperiment *experiment);

/**
 * # Safety
 * `experiment` must be NULL or a handle not yet freed.
 */
void rvr_experiment_free(struct RvrExperiment *experiment);

/**
 * Tests the retention ratio of an experiment, raw and reduced with
 * `method` ("raw", "pre", "pred" or "union"). `folds` is the number of
 * cross-fitting folds for the GBDT predictions; `params` may be NULL for
 * the defaults.
 *
 * # Safety
 * `experiment` must be a live handle, `method` NUL-terminated, `params`
 * NULL or readable and `out` valid for writes.
 */
enum RvrStatus rvr_analyze(const struct RvrExperiment *experiment,
                           const char *method,
                           size_t folds,
                           const struct RvrGbdtParams *params,
                           double alpha,
                           struct RvrAnalysis *out);

struct RvrGbdtParams rvr_gbdt_params_default(void);

/**
 * Fits a model on a row-major `n_rows x n_cols` matrix.
 *
 * # Safety
 * `features` must hold `n_rows * n_cols` values, `targets` `n_rows`
 * values, `params` be NULL or readable, and `out` valid for writes.
 */
enum RvrStatus rvr_gbdt_fit(const double *features,
                            size_t n_rows,
                            size_t n_cols,
                            const double *targets,
                            const struct RvrGbdtParams *params,
                            struct RvrModel **out);

/**
 * # Safety
 * `model` must be a live handle, `features` hold `n_rows * n_cols` values
 * and `out` be writable for `n_rows` values.
 */
enum RvrStatus rvr_gbdt_predict(const struct RvrModel *model,
                                const double *features,
                                size_t n_rows,
                                size_t n_cols,
                                double *out);

/**
 * Serializes a model; free the string with [`rvr_string_free`].
 *
 * # Safety
 * `model` must be a live handle and `out` valid for writes.
 */
enum RvrStatus rvr_gbdt_to_json(const struct RvrModel *model, char **out);

/**
 * # Safety
 * `json` must be NUL-terminated and `out` valid for writes.
 */
enum RvrStatus rvr_gbdt_from_json(const char *json, struct RvrModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void rvr_gbdt_free(struct RvrModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RATIOVR_H */

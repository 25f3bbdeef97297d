/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef MTDML_H
#define MTDML_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum MtdmlStatus {
  MTDML_STATUS_OK = 0,
  // Null pointer, invalid UTF-8 or an inconsistent length argument.
  MTDML_STATUS_INVALID_ARGUMENT = 1,
  // Bad configuration or degenerate input.
  MTDML_STATUS_CONFIG = 2,
  // File, parse or serialization failure.
  MTDML_STATUS_IO = 3,
  // Non-finite values or an invalid internal state.
  MTDML_STATUS_NUMERIC = 4,
  // Shapes disagree with the model or dataset.
  MTDML_STATUS_DIMENSION = 5,
  // The input lacks something the operation needs.
  MTDML_STATUS_CAPABILITY = 6,
  // A Rust panic was caught at the boundary.
  MTDML_STATUS_PANIC = 7,
} MtdmlStatus;

typedef struct MtdmlDataset MtdmlDataset;

typedef struct MtdmlEnsemble MtdmlEnsemble;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *mtdml_last_error(void);

// Draws a synthetic dataset. `dgp_json` may be null for defaults.
//
// # Safety
// `dgp_json` must be null or a NUL-terminated string; `out` must be writable.
enum MtdmlStatus mtdml_dataset_generate(const char *dgp_json, struct MtdmlDataset **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MtdmlStatus mtdml_dataset_load_csv(const char *path, struct MtdmlDataset **out);

// # Safety
// `ds` must come from this library; `path` must be a NUL-terminated string.
enum MtdmlStatus mtdml_dataset_save_csv(const struct MtdmlDataset *ds, const char *path);

// Row count, covariate count and treatment count. Any output may be null.
//
// # Safety
// `ds` must come from this library; non-null outputs must be writable.
enum MtdmlStatus mtdml_dataset_shape(const struct MtdmlDataset *ds,
                                     size_t *n_rows,
                                     size_t *n_covariates,
                                     size_t *n_treatments);

// # Safety
// `ds` must be null or come from this library, and must not be used afterwards.
void mtdml_dataset_free(struct MtdmlDataset *ds);

// Fits the cross-fitted ensemble. `train_json` may be null for defaults.
//
// # Safety
// `ds` must come from this library; `train_json` null or NUL-terminated;
// `out` writable.
enum MtdmlStatus mtdml_train(const struct MtdmlDataset *ds,
                             const char *train_json,
                             struct MtdmlEnsemble **out);

// # Safety
// `ens` must come from this library; `path` must be NUL-terminated.
enum MtdmlStatus mtdml_ensemble_save(const struct MtdmlEnsemble *ens, const char *path);

// # Safety
// `path` must be NUL-terminated; `out` writable.
enum MtdmlStatus mtdml_ensemble_load(const char *path, struct MtdmlEnsemble **out);

// Covariate and treatment counts the ensemble expects. Either output may be null.
//
// # Safety
// `ens` must come from this library; non-null outputs must be writable.
enum MtdmlStatus mtdml_ensemble_dims(const struct MtdmlEnsemble *ens,
                                     size_t *n_covariates,
                                     size_t *n_treatments);

// Per-row outcome change from `t_from` to `t_to`, written to `out[n_rows]`.
// `x` is `n_rows x n_covariates`; both treatment vectors have `n_treatments` entries.
//
// # Safety
// All arrays must hold the stated number of elements.
enum MtdmlStatus mtdml_ensemble_uplift(const struct MtdmlEnsemble *ens,
                                       const double *x,
                                       size_t n_rows,
                                       size_t n_covariates,
                                       const double *t_from,
                                       const double *t_to,
                                       size_t n_treatments,
                                       double *out);

// Final outcome prediction into `y_out[n_rows]` and, when `kappa_out` is not
// null, sensitivities into `kappa_out[n_rows * n_treatments]`.
//
// # Safety
// All arrays must hold the stated number of elements.
enum MtdmlStatus mtdml_ensemble_predict(const struct MtdmlEnsemble *ens,
                                        const double *x,
                                        size_t n_rows,
                                        size_t n_covariates,
                                        const double *t,
                                        size_t n_treatments,
                                        double *y_out,
                                        double *kappa_out);

// # Safety
// `ens` must be null or come from this library, and must not be used afterwards.
void mtdml_ensemble_free(struct MtdmlEnsemble *ens);

// Copies the dataset's covariates, treatments and outcomes into caller
// buffers sized from [`mtdml_dataset_shape`]. Any output may be null.
//
// # Safety
// Non-null outputs must hold `n*d`, `n*k_t` and `n` doubles respectively.
enum MtdmlStatus mtdml_dataset_copy(const struct MtdmlDataset *ds,
                                    double *x_out,
                                    double *t_out,
                                    double *y_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTDML_H */

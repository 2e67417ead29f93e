#ifndef SPECTREE_H
#define SPECTREE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpectreeStatus {
  SPECTREE_STATUS_OK = 0,
  SPECTREE_STATUS_NULL_POINTER = 1,
  SPECTREE_STATUS_INVALID_ARGUMENT = 2,
  SPECTREE_STATUS_IO = 3,
  SPECTREE_STATUS_PARSE = 4,
  SPECTREE_STATUS_CONFIG = 5,
  SPECTREE_STATUS_NUMERICAL = 6,
  SPECTREE_STATUS_DIMENSION = 7,
  SPECTREE_STATUS_PANIC = 8,
} SpectreeStatus;

/**
 * Opaque handle to the draws of one chain.
 */
typedef struct SpectreeDraws SpectreeDraws;

/**
 * Opaque panel handle.
 */
typedef struct SpectreePanel SpectreePanel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *spectree_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *spectree_version(void);

/**
 * Loads a panel from series CSV, covariates CSV and schema JSON files.
 *
 * # Safety
 * Path arguments must be NUL-terminated strings; `out` must be writable.
 */
enum SpectreeStatus spectree_panel_load(const char *series_path,
                                        const char *covariates_path,
                                        const char *schema_path,
                                        bool demean_series,
                                        struct SpectreePanel **out);

/**
 * Generates a simulated (demeaned) panel. When `truth_log` is non-null it
 * receives the `L x N` true log spectra in row-major order and
 * `truth_len` must equal `L * N`.
 *
 * # Safety
 * `setting` must be a NUL-terminated string, `out` writable, and
 * `truth_log` either null or valid for `truth_len` doubles.
 */
enum SpectreeStatus spectree_simulate(const char *setting,
                                      size_t n_series,
                                      size_t series_len,
                                      uint64_t seed,
                                      struct SpectreePanel **out,
                                      double *truth_log,
                                      size_t truth_len);

/**
 * Panel dimensions: series count `L`, length `T`, covariates `P` and
 * Fourier frequencies `N`. Any output pointer may be null.
 *
 * # Safety
 * `panel` must be a live handle; non-null outputs must be writable.
 */
enum SpectreeStatus spectree_panel_dims(const struct SpectreePanel *panel,
                                        size_t *n_series,
                                        size_t *series_len,
                                        size_t *n_covariates,
                                        size_t *n_freqs);

/**
 * # Safety
 * `panel` must be null or a handle not yet freed.
 */
void spectree_panel_free(struct SpectreePanel *panel);

/**
 * Runs the sampler. `config_json` holds a sampler configuration document
 * (the `sampler` section of a run config) or is null for the defaults.
 *
 * # Safety
 * `panel` must be a live handle, `config_json` null or NUL-terminated, and
 * `out` writable.
 */
enum SpectreeStatus spectree_fit(const struct SpectreePanel *panel,
                                 const char *config_json,
                                 struct SpectreeDraws **out);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum SpectreeStatus spectree_draws_read(const char *path, struct SpectreeDraws **out);

/**
 * # Safety
 * `draws` must be a live handle and `path` NUL-terminated.
 */
enum SpectreeStatus spectree_draws_write(const struct SpectreeDraws *draws, const char *path);

/**
 * Kept draws, subjects `L`, frequencies `N` and covariates `P`. Any output
 * pointer may be null.
 *
 * # Safety
 * `draws` must be a live handle; non-null outputs must be writable.
 */
enum SpectreeStatus spectree_draws_dims(const struct SpectreeDraws *draws,
                                        size_t *n_draws,
                                        size_t *n_subjects,
                                        size_t *n_freqs,
                                        size_t *n_covariates);

/**
 * Fourier frequencies of the fitted panel; `len` must equal `N`.
 *
 * # Safety
 * `draws` must be a live handle and `out` valid for `len` doubles.
 */
enum SpectreeStatus spectree_draws_freqs(const struct SpectreeDraws *draws,
                                         double *out,
                                         size_t len);

/**
 * Posterior mean log spectrum of every subject, row-major `L x N`.
 *
 * # Safety
 * `draws` must be a live handle and `out` valid for `len` doubles.
 */
enum SpectreeStatus spectree_draws_posterior_mean(const struct SpectreeDraws *draws,
                                                  double *out,
                                                  size_t len);

/**
 * Log spectrum of kept draw `draw_index` at covariate vector `omega`
 * (length `P`, categorical entries as level indices); `out` has length `N`.
 *
 * # Safety
 * `draws` must be a live handle, `omega` valid for `p` doubles and `out`
 * valid for `len` doubles.
 */
enum SpectreeStatus spectree_draws_predict(const struct SpectreeDraws *draws,
                                           size_t draw_index,
                                           const double *omega,
                                           size_t p,
                                           double *out,
                                           size_t len);

/**
 * Posterior inclusion probability of each covariate; `len` must equal `P`.
 *
 * # Safety
 * `draws` must be a live handle and `out` valid for `len` doubles.
 */
enum SpectreeStatus spectree_draws_inclusion(const struct SpectreeDraws *draws,
                                             double *out,
                                             size_t len);

/**
 * Posterior mean ALE of the LF/HF ratio for covariate `covariate` over `h`
 * equal-count intervals. Tied partition points merge, so the number of
 * reported points `h_used <= h` is written to `*h_used`; `points` and
 * `mean` must each hold at least `h` doubles.
 *
 * # Safety
 * `draws` must be a live handle; `points` and `mean` valid for `h`
 * doubles; `h_used` writable.
 */
enum SpectreeStatus spectree_draws_ale_lfhf(const struct SpectreeDraws *draws,
                                            size_t covariate,
                                            size_t h,
                                            double *points,
                                            double *mean,
                                            size_t *h_used);

/**
 * # Safety
 * `draws` must be null or a handle not yet freed.
 */
void spectree_draws_free(struct SpectreeDraws *draws);

/**
 * Mean squared difference of two `rows x cols` row-major log-spectrum
 * matrices.
 *
 * # Safety
 * `estimated` and `truth` must each be valid for `rows * cols` doubles and
 * `out` writable.
 */
enum SpectreeStatus spectree_mse_log(const double *estimated,
                                     const double *truth,
                                     size_t rows,
                                     size_t cols,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECTREE_H */

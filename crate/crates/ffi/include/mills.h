#ifndef MILLS_H
#define MILLS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes.
 */
typedef enum MillsStatus {
  MILLS_STATUS_OK = 0,
  MILLS_STATUS_NULL_POINTER = 1,
  MILLS_STATUS_INVALID_INPUT = 2,
  MILLS_STATUS_NUMERICAL = 3,
  MILLS_STATUS_IO = 4,
  MILLS_STATUS_OUT_OF_RANGE = 5,
  MILLS_STATUS_PANIC = 6,
  MILLS_STATUS_OTHER = 7,
} MillsStatus;

/**
 * Opaque dataset handle.
 */
typedef struct MillsDataset MillsDataset;

/**
 * Opaque handle to posterior draws of either model.
 */
typedef struct MillsDraws MillsDraws;

/**
 * Mixture hyperparameters.
 */
typedef struct MillsHyper {
  size_t components;
  double sigma2;
  double a0;
  double a1;
} MillsHyper;

/**
 * Chain settings.
 */
typedef struct MillsSamplerConfig {
  size_t iterations;
  size_t burn_in;
  size_t thin;
  uint64_t seed;
  uint64_t chain;
  bool parallel;
} MillsSamplerConfig;

/**
 * Posterior mean and 2.5% / 97.5% quantiles.
 */
typedef struct MillsInterval {
  double mean;
  double q025;
  double q975;
} MillsInterval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mills_version(void);

/**
 * Message of the last failed call on this thread. Valid until the next
 * failing call on the same thread; never null.
 */
const char *mills_last_error(void);

struct MillsHyper mills_hyper_default(void);

struct MillsSamplerConfig mills_sampler_config_default(void);

/**
 * Load a CSV dataset; `levels_json` may be null.
 *
 * # Safety
 * `path` and a non-null `levels_json` must be NUL-terminated strings;
 * `out` must be writable.
 */
enum MillsStatus mills_dataset_load(const char *path,
                                    const char *levels_json,
                                    struct MillsDataset **out);

/**
 * Build a dataset from `n * p` row-major 1-based codes.
 *
 * # Safety
 * `levels` must hold `p` values, `codes` `n * p` values (may be null when
 * `n == 0`); `out` must be writable.
 */
enum MillsStatus mills_dataset_from_codes(size_t n,
                                          size_t p,
                                          const size_t *levels,
                                          const uint16_t *codes,
                                          struct MillsDataset **out);

/**
 * Simulate one of the four scenarios with default knobs.
 *
 * # Safety
 * `out` must be writable.
 */
enum MillsStatus mills_simulate(uint8_t scenario,
                                size_t n,
                                size_t p,
                                size_t d,
                                uint64_t seed,
                                struct MillsDataset **out);

/**
 * # Safety
 * `data` must be a live dataset handle or null.
 */
size_t mills_dataset_n(const struct MillsDataset *data);

/**
 * # Safety
 * `data` must be a live dataset handle or null.
 */
size_t mills_dataset_p(const struct MillsDataset *data);

/**
 * Write the dataset as CSV.
 *
 * # Safety
 * `data` must be a live handle and `path` a NUL-terminated string.
 */
enum MillsStatus mills_dataset_write_csv(const struct MillsDataset *data, const char *path);

/**
 * # Safety
 * `data` must come from this library and not be used afterwards.
 */
void mills_dataset_free(struct MillsDataset *data);

/**
 * Run one mixture chain.
 *
 * # Safety
 * `data`, `hyper` and `config` must be valid pointers; `out` writable.
 */
enum MillsStatus mills_fit(const struct MillsDataset *data,
                           const struct MillsHyper *hyper,
                           const struct MillsSamplerConfig *config,
                           struct MillsDraws **out);

/**
 * Run one latent class chain with `classes` classes.
 *
 * # Safety
 * `data` and `config` must be valid pointers; `out` writable.
 */
enum MillsStatus mills_fit_lca(const struct MillsDataset *data,
                               size_t classes,
                               const struct MillsSamplerConfig *config,
                               struct MillsDraws **out);

/**
 * Load a draw directory written by the CLI or [`mills_draws_save`].
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` writable.
 */
enum MillsStatus mills_draws_load(const char *dir, struct MillsDraws **out);

/**
 * Save freshly fitted draws; `binary` selects the binary format.
 *
 * # Safety
 * `draws` must be a live handle and `dir` a NUL-terminated string.
 */
enum MillsStatus mills_draws_save(const struct MillsDraws *draws, const char *dir, bool binary);

/**
 * Number of kept draws (0 for a null handle).
 *
 * # Safety
 * `draws` must be a live handle or null.
 */
size_t mills_draws_count(const struct MillsDraws *draws);

/**
 * Posterior mean bivariate table of variables `j < k` (1-based), written
 * row-major into `table` of capacity `len`.
 *
 * # Safety
 * `draws` must be a live handle; `table` must hold `len` doubles.
 */
enum MillsStatus mills_draws_bivariate_mean(const struct MillsDraws *draws,
                                            size_t j,
                                            size_t k,
                                            double *table,
                                            size_t len);

/**
 * Posterior summary of the Cramér-V of variables `j < k` (1-based).
 *
 * # Safety
 * `draws` must be a live handle; `out` writable.
 */
enum MillsStatus mills_draws_cramer_v(const struct MillsDraws *draws,
                                      size_t j,
                                      size_t k,
                                      struct MillsInterval *out);

/**
 * # Safety
 * `draws` must come from this library and not be used afterwards.
 */
void mills_draws_free(struct MillsDraws *draws);

/**
 * Cramér-V of a row-major `d1 x d2` probability table.
 *
 * # Safety
 * `table` must hold `d1 * d2` doubles; `out` writable.
 */
enum MillsStatus mills_cramer_v(const double *table, size_t d1, size_t d2, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MILLS_H */

#ifndef FEDMAE_H
#define FEDMAE_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedmaeStatus {
  FEDMAE_STATUS_OK = 0,
  FEDMAE_STATUS_NULL_POINTER = 1,
  FEDMAE_STATUS_INVALID_ARGUMENT = 2,
  FEDMAE_STATUS_CONFIG = 3,
  FEDMAE_STATUS_ABORTED = 4,
  FEDMAE_STATUS_IO = 5,
  FEDMAE_STATUS_FAILED = 6,
  FEDMAE_STATUS_BUFFER_TOO_SMALL = 7,
  FEDMAE_STATUS_PANIC = 8,
} FedmaeStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct FedmaeConfig FedmaeConfig;

/**
 * Opaque model checkpoint.
 */
typedef struct FedmaeModel FedmaeModel;

typedef struct FedmaeWilcoxon {
  size_t n;
  double w_plus;
  double w_minus;
  double w;
  double p;
  bool reject;
  bool exact;
  bool no_evidence;
} FedmaeWilcoxon;

typedef struct FedmaeCost {
  double bidirectional_bytes_per_round_per_client;
  double total_bytes;
  double mb_per_client_per_round;
  double total_gb;
} FedmaeCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message on this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length excluding the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fedmae_last_error(char *buf, size_t len);

struct FedmaeConfig *fedmae_config_default(void);

/**
 * Parses config text. On success `*out` receives a handle owned by the caller.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum FedmaeStatus fedmae_config_parse(const char *text, struct FedmaeConfig **out);

/**
 * Sets one key as a config line would; the config is unchanged on error.
 *
 * # Safety
 * `cfg` must come from this library; `key` and `value` must be NUL-terminated.
 */
enum FedmaeStatus fedmae_config_set(struct FedmaeConfig *cfg, const char *key, const char *value);

/**
 * Writes the canonical config text into `buf`. `*needed` receives the
 * size including the NUL; `BufferTooSmall` when it exceeds `len`.
 *
 * # Safety
 * `cfg` must come from this library; `buf` must point to `len` writable
 * bytes or be null with `len == 0`; `needed` must be writable.
 */
enum FedmaeStatus fedmae_config_echo(const struct FedmaeConfig *cfg,
                                     char *buf,
                                     size_t len,
                                     size_t *needed);

/**
 * # Safety
 * `cfg` must be null or a handle from this library not yet freed.
 */
void fedmae_config_free(struct FedmaeConfig *cfg);

/**
 * Runs every configured method for every replication and writes the
 * report tree under `out_dir`. `Aborted` when any run failed; the other
 * rows are still written.
 *
 * # Safety
 * `cfg` must come from this library; `out_dir` must be NUL-terminated.
 */
enum FedmaeStatus fedmae_run_ablation(const struct FedmaeConfig *cfg, const char *out_dir);

/**
 * Loads a checkpoint written by the simulator.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum FedmaeStatus fedmae_model_load(const char *path, struct FedmaeModel **out);

/**
 * # Safety
 * `model` must be null or a live handle from this library.
 */
size_t fedmae_model_param_count(const struct FedmaeModel *model);

/**
 * Image side length of the model, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle from this library.
 */
size_t fedmae_model_image_size(const struct FedmaeModel *model);

/**
 * # Safety
 * `model` must be a live handle; `buf` must point to `len` writable values.
 */
enum FedmaeStatus fedmae_model_copy_params(const struct FedmaeModel *model,
                                           double *buf,
                                           size_t len);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void fedmae_model_free(struct FedmaeModel *model);

/**
 * Example-weighted mean of `n` row-major updates of length `dim`.
 * `examples` may be null for equal weights.
 *
 * # Safety
 * `weights` must hold `n * dim` values, `examples` null or `n` values,
 * `out` `dim` writable values.
 */
enum FedmaeStatus fedmae_aggregate_fedavg(const double *weights,
                                          size_t n,
                                          size_t dim,
                                          const size_t *examples,
                                          double *out);

/**
 * Coordinate-wise median when `trim_fraction` is 0, trimmed mean otherwise.
 *
 * # Safety
 * `weights` must hold `n * dim` values and `out` `dim` writable values.
 */
enum FedmaeStatus fedmae_aggregate_median(const double *weights,
                                          size_t n,
                                          size_t dim,
                                          double trim_fraction,
                                          double *out);

/**
 * Row index chosen by Krum with `f` tolerated Byzantine clients.
 *
 * # Safety
 * `weights` must hold `n * dim` values; `selected` must be writable.
 */
enum FedmaeStatus fedmae_krum_select(const double *weights,
                                     size_t n,
                                     size_t dim,
                                     size_t f,
                                     size_t *selected);

/**
 * Two-sided Wilcoxon signed-rank test on `n` paired scores.
 *
 * # Safety
 * `a` and `b` must hold `n` values; `out` must be writable.
 */
enum FedmaeStatus fedmae_wilcoxon(const double *a,
                                  const double *b,
                                  size_t n,
                                  double alpha,
                                  struct FedmaeWilcoxon *out);

/**
 * Per-round and total traffic for exchanging a model of `params` values.
 *
 * # Safety
 * `out` must be writable.
 */
enum FedmaeStatus fedmae_comm_cost(double params,
                                   double bytes_per_param,
                                   size_t rounds,
                                   size_t clients_per_round,
                                   struct FedmaeCost *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDMAE_H */

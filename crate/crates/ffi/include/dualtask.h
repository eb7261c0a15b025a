#ifndef DUALTASK_H
#define DUALTASK_H

/* Generated by cbindgen from the dualtask-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum DtStatus {
  DT_STATUS_OK = 0,
  DT_STATUS_NULL_POINTER = 1,
  DT_STATUS_INVALID_UTF8 = 2,
  DT_STATUS_CONFIG = 3,
  DT_STATUS_DOMAIN = 4,
  DT_STATUS_IO = 5,
  DT_STATUS_REPORT = 6,
  DT_STATUS_NUMERICAL = 7,
  DT_STATUS_DEGENERATE = 8,
  DT_STATUS_INVARIANT = 9,
  DT_STATUS_INTERNAL = 10,
} DtStatus;

/**
 * Motion bucket of a clip.
 */
typedef enum DtMotionCategory {
  DT_MOTION_CATEGORY_DISCARDED = 0,
  DT_MOTION_CATEGORY_SMALL = 1,
  DT_MOTION_CATEGORY_MEDIUM = 2,
  DT_MOTION_CATEGORY_LARGE = 3,
} DtMotionCategory;

/**
 * Parsed experiment configuration.
 */
typedef struct DtConfig DtConfig;

/**
 * Manifest of a finished run.
 */
typedef struct DtManifest DtManifest;

/**
 * Quadratic task pair.
 */
typedef struct DtTaskPair DtTaskPair;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *dt_last_error(void);

/**
 * Library version as a static string; do not free.
 */
const char *dt_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer returned through a `char **` output of
 * this library, not yet freed.
 */
void dt_string_free(char *s);

/**
 * Parses a TOML experiment config (strict: unknown keys are errors).
 *
 * # Safety
 * `text` must be a nul-terminated string; `out` a valid pointer.
 */
enum DtStatus dt_config_parse(const char *text, struct DtConfig **out);

/**
 * Canonical TOML form of a config, as an owned string.
 *
 * # Safety
 * `cfg` must be a live handle; `out` a valid pointer.
 */
enum DtStatus dt_config_canonical(const struct DtConfig *cfg, char **out);

/**
 * Overrides the first seed and the sweep size.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum DtStatus dt_config_set_seeds(struct DtConfig *cfg, uint64_t seed, uint64_t seeds);

/**
 * # Safety
 * `cfg` must be null or a live handle; it is invalid afterwards.
 */
void dt_config_free(struct DtConfig *cfg);

/**
 * Runs the configured experiment into `out_dir`. A run whose assertions
 * fail still returns `Ok` with a manifest; check `dt_manifest_exit_code`.
 *
 * # Safety
 * `cfg` must be a live handle, `out_dir` a nul-terminated path and `out`
 * a valid pointer.
 */
enum DtStatus dt_run_experiment(const struct DtConfig *cfg,
                                const char *out_dir,
                                struct DtManifest **out);

/**
 * Reads the manifest of a finished run (file or run directory).
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` a valid pointer.
 */
enum DtStatus dt_manifest_read(const char *path, struct DtManifest **out);

/**
 * 0 when every assertion passed, 1 otherwise; -1 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
int dt_manifest_exit_code(const struct DtManifest *m);

/**
 * Number of failed assertions; 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t dt_manifest_failure_count(const struct DtManifest *m);

/**
 * Recorded result value for `key` as an owned string; `Report` if absent.
 *
 * # Safety
 * `m` must be a live handle, `key` nul-terminated, `out` valid.
 */
enum DtStatus dt_manifest_result(const struct DtManifest *m, const char *key, char **out);

/**
 * Full manifest text as an owned string.
 *
 * # Safety
 * `m` must be a live handle; `out` a valid pointer.
 */
enum DtStatus dt_manifest_text(const struct DtManifest *m, char **out);

/**
 * # Safety
 * `m` must be null or a live handle; it is invalid afterwards.
 */
void dt_manifest_free(struct DtManifest *m);

/**
 * Mean over paired telemetry series of `metric(a) − metric(b)`, where
 * `metric` is `phi_final_band`, `norm_floor` or `trend`.
 *
 * # Safety
 * String arguments must be nul-terminated; `mean_diff` valid.
 */
enum DtStatus dt_compare_runs(const char *run_a,
                              const char *run_b,
                              const char *metric,
                              double *mean_diff);

/**
 * Builds a task pair from `n` eigenvalues per task.
 *
 * # Safety
 * `eig1` and `eig2` must point to `n` doubles; `out` valid.
 */
enum DtStatus dt_task_pair_new(const double *eig1,
                               const double *eig2,
                               size_t n,
                               uint64_t basis_seed,
                               double perturbation_scale,
                               struct DtTaskPair **out);

/**
 * # Safety
 * `pair` must be null or a live handle; it is invalid afterwards.
 */
void dt_task_pair_free(struct DtTaskPair *pair);

/**
 * Mixture gradient descent from `z0` (length = pair dimension). Writes
 * `steps + 1` inner products to `inner_out` and, if non-null, cosines to
 * `cosine_out`. `stochastic` non-zero switches tasks at random, seeded by
 * `seed`.
 *
 * # Safety
 * `pair` must be live; `z0` must hold the pair dimension; output arrays
 * must hold `steps + 1` doubles.
 */
enum DtStatus dt_mixture_gd(const struct DtTaskPair *pair,
                            double p,
                            double eta,
                            const double *z0,
                            size_t steps,
                            int stochastic,
                            uint64_t seed,
                            double *inner_out,
                            double *cosine_out);

/**
 * Closed-form inner product at step `t` for a commuting pair.
 *
 * # Safety
 * `pair` must be live; `z0` must hold the pair dimension; `out` valid.
 */
enum DtStatus dt_closed_form_inner_product(const struct DtTaskPair *pair,
                                           double p,
                                           double eta,
                                           const double *z0,
                                           size_t t,
                                           double *out);

/**
 * Video/image attention cost ratio `T²` and expected per-step cost.
 *
 * # Safety
 * `ratio` and `expected` must be valid pointers.
 */
enum DtStatus dt_expected_step_cost(size_t tokens_per_frame,
                                    size_t latent_frames,
                                    double p,
                                    double *ratio,
                                    double *expected);

/**
 * Buckets a clip by foreground and background mean flow (pixels).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DtStatus dt_categorize_motion(double fg, double bg, enum DtMotionCategory *out);

/**
 * Projects each of two length-`n` gradients off the other when they
 * conflict.
 *
 * # Safety
 * Inputs must hold `n` doubles; outputs must have room for `n` doubles.
 */
enum DtStatus dt_pcgrad_project(const double *g1,
                                const double *g2,
                                size_t n,
                                double *out1,
                                double *out2);

/**
 * `(1−p)·g̃_img + p·g̃_vid` after projection; `projected` (nullable) is set
 * to 1 when the pair conflicted.
 *
 * # Safety
 * Inputs must hold `n` doubles; `out` must have room for `n` doubles.
 */
enum DtStatus dt_pcgrad_combine(const double *g_img,
                                const double *g_vid,
                                size_t n,
                                double p,
                                double *out,
                                int *projected);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALTASK_H */

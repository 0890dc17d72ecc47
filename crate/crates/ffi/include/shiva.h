/* C interface for the shiva differentiable top-k selection library. */

#ifndef SHIVA_H
#define SHIVA_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum ShivaStatus {
  SHIVA_STATUS_OK = 0,
  SHIVA_STATUS_NULL_POINTER = 1,
  SHIVA_STATUS_INVALID_ARGUMENT = 2,
  SHIVA_STATUS_DIMENSION_MISMATCH = 3,
  SHIVA_STATUS_IO_ERROR = 4,
  SHIVA_STATUS_UTF8_ERROR = 5,
  SHIVA_STATUS_INTERNAL_ERROR = 6,
} ShivaStatus;

/**
 * Opaque retention-ratio policy handle.
 */
typedef struct ShivaPolicy ShivaPolicy;

/**
 * Opaque token-importance router handle.
 */
typedef struct ShivaRouter ShivaRouter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *shiva_version(void);

/**
 * Descending soft ranks of `scores` (length `n`) at temperature
 * `tau_rank`, written to `ranks_out` (length `n`).
 *
 * # Safety
 * `scores` and `ranks_out` must point to `n` readable/writable doubles.
 */
enum ShivaStatus shiva_soft_rank(const double *scores,
                                 uintptr_t n,
                                 double tau_rank,
                                 double *ranks_out);

/**
 * Inclusion probabilities for `scores` at continuous budget `k`:
 * sigmoid((k - rank_i) / tau_eff), tau_eff = tau_sel * n when
 * `normalized` is nonzero.
 *
 * # Safety
 * `scores` and `probs_out` must point to `n` readable/writable doubles.
 */
enum ShivaStatus shiva_inclusion_probs(const double *scores,
                                       uintptr_t n,
                                       double tau_rank,
                                       double k,
                                       double tau_sel,
                                       bool normalized,
                                       double *probs_out);

/**
 * Deterministic top-k partition of `n` scores. Writes the selected
 * indices (ascending, exactly `k`) to `selected_out` and, when
 * `rejected_out` is non-null, the complement (exactly `n - k`).
 *
 * # Safety
 * `scores` must point to `n` doubles; `selected_out` to `k` and
 * `rejected_out` (if non-null) to `n - k` writable `size_t`.
 */
enum ShivaStatus shiva_hard_topk(const double *scores,
                                 uintptr_t n,
                                 uintptr_t k,
                                 uintptr_t *selected_out,
                                 uintptr_t *rejected_out);

/**
 * Creates a router scoring `dim_in`-dimensional tokens with optional
 * time/semantic context inputs (`dim_t` / `dim_c`; 0 disables) and the
 * given bottleneck width. Parameters are seeded deterministically.
 *
 * # Safety
 * `out` must be a valid pointer to a `ShivaRouter*` slot.
 */
enum ShivaStatus shiva_router_new(uintptr_t dim_in,
                                  uintptr_t dim_t,
                                  uintptr_t dim_c,
                                  uintptr_t bottleneck,
                                  uint64_t seed,
                                  struct ShivaRouter **out);

/**
 * # Safety
 * `router` must be a handle from `shiva_router_new`/`shiva_router_load_json`
 * that has not been freed; passing null is a no-op.
 */
void shiva_router_free(struct ShivaRouter *router);

/**
 * Total learnable parameter count of the router.
 *
 * # Safety
 * `router` must be a live handle; `count_out` a valid out-pointer.
 */
enum ShivaStatus shiva_router_param_count(const struct ShivaRouter *router, uintptr_t *count_out);

/**
 * Scores `n` tokens (row-major `n x dim_in`). Context pointers may be
 * null when the router was built without them (or to contribute zero);
 * `l_emb`, when non-null, must have bottleneck width. Scores are written
 * to `scores_out` (length `n`).
 *
 * # Safety
 * All non-null pointers must reference buffers of the documented sizes.
 */
enum ShivaStatus shiva_router_score(const struct ShivaRouter *router,
                                    const double *tokens,
                                    uintptr_t n,
                                    const double *t_emb,
                                    const double *c_emb,
                                    const double *l_emb,
                                    double *scores_out);

/**
 * Saves the router parameters as versioned JSON at `path`.
 *
 * # Safety
 * `router` must be a live handle and `path` a NUL-terminated string.
 */
enum ShivaStatus shiva_router_save_json(const struct ShivaRouter *router, const char *path);

/**
 * Loads router parameters saved by `shiva_router_save_json`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` a valid out-pointer.
 */
enum ShivaStatus shiva_router_load_json(const char *path, struct ShivaRouter **out);

/**
 * Creates a fresh policy over `n_layers` layers anchored at `r_target`;
 * a fresh policy emits exactly `r_target` everywhere.
 *
 * # Safety
 * `out` must be a valid pointer to a `ShivaPolicy*` slot.
 */
enum ShivaStatus shiva_policy_new(uintptr_t n_layers,
                                  double r_target,
                                  uint64_t seed,
                                  struct ShivaPolicy **out);

/**
 * # Safety
 * `policy` must be a handle from `shiva_policy_new` that has not been
 * freed; passing null is a no-op.
 */
void shiva_policy_free(struct ShivaPolicy *policy);

/**
 * Deterministic (noise-free) retention ratio at (t, layer).
 *
 * # Safety
 * `policy` must be a live handle; `r_out` a valid out-pointer.
 */
enum ShivaStatus shiva_policy_ratio(const struct ShivaPolicy *policy,
                                    double t,
                                    uintptr_t layer,
                                    double *r_out);

/**
 * Compiles the policy lookup table over `n_steps` timesteps into
 * `grid_out` (row-major `n_steps x n_layers`). Entries equal direct
 * policy evaluation bit-exactly.
 *
 * # Safety
 * `t_steps` must point to `n_steps` doubles and `grid_out` to
 * `n_steps * n_layers` writable doubles.
 */
enum ShivaStatus shiva_policy_compile_lut(const struct ShivaPolicy *policy,
                                          const double *t_steps,
                                          uintptr_t n_steps,
                                          double *grid_out);

/**
 * Compiles the lookup table and writes it as CSV (rows = timesteps,
 * columns = layers) to `path`.
 *
 * # Safety
 * `t_steps` must point to `n_steps` doubles; `path` must be
 * NUL-terminated.
 */
enum ShivaStatus shiva_policy_lut_to_csv(const struct ShivaPolicy *policy,
                                         const double *t_steps,
                                         uintptr_t n_steps,
                                         const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHIVA_H */

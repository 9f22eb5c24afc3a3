#ifndef URBANCTX_H
#define URBANCTX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum UcStatus {
  UC_STATUS_OK = 0,
  UC_STATUS_NULL_POINTER = 1,
  // Input failed validation (bad value, shape, or file contents).
  UC_STATUS_INVALID_ARGUMENT = 2,
  UC_STATUS_IO = 3,
  // Computation failed for valid input.
  UC_STATUS_INTERNAL = 4,
  UC_STATUS_PANIC = 5,
} UcStatus;

// A Mondrian conformal predictive system.
typedef struct UcCpsModel UcCpsModel;

// One predictive distribution over service time in seconds.
typedef struct UcDistribution UcDistribution;

// A lognormal location-scale boosted model.
typedef struct UcLssModel UcLssModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *uc_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *uc_version(void);

// Load an LSS model from a checkpoint or from a `fit` model export.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum UcStatus uc_lss_load(const char *path, struct UcLssModel **out);

// Number of features the model expects.
//
// # Safety
// `model` must come from [`uc_lss_load`] or be NULL.
size_t uc_lss_n_features(const struct UcLssModel *model);

// Predict the distribution for one feature vector.
//
// # Safety
// `model` from [`uc_lss_load`]; `x` points to `n` doubles; `out` valid.
enum UcStatus uc_lss_predict(const struct UcLssModel *model,
                             const double *x,
                             size_t n,
                             struct UcDistribution **out);

// # Safety
// `model` must come from [`uc_lss_load`] or be NULL; it must not be used after.
void uc_lss_free(struct UcLssModel *model);

// Load a conformal model from a `fit` export or a bare model object.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum UcStatus uc_cps_load(const char *path, struct UcCpsModel **out);

// # Safety
// `model` from [`uc_cps_load`]; `x` points to `n` doubles; `out` valid.
enum UcStatus uc_cps_predict(const struct UcCpsModel *model,
                             const double *x,
                             size_t n,
                             struct UcDistribution **out);

// # Safety
// `model` must come from [`uc_cps_load`] or be NULL; it must not be used after.
void uc_cps_free(struct UcCpsModel *model);

// Lognormal with log-scale location `mu` and scale `sigma > 0`.
//
// # Safety
// `out` must be a valid pointer.
enum UcStatus uc_lognormal_new(double mu, double sigma, struct UcDistribution **out);

// # Safety
// `dist` from a constructor above; `out` valid.
enum UcStatus uc_dist_cdf(const struct UcDistribution *dist, double y, double *out);

// Generalized inverse CDF for `0 < tau < 1`.
//
// # Safety
// `dist` from a constructor above; `out` valid.
enum UcStatus uc_dist_quantile(const struct UcDistribution *dist, double tau, double *out);

// Continuous ranked probability score against observation `y` seconds.
//
// # Safety
// `dist` from a constructor above; `out` valid.
enum UcStatus uc_dist_crps(const struct UcDistribution *dist, double y, double *out);

// Central interval holding `coverage` of the mass.
//
// # Safety
// `dist` from a constructor above; `lo` and `hi` valid.
enum UcStatus uc_dist_interval(const struct UcDistribution *dist,
                               double coverage,
                               double *lo,
                               double *hi);

// # Safety
// `dist` from a constructor above or NULL; it must not be used after.
void uc_dist_free(struct UcDistribution *dist);

// Axial coordinates of the hexagon holding (`lat`, `lon`) in the
// tessellation centred at (`origin_lat`, `origin_lon`) with edge `edge_m`.
//
// # Safety
// `q` and `r` must be valid pointers.
enum UcStatus uc_point_to_cell(double origin_lat,
                               double origin_lon,
                               double edge_m,
                               double lat,
                               double lon,
                               int32_t *q,
                               int32_t *r);

// Pinball loss of prediction `yhat` at level `tau`.
//
// # Safety
// `out` must be a valid pointer.
enum UcStatus uc_pinball(double y, double yhat, double tau, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* URBANCTX_H */

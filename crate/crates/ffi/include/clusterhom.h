#ifndef CLUSTERHOM_H
#define CLUSTERHOM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ChStatus {
  CH_STATUS_OK = 0,
  CH_STATUS_NULL_POINTER = 1,
  CH_STATUS_INVALID_ARGUMENT = 2,
  CH_STATUS_NON_CONVERGENCE = 3,
  CH_STATUS_CHECK_FAILED = 4,
  CH_STATUS_IO = 5,
  CH_STATUS_PANIC = 6,
} ChStatus;

/**
 * Point sample with radius and Bernoulli marks.
 */
typedef struct ChConfiguration ChConfiguration;

/**
 * Point sample on a periodic box.
 */
typedef struct ChSample ChSample;

/**
 * Grid, phases, mass parameter, direction and tolerance.
 */
typedef struct ChSetup ChSetup;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *ch_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ch_version(void);

/**
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum ChStatus ch_sample_poisson(double intensity,
                                size_t dim,
                                double side,
                                uint64_t seed,
                                struct ChSample **out);

/**
 * Matérn type-I hardcore thinning of a Poisson process.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum ChStatus ch_sample_hardcore_poisson(double intensity,
                                         double min_dist,
                                         size_t dim,
                                         double side,
                                         uint64_t seed,
                                         struct ChSample **out);

/**
 * Saturated random sequential adsorption of balls of `radius`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum ChStatus ch_sample_random_parking(double radius,
                                       size_t dim,
                                       double side,
                                       uint64_t seed,
                                       struct ChSample **out);

/**
 * Sample from `n` points given as `n * dim` consecutive coordinates.
 *
 * # Safety
 * `coords` must point to `n * dim` readable doubles; `out` as above.
 */
enum ChStatus ch_sample_from_points(size_t dim,
                                    double side,
                                    const double *coords,
                                    size_t n,
                                    struct ChSample **out);

/**
 * Number of points, 0 for NULL.
 *
 * # Safety
 * `sample` must be NULL or a live handle.
 */
size_t ch_sample_len(const struct ChSample *sample);

/**
 * Copies the points as `len * 3` doubles (unused coordinates are zero).
 *
 * # Safety
 * `out` must have room for `capacity` doubles.
 */
enum ChStatus ch_sample_points(const struct ChSample *sample, double *out, size_t capacity);

/**
 * # Safety
 * `sample` must be NULL or a handle not yet freed.
 */
void ch_sample_free(struct ChSample *sample);

/**
 * Attaches radius-`radius` balls and uniforms drawn from `seed`; marks are
 * set at `p0`.
 *
 * # Safety
 * `sample` must be a live handle; `out` writable.
 */
enum ChStatus ch_attach_marks(const struct ChSample *sample,
                              double radius,
                              double p0,
                              uint64_t seed,
                              struct ChConfiguration **out);

/**
 * Number of inclusions, 0 for NULL.
 *
 * # Safety
 * `config` must be NULL or a live handle.
 */
size_t ch_configuration_len(const struct ChConfiguration *config);

/**
 * Writes 1 for every inclusion marked at level `p`, else 0.
 *
 * # Safety
 * `flags` must have room for `capacity` bytes.
 */
enum ChStatus ch_configuration_marked(const struct ChConfiguration *config,
                                      double p,
                                      uint8_t *flags,
                                      size_t capacity);

/**
 * # Safety
 * `config` must be NULL or a handle not yet freed.
 */
void ch_configuration_free(struct ChConfiguration *config);

/**
 * Numerical setup on a `cells^dim` grid of the box `[0, side)^dim`. `xi`
 * holds `dim` components and is normalized.
 *
 * # Safety
 * `xi` must point to `dim` doubles; `out` writable.
 */
enum ChStatus ch_setup_new(size_t dim,
                           double side,
                           size_t cells,
                           double alpha,
                           double beta,
                           double t,
                           const double *xi,
                           double tol,
                           struct ChSetup **out);

/**
 * # Safety
 * `setup` must be NULL or a handle not yet freed.
 */
void ch_setup_free(struct ChSetup *setup);

/**
 * `ξ·A_T ξ` of the medium with the inclusions marked at level `p`.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum ChStatus ch_homogenized_entry(const struct ChConfiguration *config,
                                   const struct ChSetup *setup,
                                   double p,
                                   double *out);

/**
 * `k`-th cluster coefficient at marks frozen at `p0`, by `formula` 0, 1 or 2.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum ChStatus ch_delta_k(const struct ChConfiguration *config,
                         const struct ChSetup *setup,
                         size_t k,
                         int formula,
                         double p0,
                         double r_cut,
                         double *out);

/**
 * Clausius-Mossotti slope `αd(β − α)/(β + α(d − 1))`.
 *
 * # Safety
 * `out` writable.
 */
enum ChStatus ch_electric_cm_slope(double alpha, double beta, size_t dim, double *out);

/**
 * Elastic constants `α`, `β` of the first-order formula.
 *
 * # Safety
 * `alpha` and `beta` writable.
 */
enum ChStatus ch_elastic_cm(double bulk,
                            double bulk_prime,
                            double shear,
                            double shear_prime,
                            size_t dim,
                            double *alpha,
                            double *beta);

/**
 * Runs an experiment from its JSON config without writing files. The report
 * is returned in `*report` (free with [`ch_string_free`]) whenever the run
 * completes, including when a band fails (`ChStatus::CheckFailed`).
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `report` writable.
 */
enum ChStatus ch_run_experiment_json(const char *config_json, char **report);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void ch_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLUSTERHOM_H */

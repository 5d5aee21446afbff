#ifndef HYBRID_VO_H
#define HYBRID_VO_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum HvoStatus {
  HVO_STATUS_OK = 0,
  HVO_STATUS_NULL_POINTER = 1,
  HVO_STATUS_INVALID_ARGUMENT = 2,
  HVO_STATUS_CONFIG = 3,
  HVO_STATUS_TRACKING_LOST = 4,
  HVO_STATUS_DEGENERATE = 5,
  HVO_STATUS_NOT_RUN = 6,
  HVO_STATUS_BUFFER_TOO_SMALL = 7,
  HVO_STATUS_INTERNAL = 8,
  HVO_STATUS_PANIC = 9,
} HvoStatus;

/**
 * Which trajectory to read from a finished run.
 */
typedef enum HvoTrajectory {
  /**
   * One pose per processed frame.
   */
  HVO_TRAJECTORY_HIGH_FREQUENCY = 0,
  /**
   * One pose per keyframe after pose-graph optimisation.
   */
  HVO_TRAJECTORY_OPTIMIZED = 1,
  HVO_TRAJECTORY_GROUND_TRUTH = 2,
} HvoTrajectory;

/**
 * Alignment applied before computing ATE.
 */
typedef enum HvoAlignMode {
  HVO_ALIGN_MODE_SIM3 = 0,
  HVO_ALIGN_MODE_SE3 = 1,
  HVO_ALIGN_MODE_NONE = 2,
} HvoAlignMode;

/**
 * Opaque pipeline handle: a validated configuration and, once run, its
 * outputs.
 */
typedef struct HvoPipeline HvoPipeline;

/**
 * One timestamped world-from-camera pose, quaternion in Hamilton order
 * with the scalar last as in TUM files.
 */
typedef struct HvoPose {
  double timestamp;
  double tx;
  double ty;
  double tz;
  double qx;
  double qy;
  double qz;
  double qw;
} HvoPose;

/**
 * `x -> scale * R * x + t` with `R` row-major.
 */
typedef struct HvoSim3 {
  double scale;
  double rotation[9];
  double translation[3];
} HvoSim3;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `capacity`. Returns the full message length in bytes,
 * excluding the terminator.
 *
 * # Safety
 * `buffer` must be null or writable for `capacity` bytes.
 */
size_t hvo_last_error_message(char *buffer, size_t capacity);

/**
 * Creates a pipeline from TOML configuration text. `seed` overrides the
 * configured seed when `override_seed` is non-zero.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string and `out` writable.
 */
enum HvoStatus hvo_pipeline_create(const char *config_toml,
                                   uint64_t seed,
                                   int32_t override_seed,
                                   struct HvoPipeline **out);

/**
 * Simulates the configured scenario and runs the pipeline over it in
 * deterministic mode. A lost track returns [`HvoStatus::TrackingLost`];
 * the trajectories up to that point remain readable.
 *
 * # Safety
 * `pipeline` must come from [`hvo_pipeline_create`].
 */
enum HvoStatus hvo_pipeline_run(struct HvoPipeline *pipeline);

/**
 * Number of poses in a trajectory of a finished run.
 *
 * # Safety
 * `pipeline` must come from [`hvo_pipeline_create`] and `len` be writable.
 */
enum HvoStatus hvo_pipeline_trajectory_len(const struct HvoPipeline *pipeline,
                                           enum HvoTrajectory which,
                                           size_t *len);

/**
 * Copies a trajectory of a finished run into `poses`. `written` receives
 * the number of poses copied.
 *
 * # Safety
 * `poses` must be writable for `capacity` elements and `written` writable.
 */
enum HvoStatus hvo_pipeline_trajectory_copy(const struct HvoPipeline *pipeline,
                                            enum HvoTrajectory which,
                                            struct HvoPose *poses,
                                            size_t capacity,
                                            size_t *written);

/**
 * Copies the run's metrics as `key=value` lines, NUL-terminated.
 * `needed` receives the full length in bytes excluding the terminator.
 *
 * # Safety
 * `buffer` must be null or writable for `capacity` bytes; `needed` writable.
 */
enum HvoStatus hvo_pipeline_metrics(const struct HvoPipeline *pipeline,
                                    char *buffer,
                                    size_t capacity,
                                    size_t *needed);

/**
 * Releases a pipeline. Null is ignored.
 *
 * # Safety
 * `pipeline` must come from [`hvo_pipeline_create`] and not be used after.
 */
void hvo_pipeline_free(struct HvoPipeline *pipeline);

/**
 * Least-squares similarity taking `src` onto `dst`; both hold `n` points
 * as packed xyz triples.
 *
 * # Safety
 * `src` and `dst` must be readable for `3 * n` doubles, `out` writable.
 */
enum HvoStatus hvo_umeyama(const double *src, const double *dst, size_t n, struct HvoSim3 *out);

/**
 * Translation RMSE of `estimate` against `ground_truth` after alignment,
 * pairing poses whose timestamps differ by at most `max_gap` seconds.
 *
 * # Safety
 * The pose arrays must be readable for their lengths and `out` writable.
 */
enum HvoStatus hvo_ate_rmse(const struct HvoPose *estimate,
                            size_t estimate_len,
                            const struct HvoPose *ground_truth,
                            size_t ground_truth_len,
                            enum HvoAlignMode mode,
                            double max_gap,
                            double *out);

/**
 * Pixel standard deviation of an observation with prediction confidence
 * `confidence` at pixel (`x`, `y`) in a `width` by `height` image.
 *
 * # Safety
 * `out` must be writable.
 */
enum HvoStatus hvo_adaptive_sigma(double confidence,
                                  double x,
                                  double y,
                                  double width,
                                  double height,
                                  double sigma_b,
                                  double k_p,
                                  double delta,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYBRID_VO_H */

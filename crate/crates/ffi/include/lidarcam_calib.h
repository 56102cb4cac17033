#ifndef LIDARCAM_CALIB_H
#define LIDARCAM_CALIB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum LcStatus {
  LC_STATUS_OK = 0,
  // A required pointer argument was null.
  LC_STATUS_NULL_POINTER = 1,
  LC_STATUS_INVALID_ARGUMENT = 2,
  // File could not be read or written.
  LC_STATUS_IO = 3,
  // File contents are malformed.
  LC_STATUS_FORMAT = 4,
  // Rough synchronization failed, e.g. no motion onset.
  LC_STATUS_ROUGH_SYNC = 5,
  // Too little or degenerate motion for the closed-form stage.
  LC_STATUS_EXCITATION = 6,
  // The refinement could not build or solve its problem.
  LC_STATUS_REFINEMENT = 7,
  // Simulation scenario cannot produce a usable dataset.
  LC_STATUS_SCENARIO = 8,
  // Internal error; the library panicked.
  LC_STATUS_INTERNAL = 9,
} LcStatus;

// Which stages `lc_calibrate` runs.
typedef enum LcMode {
  LC_MODE_FULL = 0,
  LC_MODE_COARSE_ONLY = 1,
  LC_MODE_TAU_ONLY = 2,
} LcMode;

// Pipeline configuration.
typedef struct LcConfig LcConfig;

// Trajectories, feature tracks and intrinsics for one calibration.
typedef struct LcDataset LcDataset;

// Calibration outcome.
typedef struct LcResult LcResult;

// Piecewise-geodesic trajectory.
typedef struct LcTrajectory LcTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until
// the next failing call on the same thread.
const char *lc_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *lc_version(void);

// Builds a trajectory from `count` knots: `timestamps[i]` and
// `poses[7 * i .. 7 * i + 7]`.
//
// # Safety
// `timestamps` must hold `count` doubles, `poses` `7 * count` doubles.
enum LcStatus lc_trajectory_new(const double *timestamps,
                                const double *poses,
                                size_t count,
                                const char *clock,
                                struct LcTrajectory **out);

// Loads a trajectory file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum LcStatus lc_trajectory_load(const char *path, struct LcTrajectory **out);

// Number of knots.
//
// # Safety
// `traj` must be a live handle or null.
size_t lc_trajectory_len(const struct LcTrajectory *traj);

// Pose at time `t`, written as seven doubles to `pose_out`.
//
// # Safety
// `traj` must be a live handle and `pose_out` hold 7 doubles.
enum LcStatus lc_trajectory_interpolate(const struct LcTrajectory *traj,
                                        double t,
                                        double *pose_out);

// # Safety
// `traj` must be a handle from this library or null; it is invalid afterwards.
void lc_trajectory_free(struct LcTrajectory *traj);

// Default configuration.
//
// # Safety
// `out` must be writable.
enum LcStatus lc_config_new(struct LcConfig **out);

// Defaults overridden by a `key = value` file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum LcStatus lc_config_load(const char *path, struct LcConfig **out);

// Sets one configuration key, as in the config file.
//
// # Safety
// `config` must be a live handle; `key` and `value` NUL-terminated strings.
enum LcStatus lc_config_set(struct LcConfig *config, const char *key, const char *value);

// # Safety
// `config` must be a handle from this library or null; it is invalid afterwards.
void lc_config_free(struct LcConfig *config);

// Loads the four calibration input files. `ground_truth` may be null.
//
// # Safety
// Paths must be NUL-terminated strings and `out` writable.
enum LcStatus lc_dataset_load(const char *lidar_traj,
                              const char *camera_traj,
                              const char *tracks,
                              const char *intrinsics,
                              const char *ground_truth,
                              struct LcDataset **out);

// Simulates a dataset from the `sim.` settings of `config` (defaults if
// null) with the given seed. The dataset keeps its ground truth.
//
// # Safety
// `config` must be a live handle or null; `out` writable.
enum LcStatus lc_dataset_simulate(const struct LcConfig *config,
                                  uint64_t seed,
                                  struct LcDataset **out);

// Writes the dataset as the input files of the command-line tool.
//
// # Safety
// `dataset` must be a live handle and `dir` a NUL-terminated string.
enum LcStatus lc_dataset_save(const struct LcDataset *dataset, const char *dir);

// # Safety
// `dataset` must be a handle from this library or null; it is invalid afterwards.
void lc_dataset_free(struct LcDataset *dataset);

// Runs the calibration. `config` may be null for defaults.
//
// # Safety
// Handles must be live or null as documented; `out` writable.
enum LcStatus lc_calibrate(const struct LcDataset *dataset,
                           const struct LcConfig *config,
                           enum LcMode mode,
                           struct LcResult **out);

// LiDAR-from-camera extrinsic as a row-major 4x4 matrix.
//
// # Safety
// `result` must be a live handle and `matrix_out` hold 16 doubles.
enum LcStatus lc_result_extrinsic_matrix(const struct LcResult *result, double *matrix_out);

// LiDAR-from-camera extrinsic as seven doubles.
//
// # Safety
// `result` must be a live handle and `pose_out` hold 7 doubles.
enum LcStatus lc_result_extrinsic_pose(const struct LcResult *result, double *pose_out);

// Seconds added to camera timestamps to reach the LiDAR clock; NaN for null.
//
// # Safety
// `result` must be a live handle or null.
double lc_result_tau(const struct LcResult *result);

// Monocular scale of the camera trajectory; NaN for null.
//
// # Safety
// `result` must be a live handle or null.
double lc_result_scale(const struct LcResult *result);

// 1 if the refinement met its convergence tolerances, 0 otherwise
// (including coarse-only runs and null).
//
// # Safety
// `result` must be a live handle or null.
int32_t lc_result_converged(const struct LcResult *result);

// Writes the calibration report.
//
// # Safety
// `result` must be a live handle and `path` a NUL-terminated string.
enum LcStatus lc_result_save_report(const struct LcResult *result, const char *path);

// # Safety
// `result` must be a handle from this library or null; it is invalid afterwards.
void lc_result_free(struct LcResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIDARCAM_CALIB_H */

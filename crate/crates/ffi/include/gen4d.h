#ifndef GEN4D_H
#define GEN4D_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Gen4dStatus {
  GEN4D_STATUS_OK = 0,
  GEN4D_STATUS_NULL_POINTER = 1,
  GEN4D_STATUS_INVALID_ARGUMENT = 2,
  GEN4D_STATUS_DIMENSION = 3,
  GEN4D_STATUS_NON_FINITE = 4,
  GEN4D_STATUS_SCHEMA = 5,
  GEN4D_STATUS_IO = 6,
  GEN4D_STATUS_MODEL = 7,
  GEN4D_STATUS_DENOISER = 8,
  GEN4D_STATUS_BUFFER_TOO_SMALL = 9,
  GEN4D_STATUS_PANIC = 10,
} Gen4dStatus;

/**
 * Pipeline configuration.
 */
typedef struct Gen4dConfig Gen4dConfig;

/**
 * Result of a dataset validation.
 */
typedef struct Gen4dReport Gen4dReport;

typedef struct Gen4dDemoSummary {
  size_t clips;
  size_t frames;
  size_t subjects;
} Gen4dDemoSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Null-terminated crate version; static, never freed.
 */
const char *gen4d_version(void);

/**
 * Copies the calling thread's last error message into `buf`.
 * `needed` (optional) receives the size including the terminator.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null; `needed` must be valid or null.
 */
enum Gen4dStatus gen4d_last_error(char *buf, size_t len, size_t *needed);

/**
 * Default configuration.
 */
struct Gen4dConfig *gen4d_config_default(void);

/**
 * Loads a JSON configuration file.
 *
 * # Safety
 * `path` must be a null-terminated string; `out` must be valid.
 */
enum Gen4dStatus gen4d_config_load(const char *path, struct Gen4dConfig **out);

/**
 * # Safety
 * `cfg` must come from this library.
 */
enum Gen4dStatus gen4d_config_set_seed(struct Gen4dConfig *cfg, uint64_t seed);

/**
 * Sets the demo's frames per clip and square frame side.
 *
 * # Safety
 * `cfg` must come from this library.
 */
enum Gen4dStatus gen4d_config_set_demo_size(struct Gen4dConfig *cfg,
                                            size_t frames,
                                            size_t resolution);

/**
 * # Safety
 * `cfg` must come from this library or be null.
 */
void gen4d_config_free(struct Gen4dConfig *cfg);

/**
 * Generates the demo dataset into `out_dir`; relative paths resolve against `root`.
 *
 * # Safety
 * Strings must be null-terminated; `cfg` must come from this library;
 * `summary` must be valid or null.
 */
enum Gen4dStatus gen4d_run_demo(const struct Gen4dConfig *cfg,
                                const char *root,
                                const char *out_dir,
                                struct Gen4dDemoSummary *summary);

/**
 * Checks a dataset on disk. A report with violations is still `Ok`.
 *
 * # Safety
 * `root` must be null-terminated; `out` must be valid.
 */
enum Gen4dStatus gen4d_validate(const char *root, struct Gen4dReport **out);

/**
 * # Safety
 * `report` must come from [`gen4d_validate`] or be null.
 */
size_t gen4d_report_violation_count(const struct Gen4dReport *report);

/**
 * # Safety
 * `report` must come from [`gen4d_validate`] or be null.
 */
size_t gen4d_report_frames_checked(const struct Gen4dReport *report);

/**
 * Copies violation `index` as `location: message`.
 *
 * # Safety
 * `report` must come from [`gen4d_validate`]; `buf` valid for `len` bytes or
 * null; `needed` valid or null.
 */
enum Gen4dStatus gen4d_report_violation(const struct Gen4dReport *report,
                                        size_t index,
                                        char *buf,
                                        size_t len,
                                        size_t *needed);

/**
 * # Safety
 * `report` must come from [`gen4d_validate`] or be null.
 */
void gen4d_report_free(struct Gen4dReport *report);

/**
 * Keypoint accuracy in percent for each threshold.
 *
 * `pred` holds `frames × keypoints × 2` values `(u, v)`, `gt` holds
 * `frames × keypoints × 3` values `(u, v, visible)`; `out` receives
 * `n_thresholds` values.
 *
 * # Safety
 * Every pointer must be valid for the sizes above.
 */
enum Gen4dStatus gen4d_compute_ap(const double *pred,
                                  const double *gt,
                                  size_t frames,
                                  size_t keypoints,
                                  const double *thresholds,
                                  size_t n_thresholds,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEN4D_H */

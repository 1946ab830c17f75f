#ifndef IFMMIN_H
#define IFMMIN_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every API call.
 */
typedef enum IfmminStatus {
  IFMMIN_STATUS_OK = 0,
  /**
   * Bad configuration or bad arguments.
   */
  IFMMIN_STATUS_INVALID = 1,
  /**
   * I/O, serialization, or internal failure.
   */
  IFMMIN_STATUS_FAILED = 2,
  /**
   * A required pointer was null or a string was not valid UTF-8.
   */
  IFMMIN_STATUS_NULL_POINTER = 3,
} IfmminStatus;

/**
 * Opaque run configuration handle.
 */
typedef struct IfmminConfig IfmminConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null if the last
 * call succeeded. The pointer is valid until the next failing call.
 */
const char *ifmmin_last_error(void);

/**
 * Parse key=value configuration text into a new handle. On success the
 * handle is written to `out` and must be released with
 * `ifmmin_config_free`.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum IfmminStatus ifmmin_config_parse(const char *text, struct IfmminConfig **out);

/**
 * Release a config handle. Null is ignored.
 *
 * # Safety
 * `cfg` must be a handle from `ifmmin_config_parse`, not yet freed.
 */
void ifmmin_config_free(struct IfmminConfig *cfg);

/**
 * Generate the configured synthetic dataset and write it as JSONL.
 *
 * # Safety
 * `cfg` must be a live config handle; `path` a valid string.
 */
enum IfmminStatus ifmmin_generate_dataset(const struct IfmminConfig *cfg, const char *path);

/**
 * Stage-1 pretraining: read the dataset, train, write the teacher
 * checkpoint.
 *
 * # Safety
 * `cfg` must be a live config handle; the paths valid strings.
 */
enum IfmminStatus ifmmin_pretrain(const struct IfmminConfig *cfg,
                                  const char *dataset,
                                  const char *checkpoint_out);

/**
 * Stage-2 training against a frozen teacher checkpoint; writes the student
 * checkpoint with the best validation accuracy.
 *
 * # Safety
 * `cfg` must be a live config handle; the paths valid strings.
 */
enum IfmminStatus ifmmin_train(const struct IfmminConfig *cfg,
                               const char *dataset,
                               const char *teacher_checkpoint,
                               const char *checkpoint_out);

/**
 * Evaluate a student checkpoint over every missing-modality condition.
 * On success `report_out` receives a JSON string owned by the caller; free
 * it with `ifmmin_string_free`.
 *
 * # Safety
 * `cfg` must be a live config handle; the paths valid strings; `report_out`
 * a valid pointer.
 */
enum IfmminStatus ifmmin_evaluate(const struct IfmminConfig *cfg,
                                  const char *dataset,
                                  const char *checkpoint,
                                  char **report_out);

/**
 * Free a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not already be freed.
 */
void ifmmin_string_free(char *s);

/**
 * True if `path` holds a readable checkpoint compatible with `cfg`
 * (matching config fingerprint).
 *
 * # Safety
 * `cfg` must be a live config handle; `path` a valid string.
 */
bool ifmmin_checkpoint_matches(const struct IfmminConfig *cfg, const char *path);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* IFMMIN_H */

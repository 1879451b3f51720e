#ifndef LORAGEN_H
#define LORAGEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Condition source of a generator, as seen from C.
 */
typedef enum LgConditionSource {
  LG_CONDITION_SOURCE_SAMPLE_DERIVED = 0,
  LG_CONDITION_SOURCE_DESCRIPTION_DERIVED = 1,
} LgConditionSource;

/**
 * Result code of every fallible call. Values are stable.
 */
typedef enum LgStatus {
  LG_STATUS_OK = 0,
  LG_STATUS_NULL_POINTER = 1,
  LG_STATUS_INVALID_UTF8 = 2,
  LG_STATUS_BUFFER_TOO_SMALL = 3,
  LG_STATUS_PANIC = 4,
  LG_STATUS_DIMENSION = 10,
  LG_STATUS_LENGTH = 11,
  LG_STATUS_INPUT = 12,
  LG_STATUS_CONFIG = 13,
  LG_STATUS_PARSE = 14,
  LG_STATUS_LAYOUT = 15,
  LG_STATUS_TRAINING = 16,
  LG_STATUS_DIVERGENCE = 17,
  LG_STATUS_CONDITION_SOURCE = 18,
  LG_STATUS_DEPENDENCY = 19,
  LG_STATUS_VERSION = 20,
  LG_STATUS_CONTAINER = 21,
  LG_STATUS_IO = 22,
} LgStatus;

/**
 * Run configuration.
 */
typedef struct LgConfig LgConfig;

/**
 * A trained generator with its normalization statistics.
 */
typedef struct LgGenerator LgGenerator;

/**
 * An output directory with its suite and base model loaded. Checkpoints
 * are read on first use per rank.
 */
typedef struct LgWorkspace LgWorkspace;

/**
 * Fixed facts about a loaded generator.
 */
typedef struct LgGeneratorInfo {
  /**
   * Trainable parameters of the CVAE.
   */
  size_t param_count;
  /**
   * Length of one generated adapter vector.
   */
  size_t output_len;
  /**
   * Length of the condition vector it expects.
   */
  size_t condition_len;
  size_t rank;
  size_t n_layers;
  enum LgConditionSource source;
} LgGeneratorInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lg_version(void);

/**
 * Short static name of a status code, such as `"dependency"`.
 */
const char *lg_status_name(enum LgStatus status);

/**
 * Copies the calling thread's last error message, NUL-terminated, into
 * `buf`. Returns the buffer size needed including the NUL; nothing is
 * written when `cap` is smaller than that. The message is empty after a
 * successful call.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes or null with `cap == 0`.
 */
size_t lg_last_error(char *buf, size_t cap);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum LgStatus lg_config_default(struct LgConfig **out);

/**
 * Parses `key = value` text, validated.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LgStatus lg_config_parse(const char *text, struct LgConfig **out);

/**
 * Reads and validates a configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LgStatus lg_config_load(const char *path, struct LgConfig **out);

/**
 * Sets one key and revalidates. On failure the configuration is unchanged.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum LgStatus lg_config_set(struct LgConfig *cfg, const char *key, const char *value);

/**
 * Renders the configuration as `key = value` text.
 *
 * # Safety
 * `cfg` must be a live handle; `buf` valid for `cap` bytes; `written` valid.
 * `*written` receives the size including the NUL.
 */
enum LgStatus lg_config_to_text(const struct LgConfig *cfg, char *buf, size_t cap, size_t *written);

/**
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void lg_config_free(struct LgConfig *cfg);

/**
 * Loads a generator and its normalization sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LgStatus lg_generator_load(const char *path, struct LgGenerator **out);

/**
 * # Safety
 * `generator` must be a live handle and `out` a valid pointer.
 */
enum LgStatus lg_generator_info(const struct LgGenerator *generator, struct LgGeneratorInfo *out);

/**
 * Draws one adapter vector for a raw condition vector with a given seed.
 * The condition is taken to come from the generator's own source.
 *
 * # Safety
 * `condition` valid for `condition_len` floats; `out` valid for `cap`
 * floats; `written` valid.
 */
enum LgStatus lg_generator_sample(const struct LgGenerator *generator,
                                  const float *condition,
                                  size_t condition_len,
                                  uint64_t seed,
                                  float *out,
                                  size_t cap,
                                  size_t *written);

/**
 * Writes `values` as an adapter container laid out for this generator.
 *
 * # Safety
 * `values` valid for `len` floats; `path` a NUL-terminated string.
 */
enum LgStatus lg_generator_save_adapter(const struct LgGenerator *generator,
                                        const float *values,
                                        size_t len,
                                        uint64_t seed,
                                        const char *path);

/**
 * # Safety
 * `generator` must be null or a handle not yet freed.
 */
void lg_generator_free(struct LgGenerator *generator);

/**
 * Reads the flat values of an adapter container.
 *
 * # Safety
 * `path` a NUL-terminated string; `out` valid for `cap` floats; `written` valid.
 */
enum LgStatus lg_adapter_read(const char *path, float *out, size_t cap, size_t *written);

/**
 * Opens the output directory of `cfg`: loads the suite and base model.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum LgStatus lg_workspace_open(const struct LgConfig *cfg, struct LgWorkspace **out);

/**
 * # Safety
 * `ws` must be a live handle and `out` a valid pointer.
 */
enum LgStatus lg_workspace_n_tasks(const struct LgWorkspace *ws, size_t *out);

/**
 * Path of the workspace's generator for the configured rank, source and
 * depth, NUL-terminated.
 *
 * # Safety
 * `ws` a live handle; `buf` valid for `cap` bytes; `written` valid.
 */
enum LgStatus lg_workspace_generator_path(const struct LgWorkspace *ws,
                                          char *buf,
                                          size_t cap,
                                          size_t *written);

/**
 * The condition vector of `task_id` in the generator's source, exactly as
 * the command line builds it.
 *
 * # Safety
 * Handles live; `out` valid for `cap` floats; `written` valid.
 */
enum LgStatus lg_workspace_condition(struct LgWorkspace *ws,
                                     const struct LgGenerator *generator,
                                     size_t task_id,
                                     float *out,
                                     size_t cap,
                                     size_t *written);

/**
 * Condition vector for free text, scaled like the task descriptions.
 *
 * # Safety
 * Handles live; `text` NUL-terminated; `out` valid for `cap` floats;
 * `written` valid.
 */
enum LgStatus lg_workspace_describe(struct LgWorkspace *ws,
                                    size_t rank,
                                    const char *text,
                                    float *out,
                                    size_t cap,
                                    size_t *written);

/**
 * Generates the adapter for `task_id` with the same seed as
 * `loragen generate --task`, so both produce identical values.
 *
 * # Safety
 * Handles live; `out` valid for `cap` floats; `written` valid.
 */
enum LgStatus lg_workspace_generate(struct LgWorkspace *ws,
                                    const struct LgGenerator *generator,
                                    size_t task_id,
                                    float *out,
                                    size_t cap,
                                    size_t *written);

/**
 * Test-split accuracy of the base model with the adapter `values` of the
 * given rank applied.
 *
 * # Safety
 * `ws` live; `values` valid for `len` floats; `accuracy` valid.
 */
enum LgStatus lg_workspace_evaluate(const struct LgWorkspace *ws,
                                    size_t task_id,
                                    size_t rank,
                                    const float *values,
                                    size_t len,
                                    double *accuracy);

/**
 * # Safety
 * `ws` must be null or a handle not yet freed.
 */
void lg_workspace_free(struct LgWorkspace *ws);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LORAGEN_H */

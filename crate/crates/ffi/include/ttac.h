#ifndef TTAC_H
#define TTAC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum TtacStatus {
  TTAC_STATUS_OK = 0,
  TTAC_STATUS_NULL_POINTER = 1,
  TTAC_STATUS_INVALID_ARGUMENT = 2,
  TTAC_STATUS_DIMENSION_MISMATCH = 3,
  TTAC_STATUS_NUMERICAL = 4,
  TTAC_STATUS_PROVENANCE = 5,
  TTAC_STATUS_IO = 6,
  TTAC_STATUS_FORMAT = 7,
  TTAC_STATUS_PANIC = 8,
} TtacStatus;

/**
 * Trained network parameters.
 */
typedef struct TtacModel TtacModel;

/**
 * A streaming adaptation session.
 */
typedef struct TtacSession TtacSession;

/**
 * Per-class source Gaussians.
 */
typedef struct TtacSourceBank TtacSourceBank;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ttac_version(void);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes excluding
 * the terminator, or 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ttac_last_error_message(char *buf, size_t len);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TtacStatus ttac_model_load(const char *path, struct TtacModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`ttac_model_load`] not yet freed.
 */
void ttac_model_free(struct TtacModel *model);

/**
 * Writes the input dimension and class count of a model.
 *
 * # Safety
 * `model` must be a live handle; the out pointers may be null.
 */
enum TtacStatus ttac_model_shape(const struct TtacModel *model, size_t *input_dim, size_t *classes);

/**
 * Predicts labels for `rows` samples without adapting.
 *
 * # Safety
 * `inputs` must hold `rows * cols` doubles and `labels` room for `rows`
 * values.
 */
enum TtacStatus ttac_model_predict(const struct TtacModel *model,
                                   const double *inputs,
                                   size_t rows,
                                   size_t cols,
                                   uint32_t *labels);

/**
 * Loads a source bank.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TtacStatus ttac_source_bank_load(const char *path, struct TtacSourceBank **out);

/**
 * Infers a source bank from the classifier head of `model`.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum TtacStatus ttac_source_bank_infer(const struct TtacModel *model,
                                       uint64_t seed,
                                       struct TtacSourceBank **out);

/**
 * # Safety
 * `bank` must be a live handle and `path` a NUL-terminated string.
 */
enum TtacStatus ttac_source_bank_save(const struct TtacSourceBank *bank, const char *path);

/**
 * # Safety
 * `bank` must be null or a live handle.
 */
void ttac_source_bank_free(struct TtacSourceBank *bank);

/**
 * Starts a session. `method` is one of TTAC++, TEST, ENTROPY_MIN or
 * ST_ONLY. `config_json` may be null for defaults. `bank` may be null for
 * baselines. The model and bank are copied; the caller keeps ownership.
 *
 * # Safety
 * Pointers must be null where allowed or valid otherwise.
 */
enum TtacStatus ttac_session_new(const struct TtacModel *model,
                                 const struct TtacSourceBank *bank,
                                 const char *method,
                                 const char *config_json,
                                 struct TtacSession **out);

/**
 * Predicts an arrival batch, commits the labels, then adapts on it.
 * Samples get sequential ids in arrival order. `truth` may be null; when
 * given it is used only for error reporting.
 *
 * # Safety
 * `inputs` must hold `rows * cols` doubles, `truth` (if not null) and
 * `labels` room for `rows` values.
 */
enum TtacStatus ttac_session_process(struct TtacSession *session,
                                     const double *inputs,
                                     size_t rows,
                                     size_t cols,
                                     const uint32_t *truth,
                                     uint32_t *labels);

/**
 * Adapts on a batch without committing predictions.
 *
 * # Safety
 * `inputs` must hold `rows * cols` doubles.
 */
enum TtacStatus ttac_session_observe(struct TtacSession *session,
                                     const double *inputs,
                                     size_t rows,
                                     size_t cols);

/**
 * Cumulative error over the committed predictions that had truth labels.
 *
 * # Safety
 * `session` must be a live handle and `error` a valid pointer.
 */
enum TtacStatus ttac_session_error_rate(const struct TtacSession *session, double *error);

/**
 * Writes report.json, cumulative_error.csv and predictions.csv into `dir`.
 *
 * # Safety
 * `session` must be a live handle and `dir` a NUL-terminated string.
 */
enum TtacStatus ttac_session_write_report(const struct TtacSession *session, const char *dir);

/**
 * Saves the current adapted parameters as a checkpoint.
 *
 * # Safety
 * `session` must be a live handle and `path` a NUL-terminated string.
 */
enum TtacStatus ttac_session_save_model(const struct TtacSession *session, const char *path);

/**
 * # Safety
 * `session` must be null or a live handle.
 */
void ttac_session_free(struct TtacSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TTAC_H */

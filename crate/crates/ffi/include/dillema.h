#ifndef DILLEMA_H
#define DILLEMA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DILLEMA_STATUS_OK = 0,
  DILLEMA_STATUS_NULL_ARGUMENT = 1,
  DILLEMA_STATUS_INVALID_UTF8 = 2,
  DILLEMA_STATUS_INVALID_ARGUMENT = 3,
  DILLEMA_STATUS_PARSE_FAILED = 4,
  DILLEMA_STATUS_IO = 5,
  DILLEMA_STATUS_EVALUATION = 6,
  DILLEMA_STATUS_OUT_OF_RANGE = 7,
  DILLEMA_STATUS_PANIC = 99,
} DillemaStatus;

typedef enum {
  DILLEMA_STAGE_KEYWORDS = 0,
  DILLEMA_STAGE_ALTERNATIVES = 1,
  DILLEMA_STAGE_COUNTERFACTUAL = 2,
} DillemaStage;

typedef enum {
  DILLEMA_VERDICT_VALID = 0,
  DILLEMA_VERDICT_INVALID = 1,
  DILLEMA_VERDICT_DISCARDED = 2,
} DillemaVerdict;

typedef enum {
  DILLEMA_METAMORPHIC_PASS = 0,
  DILLEMA_METAMORPHIC_FAIL = 1,
  DILLEMA_METAMORPHIC_NO_AUGMENTATIONS = 2,
} DillemaMetamorphic;

/**
 * Class-by-class count matrix; rows are ground truth.
 */
typedef struct DillemaConfusion DillemaConfusion;

/**
 * Binary edge map.
 */
typedef struct DillemaEdgeMap DillemaEdgeMap;

/**
 * Records read from a ledger file.
 */
typedef struct DillemaLedger DillemaLedger;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *dillema_version(void);

/**
 * Message of the last failure on this thread, or null. Free with [`dillema_string_free`].
 */
char *dillema_last_error_message(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void dillema_string_free(char *s);

/**
 * # Safety
 * `data`/`len` must be null or a buffer returned by this library.
 */
void dillema_bytes_free(uint8_t *data, size_t len);

/**
 * Parses one LLM reply for `stage`; on success `*out_json` holds the payload as JSON.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string and `out_json` writable.
 */
DillemaStatus dillema_parse_stage_response(DillemaStage stage, const char *text, char **out_json);

/**
 * Runs edge detection on an encoded image.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` must be writable.
 */
DillemaStatus dillema_canny_png(const uint8_t *data,
                                size_t len,
                                double low_threshold,
                                double high_threshold,
                                double blur_sigma,
                                DillemaEdgeMap **out);

/**
 * # Safety
 * `map` must be a live handle from [`dillema_canny_png`].
 */
size_t dillema_edge_map_width(const DillemaEdgeMap *map);

/**
 * # Safety
 * `map` must be a live handle from [`dillema_canny_png`].
 */
size_t dillema_edge_map_height(const DillemaEdgeMap *map);

/**
 * # Safety
 * `map` must be a live handle from [`dillema_canny_png`].
 */
size_t dillema_edge_map_count(const DillemaEdgeMap *map);

/**
 * Encodes the map as a 1-bit PNG. Free the buffer with [`dillema_bytes_free`].
 *
 * # Safety
 * `map` must be a live handle; `out_data` and `out_len` must be writable.
 */
DillemaStatus dillema_edge_map_to_png(const DillemaEdgeMap *map,
                                      uint8_t **out_data,
                                      size_t *out_len);

/**
 * # Safety
 * `map` must be null or a handle not yet freed.
 */
void dillema_edge_map_free(DillemaEdgeMap *map);

/**
 * Empty `class_count`-square matrix with classes named by id.
 *
 * # Safety
 * `out` must be writable.
 */
DillemaStatus dillema_confusion_new(uint32_t class_count, DillemaConfusion **out);

/**
 * Adds `count` units with ground truth `truth` predicted as `predicted`.
 *
 * # Safety
 * `matrix` must be a live handle.
 */
DillemaStatus dillema_confusion_add(DillemaConfusion *matrix,
                                    uint32_t truth,
                                    uint32_t predicted,
                                    uint64_t count);

/**
 * # Safety
 * `matrix` must be a live handle and `out` writable.
 */
DillemaStatus dillema_confusion_accuracy(const DillemaConfusion *matrix, double *out);

/**
 * Mean IoU over classes present in ground truth or prediction.
 *
 * # Safety
 * `matrix` must be a live handle and `out` writable.
 */
DillemaStatus dillema_confusion_mean_iou(const DillemaConfusion *matrix, double *out);

/**
 * Recall of `class`, i.e. the diagonal of the row-normalized matrix.
 *
 * # Safety
 * `matrix` must be a live handle and `out` writable.
 */
DillemaStatus dillema_confusion_recall(const DillemaConfusion *matrix,
                                       uint32_t class_,
                                       double *out);

/**
 * # Safety
 * `matrix` must be null or a handle not yet freed.
 */
void dillema_confusion_free(DillemaConfusion *matrix);

/**
 * Verdict for one question; `votes[i]` is nonzero for yes.
 *
 * # Safety
 * `votes` must point to `len` readable bytes (or be null with `len == 0`).
 */
DillemaStatus dillema_consensus_verdict(const uint8_t *votes, size_t len, DillemaVerdict *out);

/**
 * `augmented_error * validity_rate`, all fractions in `[0, 1]`.
 *
 * # Safety
 * `out` must be writable.
 */
DillemaStatus dillema_validity_adjusted_error(double original_error,
                                              double augmented_error,
                                              double validity_rate,
                                              double *out);

/**
 * Loads every intact record of a ledger file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` writable.
 */
DillemaStatus dillema_ledger_open(const char *path, DillemaLedger **out);

/**
 * # Safety
 * `ledger` must be a live handle.
 */
size_t dillema_ledger_len(const DillemaLedger *ledger);

/**
 * Record `index` as a JSON string. Free with [`dillema_string_free`].
 *
 * # Safety
 * `ledger` must be a live handle and `out_json` writable.
 */
DillemaStatus dillema_ledger_record_json(const DillemaLedger *ledger,
                                         size_t index,
                                         char **out_json);

/**
 * Checks that every augmentation of record `index` keeps the original ground truth.
 *
 * # Safety
 * `ledger` must be a live handle and `out` writable.
 */
DillemaStatus dillema_ledger_assert_metamorphic(const DillemaLedger *ledger,
                                                size_t index,
                                                DillemaMetamorphic *out);

/**
 * # Safety
 * `ledger` must be null or a handle not yet freed.
 */
void dillema_ledger_free(DillemaLedger *ledger);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DILLEMA_H */

#ifndef LINKEDOUT_H
#define LINKEDOUT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum LoStatus {
  LO_STATUS_OK = 0,
  LO_STATUS_NULL_ARGUMENT = 1,
  LO_STATUS_INVALID_UTF8 = 2,
  LO_STATUS_IO = 3,
  LO_STATUS_FORMAT = 4,
  LO_STATUS_VERSION = 5,
  LO_STATUS_NOT_FOUND = 6,
  LO_STATUS_INVALID_INPUT = 7,
  LO_STATUS_BUFFER_TOO_SMALL = 8,
  LO_STATUS_INTERNAL = 9,
} LoStatus;

/**
 * A store paired with the ranker head of the checkpoint that built it.
 */
typedef struct LoRanker LoRanker;

/**
 * An opened feature store.
 */
typedef struct LoStore LoStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call on the same thread.
 */
const char *lo_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lo_version(void);

/**
 * Opens the store at `path` (the `.lnki` index must sit beside it).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LoStatus lo_store_open(const char *path, struct LoStore **out);

/**
 * Releases a store. Null is ignored.
 *
 * # Safety
 * `store` must come from `lo_store_open` and not be used afterwards.
 */
void lo_store_close(struct LoStore *store);

/**
 * Number of records.
 *
 * # Safety
 * `store` must be a live handle or null (which yields 0).
 */
size_t lo_store_len(const struct LoStore *store);

/**
 * Embedding width.
 *
 * # Safety
 * `store` must be a live handle or null (which yields 0).
 */
size_t lo_store_dim(const struct LoStore *store);

/**
 * Copies the embedding of `item_id` into `out` (capacity `cap` floats).
 *
 * # Safety
 * `store` must be a live handle and `out` must hold `cap` floats.
 */
enum LoStatus lo_store_get(const struct LoStore *store, uint32_t item_id, float *out, size_t cap);

/**
 * Loads a checkpoint and the store it built; fails on a version mismatch.
 *
 * # Safety
 * Both paths must be NUL-terminated strings and `out` a valid pointer.
 */
enum LoStatus lo_ranker_open(const char *store_path,
                             const char *checkpoint_path,
                             struct LoRanker **out);

/**
 * Releases a ranker. Null is ignored.
 *
 * # Safety
 * `ranker` must come from `lo_ranker_open` and not be used afterwards.
 */
void lo_ranker_close(struct LoRanker *ranker);

/**
 * Embedding width of the ranker's catalog.
 *
 * # Safety
 * `ranker` must be a live handle or null (which yields 0).
 */
size_t lo_ranker_dim(const struct LoRanker *ranker);

/**
 * Ranks the whole catalog for a history (oldest first) and writes up to `k`
 * results, best first, into `out_ids` and `out_scores`. `out_len` receives
 * the count written.
 *
 * # Safety
 * `history` must hold `history_len` ids; `out_ids` and `out_scores` must
 * each hold `k` elements; `out_len` must be valid.
 */
enum LoStatus lo_ranker_rank(const struct LoRanker *ranker,
                             const uint32_t *history,
                             size_t history_len,
                             size_t k,
                             uint32_t *out_ids,
                             double *out_scores,
                             size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LINKEDOUT_H */

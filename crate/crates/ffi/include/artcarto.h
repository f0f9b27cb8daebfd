#ifndef ARTCARTO_H
#define ARTCARTO_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ArtcartoStatus {
  ARTCARTO_STATUS_OK = 0,
  ARTCARTO_STATUS_NULL_ARGUMENT = 1,
  ARTCARTO_STATUS_INVALID_UTF8 = 2,
  ARTCARTO_STATUS_IO = 3,
  ARTCARTO_STATUS_PARSE = 4,
  ARTCARTO_STATUS_INVALID_ARGUMENT = 5,
  ARTCARTO_STATUS_NOT_FOUND = 6,
  ARTCARTO_STATUS_INTERNAL = 7,
} ArtcartoStatus;

/**
 * Opaque loaded atlas.
 */
typedef struct ArtcartoAtlas ArtcartoAtlas;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads and validates an atlas JSON file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum ArtcartoStatus artcarto_atlas_load(const char *path, struct ArtcartoAtlas **out);

/**
 * Parses and validates an atlas from a JSON string.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum ArtcartoStatus artcarto_atlas_from_json(const char *json, struct ArtcartoAtlas **out);

/**
 * Releases an atlas handle. Null is ignored.
 *
 * # Safety
 * `atlas` must come from a load function and not be used afterwards.
 */
void artcarto_atlas_free(struct ArtcartoAtlas *atlas);

/**
 * # Safety
 * `atlas` must be a live handle and `out` a valid pointer.
 */
enum ArtcartoStatus artcarto_atlas_region_count(const struct ArtcartoAtlas *atlas, size_t *out);

/**
 * # Safety
 * `atlas` must be a live handle and `out` a valid pointer.
 */
enum ArtcartoStatus artcarto_atlas_artwork_count(const struct ArtcartoAtlas *atlas, size_t *out);

/**
 * Hex SHA-256 of the canonical atlas JSON.
 *
 * # Safety
 * `atlas` must be a live handle and `out` a valid pointer.
 */
enum ArtcartoStatus artcarto_atlas_hash(const struct ArtcartoAtlas *atlas, char **out);

/**
 * Placement of one artwork.
 *
 * # Safety
 * `atlas` must be a live handle, `id` a valid string, `x`/`y` valid pointers.
 */
enum ArtcartoStatus artcarto_atlas_placement(const struct ArtcartoAtlas *atlas,
                                             const char *id,
                                             double *x,
                                             double *y);

/**
 * Level-of-detail selection; writes a JSON array of artwork ids.
 *
 * # Safety
 * `atlas` must be a live handle and `out_json` a valid pointer.
 */
enum ArtcartoStatus artcarto_atlas_lod_select(const struct ArtcartoAtlas *atlas,
                                              double min_x,
                                              double min_y,
                                              double max_x,
                                              double max_y,
                                              double zoom,
                                              size_t budget,
                                              char **out_json);

/**
 * `count^2 / total` for a keyword tagging `count` of `total` artworks.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ArtcartoStatus artcarto_salience_score(uint64_t count, uint64_t total, double *out);

/**
 * Classifies a JSONL event trace against the atlas with default
 * thresholds and bands; writes the report as JSON.
 *
 * # Safety
 * `atlas` must be a live handle, `events_jsonl` a valid string, `out_json`
 * a valid pointer.
 */
enum ArtcartoStatus artcarto_analyze_trace(const struct ArtcartoAtlas *atlas,
                                           const char *events_jsonl,
                                           char **out_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void artcarto_string_free(char *s);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into the library on the same thread.
 */
const char *artcarto_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ARTCARTO_H */

/* C ABI for the lexplain explainability toolkit. */

#ifndef LEXPLAIN_H
#define LEXPLAIN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum LxStatus {
  /**
   * Success.
   */
  LX_STATUS_OK = 0,
  /**
   * Invalid configuration: unknown name, bad parameter.
   */
  LX_STATUS_ERR_CONFIG = 2,
  /**
   * Runtime failure; see `lx_last_error_message`.
   */
  LX_STATUS_ERR_RUNTIME = 3,
  /**
   * A required pointer argument was null.
   */
  LX_STATUS_ERR_NULL_ARGUMENT = 4,
  /**
   * A string argument was not valid UTF-8.
   */
  LX_STATUS_ERR_INVALID_UTF8 = 5,
  /**
   * An index argument was out of range.
   */
  LX_STATUS_ERR_OUT_OF_RANGE = 6,
} LxStatus;

/**
 * Opaque handle over a fitted concept model.
 */
typedef struct LxConceptModel LxConceptModel;

/**
 * Opaque handle over a built-in model and its tokenizer.
 */
typedef struct LxModel LxModel;

/**
 * Opaque handle over one attribution run: one result per explained target.
 */
typedef struct LxResult LxResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread; empty when none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *lx_last_error_message(void);

/**
 * Create a model by registry name (`tiny-gen`, `tiny-cls`, `linear-bow`,
 * `linear-bow-great`). On success writes a handle the caller must release
 * with `lx_model_free`.
 *
 * # Safety
 * `name` must be a nul-terminated string; `out` must be a valid pointer.
 */
enum LxStatus lx_model_new(const char *name, uint64_t seed, struct LxModel **out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must come from `lx_model_new` and not be used afterwards.
 */
void lx_model_free(struct LxModel *model);

/**
 * Explain `text` with the named attribution method at word granularity.
 * Classification models explain the argmax class; generation models produce
 * one result per generated token.
 *
 * # Safety
 * All pointers must be valid; strings nul-terminated.
 */
enum LxStatus lx_attribute(const struct LxModel *model,
                           const char *method,
                           const char *text,
                           uint64_t seed,
                           struct LxResult **out);

/**
 * Number of results (explained targets) in the handle.
 *
 * # Safety
 * `result` must be a live handle from `lx_attribute`.
 */
uintptr_t lx_result_count(const struct LxResult *result);

/**
 * Number of interpretable units in result `index`; 0 when out of range.
 *
 * # Safety
 * `result` must be a live handle from `lx_attribute`.
 */
uintptr_t lx_result_num_units(const struct LxResult *result, uintptr_t index);

/**
 * Attribution score of one unit of one result.
 *
 * # Safety
 * All pointers must be valid.
 */
enum LxStatus lx_result_score(const struct LxResult *result,
                              uintptr_t index,
                              uintptr_t unit,
                              double *out);

/**
 * Display name of one unit; owned by the result handle. Null when out of
 * range.
 *
 * # Safety
 * `result` must be a live handle; the pointer dies with the handle.
 */
const char *lx_result_unit_name(const struct LxResult *result, uintptr_t index, uintptr_t unit);

/**
 * Serialize all results as a JSON array. The caller releases the string with
 * `lx_string_free`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum LxStatus lx_result_to_json(const struct LxResult *result, char **out);

/**
 * Release a result handle. Null is a no-op.
 *
 * # Safety
 * `result` must come from `lx_attribute` and not be used afterwards.
 */
void lx_result_free(struct LxResult *result);

/**
 * Release a string returned by `lx_result_to_json`. Null is a no-op.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void lx_string_free(char *s);

/**
 * Fit a concept model over a corpus: `documents` is an array of
 * `n_documents` nul-terminated strings; activations are collected from
 * `split_point` at word granularity. Release with `lx_concept_free`.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum LxStatus lx_concept_fit(const struct LxModel *model,
                             const char *split_point,
                             const char *kind,
                             uintptr_t n_concepts,
                             const char *const *documents,
                             uintptr_t n_documents,
                             uint64_t seed,
                             struct LxConceptModel **out);

/**
 * Number of concepts in the model.
 *
 * # Safety
 * `model` must be a live concept-model handle.
 */
uintptr_t lx_concept_count(const struct LxConceptModel *model);

/**
 * Save the concept model to `path` in the LXCPT format.
 *
 * # Safety
 * All pointers must be valid.
 */
enum LxStatus lx_concept_save(const struct LxConceptModel *model, const char *path);

/**
 * Load a concept model saved by `lx_concept_save` (or the CLI).
 *
 * # Safety
 * All pointers must be valid.
 */
enum LxStatus lx_concept_load(const char *path, struct LxConceptModel **out);

/**
 * Release a concept-model handle. Null is a no-op.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void lx_concept_free(struct LxConceptModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LEXPLAIN_H */

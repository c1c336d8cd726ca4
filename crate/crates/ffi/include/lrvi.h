#ifndef LRVI_H
#define LRVI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum LrviStatus {
  LRVI_STATUS_OK = 0,
  LRVI_STATUS_NULL_ARGUMENT = 1,
  LRVI_STATUS_INVALID_UTF8 = 2,
  LRVI_STATUS_PARSE = 3,
  LRVI_STATUS_INVALID_ARGUMENT = 4,
  LRVI_STATUS_COMPUTATION = 5,
  LRVI_STATUS_BUFFER_TOO_SMALL = 6,
  LRVI_STATUS_PANIC = 7,
} LrviStatus;

// Inference method for [`lrvi_infer`].
typedef enum LrviMethod {
  LRVI_METHOD_ELIMINATION = 0,
  LRVI_METHOD_SAMPLING = 1,
} LrviMethod;

// A parsed model.
typedef struct LrviModel LrviModel;

// The answer to one query.
typedef struct LrviResult LrviResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call into the library on the same thread.
const char *lrvi_last_error_message(void);

// Library version as a static string.
const char *lrvi_version(void);

// Parses a model in the text or JSON format.
//
// # Safety
// `text` must be a nul-terminated string and `out` a writable pointer.
enum LrviStatus lrvi_model_parse(const char *text, struct LrviModel **out);

// # Safety
// `model` must come from [`lrvi_model_parse`] and not be used afterwards.
void lrvi_model_free(struct LrviModel *model);

// Number of atoms declared by the model.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum LrviStatus lrvi_model_atom_count(const struct LrviModel *model, size_t *out);

// Model serialized as JSON; release with [`lrvi_string_free`].
//
// # Safety
// `model` must be a live handle and `out` writable.
enum LrviStatus lrvi_model_to_json(const struct LrviModel *model, char **out);

// Answers a query (`pmf:A`, `cdf:A:t`, `density:A:x` or `marginal:A,B`).
// `observations` may be null; otherwise it is CSV or JSON text. Fitted
// potentials are not cached across calls.
//
// # Safety
// String arguments must be nul-terminated, `model` a live handle and `out`
// writable.
enum LrviStatus lrvi_infer(const struct LrviModel *model,
                           const char *observations,
                           const char *query,
                           enum LrviMethod method,
                           uint64_t seed,
                           struct LrviResult **out);

// # Safety
// `result` must come from [`lrvi_infer`] and not be used afterwards.
void lrvi_result_free(struct LrviResult *result);

// Copies the query estimate into `buf`. `len` holds the buffer capacity on
// entry and the estimate length on return; a short buffer yields
// `BufferTooSmall` with `len` set to the needed size. Marginal queries have
// an empty estimate.
//
// # Safety
// `result` must be a live handle, `len` writable, and `buf` valid for `*len`
// doubles (it may be null when `*len` is 0).
enum LrviStatus lrvi_result_estimate(const struct LrviResult *result, double *buf, size_t *len);

// Full result document as JSON; release with [`lrvi_string_free`].
//
// # Safety
// `result` must be a live handle and `out` writable.
enum LrviStatus lrvi_result_to_json(const struct LrviResult *result, char **out);

// # Safety
// `s` must come from this library and not be used afterwards.
void lrvi_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LRVI_H */

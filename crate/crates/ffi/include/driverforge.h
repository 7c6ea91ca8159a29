#ifndef DRIVERFORGE_H
#define DRIVERFORGE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DfStatus {
  DF_STATUS_OK = 0,
  DF_STATUS_NULL_ARGUMENT = 1,
  DF_STATUS_INVALID_UTF8 = 2,
  DF_STATUS_PARSE_ERROR = 3,
  DF_STATUS_ANALYSIS_ERROR = 4,
  DF_STATUS_NOT_FOUND = 5,
  DF_STATUS_PANIC = 6,
} DfStatus;

/**
 * A library model built from header and implementation AST dumps.
 */
typedef struct DfLibrary DfLibrary;

/**
 * One harness program parsed against a library.
 */
typedef struct DfProgram DfProgram;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Free with
 * [`df_string_free`].
 */
char *df_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library, or be null.
 */
void df_string_free(char *s);

/**
 * Scheduling energy of an API from its coverage and usage counts.
 */
double df_energy(double coverage, uint64_t seed_count, uint64_t prompt_count, double exponent);

uint64_t df_quality(uint64_t density, uint64_t unique_branches);

/**
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum DfStatus df_estimate_tokens(const char *text, size_t *out);

/**
 * Picks the cheapest default model whose window fits `tokens` and writes
 * the price of `prompt_tokens` + `completion_tokens` in picodollars.
 * `model_id` receives the model name; free it with [`df_string_free`].
 *
 * # Safety
 * Out pointers must be writable.
 */
enum DfStatus df_route_and_price(size_t tokens,
                                 uint64_t prompt_tokens,
                                 uint64_t completion_tokens,
                                 char **model_id,
                                 uint64_t *picodollars);

/**
 * Builds a library model from a header AST dump and an optional
 * implementation dump (for the call graph).
 *
 * # Safety
 * `headers_ast` must be a NUL-terminated string, `impl_ast` one or null;
 * `out` must be writable.
 */
enum DfStatus df_library_from_ast(const char *headers_ast,
                                  const char *impl_ast,
                                  struct DfLibrary **out);

/**
 * # Safety
 * `lib` must come from [`df_library_from_ast`], or be null.
 */
void df_library_free(struct DfLibrary *lib);

/**
 * # Safety
 * `lib` must be a live handle.
 */
size_t df_library_api_count(const struct DfLibrary *lib);

/**
 * JSON array of API names, sorted.
 *
 * # Safety
 * `lib` must be a live handle; `out` must be writable.
 */
enum DfStatus df_library_api_names_json(const struct DfLibrary *lib, char **out);

/**
 * Sets per-function branch totals from a JSON object of name to count.
 *
 * # Safety
 * `lib` must be a live handle and `totals_json` a NUL-terminated string.
 */
enum DfStatus df_library_set_branch_totals(struct DfLibrary *lib, const char *totals_json);

/**
 * Parses a harness program from its AST dump; API calls are resolved
 * against `lib`.
 *
 * # Safety
 * `lib` must be a live handle, the strings NUL-terminated, `out` writable.
 */
enum DfStatus df_program_from_ast(const struct DfLibrary *lib,
                                  const char *ast,
                                  const char *source,
                                  struct DfProgram **out);

/**
 * # Safety
 * `prog` must come from [`df_program_from_ast`], or be null.
 */
void df_program_free(struct DfProgram *prog);

/**
 * Size of the largest group of API calls linked by data flow.
 *
 * # Safety
 * `prog` must be a live handle; `out` must be writable.
 */
enum DfStatus df_program_density(const struct DfProgram *prog, uint64_t *out);

/**
 * JSON object `{"path": [block ids], "calls": [api names]}` for the
 * critical path.
 *
 * # Safety
 * `prog` must be a live handle; `out` must be writable.
 */
enum DfStatus df_program_critical_json(const struct DfProgram *prog, char **out);

/**
 * Statically inferred argument constraints over `count` programs, as a
 * JSON array with one entry per (api, argument).
 *
 * # Safety
 * `progs` must point to `count` live handles; `out` must be writable.
 */
enum DfStatus df_infer_constraints_json(const struct DfProgram *const *progs,
                                        size_t count,
                                        char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRIVERFORGE_H */

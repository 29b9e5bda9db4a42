#ifndef BITRO_H
#define BITRO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define BITRO_OK 0

#define BITRO_ERR_NULL -1

#define BITRO_ERR_INVALID -2

#define BITRO_ERR_FAILED -3

#define BITRO_ERR_PANIC -4

/**
 * Opaque trained-model handle.
 */
typedef struct BitroModel BitroModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the most recent error message on this thread into `buf`
 * (NUL-terminated, truncated to `cap`). Returns the full message
 * length in bytes, or 0 when no error has occurred.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes, or be null (length query).
 */
uintptr_t bitro_last_error(char *buf, uintptr_t cap);

/**
 * Static crate version string, NUL-terminated.
 */
const char *bitro_version(void);

/**
 * Loads a `.bitro` checkpoint from `path` into a fresh handle
 * written to `out`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be a valid
 * pointer to a handle slot.
 */
int bitro_model_load(const char *path, struct BitroModel **out);

/**
 * Releases a handle. Passing null is a no-op.
 *
 * # Safety
 * `model` must be a handle from `bitro_model_load` not yet freed.
 */
void bitro_model_free(struct BitroModel *model);

/**
 * Number of genes the model predicts; 0 on null.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uintptr_t bitro_model_n_genes(const struct BitroModel *model);

/**
 * Raw per-cell feature width the model expects; 0 on null.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uintptr_t bitro_model_feature_dim(const struct BitroModel *model);

/**
 * Copies gene name `index` into `buf` (NUL-terminated, truncated to
 * `cap`). Returns the name's byte length, or 0 when out of range.
 *
 * # Safety
 * `model` must be a live handle; `buf` must point to `cap` writable
 * bytes, or be null (length query).
 */
uintptr_t bitro_model_gene_name(const struct BitroModel *model,
                                uintptr_t index,
                                char *buf,
                                uintptr_t cap);

/**
 * Predicts log1p expression for one bag of cells.
 *
 * `coords` is n_cells×2 row-major slide coordinates, `features` is
 * n_cells×feature_width raw (uncompressed) per-cell features, and
 * `out_expr` receives `bitro_model_n_genes` values.
 *
 * # Safety
 * Pointers must cover the stated extents; `model` must be live.
 */
int bitro_predict(const struct BitroModel *model,
                  uintptr_t n_cells,
                  const double *coords,
                  const double *features,
                  uintptr_t feature_width,
                  double *out_expr);

/**
 * Predicts one bag and redistributes the prediction to its member
 * cells via the attention weights. `out_expr` receives G values and
 * `out_cells` receives n_cells×G row-major values whose per-gene
 * column sums equal `out_expr`.
 *
 * # Safety
 * Pointers must cover the stated extents; `model` must be live.
 */
int bitro_deconvolve(const struct BitroModel *model,
                     uintptr_t n_cells,
                     const double *coords,
                     const double *features,
                     uintptr_t feature_width,
                     double *out_expr,
                     double *out_cells);

/**
 * Pearson correlation between two length-n vectors, written to `out`.
 *
 * # Safety
 * `a`, `b` must cover n values; `out` must be writable.
 */
int bitro_pcc(const double *a, const double *b, uintptr_t n, double *out);

/**
 * Jensen-Shannon divergence (natural log) between two nonnegative
 * length-n vectors, written to `out`.
 *
 * # Safety
 * `a`, `b` must cover n values; `out` must be writable.
 */
int bitro_js(const double *a, const double *b, uintptr_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BITRO_H */

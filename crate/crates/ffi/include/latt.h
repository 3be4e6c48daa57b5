#ifndef LATT_H
#define LATT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes of every fallible call.
typedef enum LattStatus {
  LATT_STATUS_OK = 0,
  LATT_STATUS_NULL_POINTER = 1,
  LATT_STATUS_INVALID_ARGUMENT = 2,
  LATT_STATUS_SHAPE_MISMATCH = 3,
  LATT_STATUS_NON_FINITE = 4,
  LATT_STATUS_UNKNOWN = 5,
  LATT_STATUS_BUFFER_TOO_SMALL = 6,
  LATT_STATUS_INTERNAL = 7,
} LattStatus;

// Hadamard attention variants.
typedef enum LattVariant {
  LATT_VARIANT_STRICT_UNFOLD = 0,
  LATT_VARIANT_SHIFT_CONV = 1,
  LATT_VARIANT_MERGED_CONV = 2,
  LATT_VARIANT_PRODUCTION = 3,
} LattVariant;

// Opaque ELSA parameter set.
typedef struct LattElsa LattElsa;

// Opaque f64 tensor.
typedef struct LattTensor LattTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *latt_last_error(void);

// Static description of a [`LattStatus`] code.
const char *latt_status_str(uint32_t status);

// Copy `data` (product of `dims` elements) into a new tensor.
//
// # Safety
// `dims` must point to `ndim` values and `data` to their product.
enum LattStatus latt_tensor_new(const uintptr_t *dims,
                                uintptr_t ndim,
                                const double *data,
                                struct LattTensor **out);

// # Safety
// `t` must be null or a handle from this library not yet freed.
void latt_tensor_free(struct LattTensor *t);

// Number of dimensions; 0 for null.
//
// # Safety
// `t` must be null or a live handle.
uintptr_t latt_tensor_ndim(const struct LattTensor *t);

// Number of elements; 0 for null.
//
// # Safety
// `t` must be null or a live handle.
uintptr_t latt_tensor_len(const struct LattTensor *t);

// Copy the extents into `dims` (capacity `cap`).
//
// # Safety
// `t` must be a live handle and `dims` must hold `cap` values.
enum LattStatus latt_tensor_dims(const struct LattTensor *t, uintptr_t *dims, uintptr_t cap);

// Copy the elements into `data` (capacity `cap`).
//
// # Safety
// `t` must be a live handle and `data` must hold `cap` values.
enum LattStatus latt_tensor_data(const struct LattTensor *t, double *data, uintptr_t cap);

// Randomly initialized ELSA parameters (ghost head on, lambda = gamma = 1,
// projection biases, full relative tables).
//
// # Safety
// `out` must be valid for writing a handle.
enum LattStatus latt_elsa_new(uintptr_t channels,
                              uintptr_t heads,
                              uintptr_t kernel,
                              uint64_t seed,
                              struct LattElsa **out);

// # Safety
// `e` must be null or a handle from this library not yet freed.
void latt_elsa_free(struct LattElsa *e);

// Full ELSA block on `x: (B, C, H, W)`; `variant` is a [`LattVariant`].
//
// # Safety
// Handles must be live; `out` must be valid for writing a handle.
enum LattStatus latt_elsa_forward(const struct LattElsa *e,
                                  const struct LattTensor *x,
                                  uint32_t variant,
                                  struct LattTensor **out);

// Normalized Hadamard attention `(B, G, K*K, H, W)` for queries and keys;
// `variant` is a [`LattVariant`].
//
// # Safety
// Handles must be live; `out` must be valid for writing a handle.
enum LattStatus latt_hadamard_attention(const struct LattElsa *e,
                                        const struct LattTensor *q,
                                        const struct LattTensor *k,
                                        uint32_t variant,
                                        struct LattTensor **out);

// Unified local operation under a named preset with relative tables drawn
// from `seed`. `size` is the window or kernel size.
//
// # Safety
// Handles must be live, `preset` a NUL-terminated string and `out` valid
// for writing a handle.
enum LattStatus latt_unified_forward(const struct LattTensor *q,
                                     const struct LattTensor *k,
                                     const struct LattTensor *v,
                                     const char *preset,
                                     uintptr_t heads,
                                     uintptr_t size,
                                     uint64_t seed,
                                     struct LattTensor **out);

// Parameter and multiply-accumulate counts of a named architecture.
//
// # Safety
// `arch` must be a NUL-terminated string; `params` and `flops` valid for
// writing.
enum LattStatus latt_count_params_flops(const char *arch,
                                        uintptr_t resolution,
                                        uint64_t *params,
                                        uint64_t *flops);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATT_H */

#ifndef VORT_H
#define VORT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VortStatus {
  VORT_STATUS_OK = 0,
  VORT_STATUS_NULL_POINTER = 1,
  VORT_STATUS_DOMAIN = 2,
  VORT_STATUS_DIMENSION = 3,
  VORT_STATUS_OUT_OF_RANGE = 4,
  VORT_STATUS_CERTIFICATION = 5,
  VORT_STATUS_BUFFER_TOO_SMALL = 6,
  VORT_STATUS_INTERNAL = 7,
} VortStatus;

// Keyed retrieval accumulators with their feature map.
typedef struct VortAccumulators VortAccumulators;

// K fixed-order banks of SOE accumulators over d_v-vectors.
typedef struct VortBankState VortBankState;

// Certified sum-of-exponentials approximation.
typedef struct VortSoe VortSoe;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Pointer to a NUL-terminated message for the last failure on this thread.
// Valid until the next failing call on the same thread.
const char *vort_last_error(void);

// Writes w_0..w_{j_max} into `out` (length ≥ j_max + 1).
//
// # Safety
// `out` must point to `out_len` writable doubles.
enum VortStatus vort_gl_weights(double alpha, size_t j_max, double *out, size_t out_len);

// Smallest-S SOE with max_{j≤T}|ŵ_j − w_j| ≤ eps.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum VortStatus vort_soe_build(double alpha, size_t horizon, double eps, struct VortSoe **out);

// Number of terms S, or 0 for a null handle.
//
// # Safety
// `h` must be null or a live handle.
size_t vort_soe_terms(const struct VortSoe *h);

// Certified max error over j ≤ T.
//
// # Safety
// `h` must be a live handle and `out` writable.
enum VortStatus vort_soe_certified_error(const struct VortSoe *h, double *out);

// Coefficients c_s and rates λ_s = e^{−ξ_s}, each of length S.
//
// # Safety
// `coeffs` and `rates` must each hold `len` writable doubles.
enum VortStatus vort_soe_terms_data(const struct VortSoe *h,
                                    double *coeffs,
                                    double *rates,
                                    size_t len);

// ŵ_0..ŵ_{j_max}.
//
// # Safety
// `out` must hold `out_len` writable doubles.
enum VortStatus vort_soe_weights(const struct VortSoe *h,
                                 size_t j_max,
                                 double *out,
                                 size_t out_len);

// # Safety
// `h` must be null or a handle from [`vort_soe_build`], freed once.
void vort_soe_free(struct VortSoe *h);

// K banks at orders δ + (1−δ)k/K (the last at 1), each an S-term SOE on
// the horizon-derived interval.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum VortStatus vort_bank_state_new(double delta,
                                    size_t banks,
                                    size_t horizon,
                                    double eps,
                                    size_t terms,
                                    size_t d_v,
                                    struct VortBankState **out);

// One token: every bank decays, bank `bank` (1-based) adds v.
//
// # Safety
// `h` must be a live handle and `v` hold `len` doubles.
enum VortStatus vort_bank_step(struct VortBankState *h, const double *v, size_t len, size_t bank);

// M^{(k)}_t for bank `bank` (1-based).
//
// # Safety
// `h` must be a live handle and `out` hold `out_len` writable doubles.
enum VortStatus vort_bank_state_read(const struct VortBankState *h,
                                     size_t bank,
                                     double *out,
                                     size_t out_len);

// # Safety
// `h` must be null or a handle from [`vort_bank_state_new`], freed once.
void vort_bank_state_free(struct VortBankState *h);

// Retrieval accumulators over K banks with a seeded positive random
// feature map R^{d_k} → R^{d_φ}.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum VortStatus vort_accumulators_new(double delta,
                                      size_t banks,
                                      size_t horizon,
                                      double eps,
                                      size_t terms,
                                      size_t d_k,
                                      size_t d_phi,
                                      size_t d_v,
                                      uint64_t seed,
                                      struct VortAccumulators **out);

// Decay every bank, then add (φ(key), value) to bank `bank` (1-based).
//
// # Safety
// `h` must be a live handle; `key` holds `key_len` and `value` `value_len`
// doubles.
enum VortStatus vort_accumulators_step(struct VortAccumulators *h,
                                       const double *key,
                                       size_t key_len,
                                       const double *value,
                                       size_t value_len,
                                       size_t bank);

// Normalised readout for `query` into `out` (length d_v).
//
// # Safety
// `h` must be a live handle; `query` holds `query_len` doubles and `out`
// `out_len` writable doubles.
enum VortStatus vort_accumulators_retrieve(struct VortAccumulators *h,
                                           const double *query,
                                           size_t query_len,
                                           double *out,
                                           size_t out_len);

// # Safety
// `h` must be null or a handle from [`vort_accumulators_new`], freed once.
void vort_accumulators_free(struct VortAccumulators *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VORT_H */

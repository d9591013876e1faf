#ifndef MFADVLAB_H
#define MFADVLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MfArch {
  MF_ARCH_VANILLA = 0,
  MF_ARCH_RESIDUAL = 1,
} MfArch;

typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_INVALID_ARGUMENT = 2,
  MF_STATUS_DIMENSION_MISMATCH = 3,
  MF_STATUS_UNSUPPORTED_PAIR = 4,
  MF_STATUS_NUMERIC = 5,
  MF_STATUS_PANIC = 6,
} MfStatus;

// A sampled random network.
typedef struct MfNetwork MfNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *mf_last_error(void);

// Library version as a static NUL-terminated string.
const char *mf_version(void);

// Samples a network with activation slopes `u` (positive side) and `v`.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum MfStatus mf_network_new(enum MfArch arch,
                             size_t d,
                             size_t k,
                             size_t l,
                             size_t n,
                             double sigma_w2,
                             double sigma_b2,
                             double u,
                             double v,
                             uint64_t seed,
                             struct MfNetwork **out);

// Releases a handle; null is ignored.
//
// # Safety
// `net` must be null or a handle from `mf_network_new` not yet freed.
void mf_network_free(struct MfNetwork *net);

// Input and output dimensions of a network.
//
// # Safety
// All pointers must be valid.
enum MfStatus mf_network_dims(const struct MfNetwork *net, size_t *d, size_t *k);

// Network output `f(x)` into `out[0..k]`.
//
// # Safety
// `x` must hold `d` doubles and `out` room for `k`.
enum MfStatus mf_network_forward(const struct MfNetwork *net,
                                 const double *x,
                                 size_t d,
                                 double *out,
                                 size_t k);

// Exact linear region at `x`: `f(y) = J y + a` near `x`. `j` receives the
// k-by-d Jacobian row-major, `a` the k offsets.
//
// # Safety
// `x` must hold `d` doubles, `j` room for `k * d` and `a` room for `k`.
enum MfStatus mf_network_linear_region(const struct MfNetwork *net,
                                       const double *x,
                                       size_t d,
                                       double *j,
                                       double *a);

// Dimension factor `beta_{p,q}` for input dimension `d` and output dimension `k`.
//
// # Safety
// `out` must be valid.
enum MfStatus mf_beta(int32_t p, int32_t q, size_t d, size_t k, double *out);

// Mean-field upper bound `eps * beta * omega^{L/2}` for the network's
// hyperparameters.
//
// # Safety
// `net` and `out` must be valid.
enum MfStatus mf_adv_loss_bound(const struct MfNetwork *net,
                                int32_t p,
                                int32_t q,
                                double eps,
                                double *out);

// `(p, q)` operator norm of a row-major `rows` by `cols` matrix.
//
// # Safety
// `m` must hold `rows * cols` doubles and `out` must be valid.
enum MfStatus mf_operator_norm(const double *m,
                               size_t rows,
                               size_t cols,
                               int32_t p,
                               int32_t q,
                               double *out);

// Multi-restart PGD maximizing `||f(x + eta) - f(x)||_q` over
// `||eta||_p <= eps`. Writes the best perturbation and its loss.
//
// # Safety
// `x` and `eta` must hold `d` doubles; `loss` must be valid.
enum MfStatus mf_pgd_attack(const struct MfNetwork *net,
                            const double *x,
                            size_t d,
                            int32_t p,
                            int32_t q,
                            double eps,
                            size_t iters,
                            size_t restarts,
                            uint64_t seed,
                            double *eta,
                            double *loss);

// Predicted success probability of a single signed-gradient step of size
// `eps` on a scalar-output network at an input of norm sqrt(d).
//
// # Safety
// `net` and `out` must be valid.
enum MfStatus mf_flip_probability(const struct MfNetwork *net, double eps, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFADVLAB_H */

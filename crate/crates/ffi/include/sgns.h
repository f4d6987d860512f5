#ifndef SGNS_H
#define SGNS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum SgnsStatus {
  SGNS_STATUS_OK = 0,
  SGNS_STATUS_NULL_POINTER = 1,
  SGNS_STATUS_INVALID_ARGUMENT = 2,
  SGNS_STATUS_CONFIG = 3,
  SGNS_STATUS_SOLVER = 4,
  SGNS_STATUS_IO = 5,
  SGNS_STATUS_PANIC = 6,
} SgnsStatus;

// Field selector for probes.
typedef enum SgnsField {
  SGNS_FIELD_UX = 0,
  SGNS_FIELD_UY = 1,
  SGNS_FIELD_P = 2,
} SgnsField;

// A configured stochastic problem.
typedef struct SgnsProblem SgnsProblem;

// A computed gPC solution and its solver report.
typedef struct SgnsSolution SgnsSolution;

// Sizes of a discrete problem.
typedef struct SgnsSizes {
  size_t velocity_dofs;
  size_t pressure_dofs;
  size_t modes;
  size_t coefficient_terms;
  size_t global_dofs;
} SgnsSizes;

// Convergence summary of a solve.
typedef struct SgnsSolveInfo {
  bool converged;
  size_t picard_steps;
  size_t newton_steps;
  double relative_residual;
} SgnsSolveInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty after a success. The
// pointer stays valid until the next call on the same thread.
const char *sgns_last_error(void);

// Library version as a static NUL-terminated string.
const char *sgns_version(void);

// Parses an experiment configuration (JSON) and builds the problem.
//
// # Safety
// `json` must be a valid NUL-terminated string and `out` a valid pointer.
enum SgnsStatus sgns_problem_from_json(const char *json, struct SgnsProblem **out);

// Releases a problem; null is ignored.
//
// # Safety
// `p` must be null or a pointer from [`sgns_problem_from_json`] not yet freed.
void sgns_problem_free(struct SgnsProblem *p);

// # Safety
// `p` must be a live problem handle and `out` a valid pointer.
enum SgnsStatus sgns_problem_sizes(const struct SgnsProblem *p, struct SgnsSizes *out);

// Runs the hybrid Picard/Newton stochastic Galerkin solve. A solution
// handle is produced even when the iteration did not converge; check
// [`sgns_solution_info`].
//
// # Safety
// `p` must be a live problem handle and `out` a valid pointer.
enum SgnsStatus sgns_solve(const struct SgnsProblem *p, struct SgnsSolution **out);

// Releases a solution; null is ignored.
//
// # Safety
// `s` must be null or a pointer from [`sgns_solve`] not yet freed.
void sgns_solution_free(struct SgnsSolution *s);

// # Safety
// `s` must be a live solution handle and `out` a valid pointer.
enum SgnsStatus sgns_solution_info(const struct SgnsSolution *s, struct SgnsSolveInfo *out);

// Copies the `[u, p]` block of mode `k` into `buf` of length `len`, which
// must equal velocity plus pressure dofs.
//
// # Safety
// `s` must be a live solution handle and `buf` valid for `len` writes.
enum SgnsStatus sgns_solution_mode(const struct SgnsSolution *s, size_t k, double *buf, size_t len);

// Copies the pointwise velocity variance (length = velocity dofs).
//
// # Safety
// `s` must be a live solution handle and `buf` valid for `len` writes.
enum SgnsStatus sgns_solution_velocity_variance(const struct SgnsSolution *s,
                                                double *buf,
                                                size_t len);

// Mean and standard deviation of a field at a point.
//
// # Safety
// `s` must be a live solution handle; `mean` and `std` valid pointers.
enum SgnsStatus sgns_solution_probe(const struct SgnsSolution *s,
                                    double x,
                                    double y,
                                    enum SgnsField field,
                                    double *mean,
                                    double *std);

// Accumulated block-lower nonzeros of the first `m_t` coupling matrices and
// the total nonzeros, for dimension `dim` and solution degree `degree`
// (coefficient degree `2 degree`).
//
// # Safety
// `lower` and `total` must be valid pointers.
enum SgnsStatus sgns_coupling_nnz(size_t dim,
                                  size_t degree,
                                  size_t m_t,
                                  size_t *lower,
                                  size_t *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGNS_H */

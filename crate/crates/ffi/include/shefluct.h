#ifndef SHEFLUCT_H
#define SHEFLUCT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum ShefluctStatus {
  SHEFLUCT_STATUS_OK = 0,
  // A required pointer argument was null.
  SHEFLUCT_STATUS_NULL_POINTER = 1,
  // Invalid configuration, shape or domain.
  SHEFLUCT_STATUS_INVALID_ARGUMENT = 2,
  // Numerical failure, including a singular covariance.
  SHEFLUCT_STATUS_NUMERICAL = 3,
  // File system error.
  SHEFLUCT_STATUS_IO = 4,
  // Serialization error.
  SHEFLUCT_STATUS_SERIALIZATION = 5,
  // The output buffer is too small; the error message states the size needed.
  SHEFLUCT_STATUS_BUFFER_TOO_SMALL = 6,
  // A panic was caught at the boundary.
  SHEFLUCT_STATUS_INTERNAL = 7,
} ShefluctStatus;

// A validated experiment configuration.
typedef struct ShefluctExperiment ShefluctExperiment;

// A diffusion coefficient σ.
typedef struct ShefluctField ShefluctField;

// A space-time grid.
typedef struct ShefluctGrid ShefluctGrid;

// The result of running an experiment.
typedef struct ShefluctReport ShefluctReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *shefluct_version(void);

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length excluding the NUL.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t shefluct_last_error(char *buf, size_t len);

// σ ≡ S with `s` of length `d*m`.
//
// # Safety
// `s` must be valid for `d*m` reads and `out` for one write.
enum ShefluctStatus shefluct_field_constant(size_t d,
                                            size_t m,
                                            const double *s,
                                            struct ShefluctField **out);

// σ_ij(u) = a_ij + Σ_k b_ijk u_k.
//
// # Safety
// `a` must be valid for `d*m` reads, `b` for `d*m*d` reads and `out` for one write.
enum ShefluctStatus shefluct_field_affine(size_t d,
                                          size_t m,
                                          const double *a,
                                          const double *b,
                                          struct ShefluctField **out);

// σ_ij(u) = a_ij + c_ij·sin(Σ_k w_ijk u_k).
//
// # Safety
// `a` and `c` must be valid for `d*m` reads, `w` for `d*m*d` reads and `out`
// for one write.
enum ShefluctStatus shefluct_field_bounded_smooth(size_t d,
                                                  size_t m,
                                                  const double *a,
                                                  const double *c,
                                                  const double *w,
                                                  struct ShefluctField **out);

// # Safety
// `field` must be null or a handle from a `shefluct_field_*` constructor that
// has not been freed.
void shefluct_field_free(struct ShefluctField *field);

// Writes the state dimension `d` and the noise dimension `m`.
//
// # Safety
// `field` must be a live handle; `d` and `m` valid for one write each.
enum ShefluctStatus shefluct_field_dims(const struct ShefluctField *field, size_t *d, size_t *m);

// Evaluates σ(u) into `out` (`d*m` entries, row-major).
//
// # Safety
// `u` must be valid for `d` reads and `out` for `d*m` writes.
enum ShefluctStatus shefluct_field_sigma(const struct ShefluctField *field,
                                         const double *u,
                                         double *out);

// Non-degeneracy at the all-ones state: whether the columns of σ(1̄) span
// ℝᵈ, and their numerical rank.
//
// # Safety
// `holds` and `rank` must be valid for one write each.
enum ShefluctStatus shefluct_field_check_h1(const struct ShefluctField *field,
                                            bool *holds,
                                            size_t *rank);

// A grid on `[0, t_final]` wide enough for averages up to radius `r_max`.
//
// # Safety
// `output_times` must be valid for `n_output` reads and `out` for one write.
enum ShefluctStatus shefluct_grid_new(double t_final,
                                      double dt,
                                      double dx,
                                      double r_max,
                                      double padding,
                                      const double *output_times,
                                      size_t n_output,
                                      struct ShefluctGrid **out);

// # Safety
// `grid` must be null or a live handle from [`shefluct_grid_new`].
void shefluct_grid_free(struct ShefluctGrid *grid);

// Number of interior nodes and of time steps.
//
// # Safety
// `grid` must be a live handle; `nx` and `nt` valid for one write each.
enum ShefluctStatus shefluct_grid_shape(const struct ShefluctGrid *grid, size_t *nx, size_t *nt);

// Simulates one replica and writes the field at the last output time,
// component-major (`d*nx` entries), into `out`.
//
// # Safety
// Handles must be live and `out` valid for `d*nx` writes.
enum ShefluctStatus shefluct_simulate_final(const struct ShefluctField *field,
                                            const struct ShefluctGrid *grid,
                                            uint64_t seed,
                                            uint64_t replica_id,
                                            double *out);

// Simulates one replica and writes the spatial average `F^R` at the last
// output time (`d` entries) into `out`.
//
// # Safety
// Handles must be live and `out` valid for `d` writes.
enum ShefluctStatus shefluct_spatial_average_final(const struct ShefluctField *field,
                                                   const struct ShefluctGrid *grid,
                                                   double r,
                                                   uint64_t seed,
                                                   uint64_t replica_id,
                                                   double *out);

// Limit `C(t)` and prelimit `C^R(t)` covariances (`d*d` entries each) for
// constant σ = S of shape d×m.
//
// # Safety
// `s` must be valid for `d*m` reads; `c` and `cr` for `d*d` writes.
enum ShefluctStatus shefluct_constant_covariance(size_t d,
                                                 size_t m,
                                                 const double *s,
                                                 double t,
                                                 double r,
                                                 double *c,
                                                 double *cr);

// `E[u(t,x)²]` for the scalar equation with σ(u) = λu and u(0) ≡ 1.
//
// # Safety
// `out` must be valid for one write.
enum ShefluctStatus shefluct_pam_second_moment(double lambda, double t, double tol, double *out);

// Parses and validates a TOML experiment configuration.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` valid for one write.
enum ShefluctStatus shefluct_experiment_from_toml(const char *toml,
                                                  struct ShefluctExperiment **out);

// Applies a dotted `KEY=VALUE` override and revalidates.
//
// # Safety
// `experiment` must be a live handle and `assignment` a NUL-terminated string.
enum ShefluctStatus shefluct_experiment_override(struct ShefluctExperiment *experiment,
                                                 const char *assignment);

// # Safety
// `experiment` must be null or a live handle.
void shefluct_experiment_free(struct ShefluctExperiment *experiment);

// Copies the configuration content hash (64 hex digits plus NUL) into `buf`.
//
// # Safety
// `buf` must be valid for `len` bytes.
enum ShefluctStatus shefluct_experiment_hash(const struct ShefluctExperiment *experiment,
                                             char *buf,
                                             size_t len);

// Runs the experiment.
//
// # Safety
// `experiment` must be a live handle and `out` valid for one write.
enum ShefluctStatus shefluct_experiment_run(const struct ShefluctExperiment *experiment,
                                            struct ShefluctReport **out);

// # Safety
// `report` must be null or a live handle.
void shefluct_report_free(struct ShefluctReport *report);

// The report as a JSON document. The pointer stays valid until the report
// is freed.
//
// # Safety
// `report` must be a live handle.
const char *shefluct_report_json(const struct ShefluctReport *report);

// Writes `report.json`, `replicas.json` and the CSV tables into `directory`.
//
// # Safety
// `report` must be a live handle and `directory` a NUL-terminated path.
enum ShefluctStatus shefluct_report_write(const struct ShefluctReport *report,
                                          const char *directory);

// Number of rows and columns of the named table, e.g. `"entries"`.
//
// # Safety
// `report` must be a live handle, `name` a NUL-terminated string, `rows`
// and `cols` valid for one write each.
enum ShefluctStatus shefluct_report_table_shape(const struct ShefluctReport *report,
                                                const char *name,
                                                size_t *rows,
                                                size_t *cols);

// Copies the named table row-major as doubles into `out` (`rows*cols`
// entries). Integer cells are converted.
//
// # Safety
// `report` must be a live handle, `name` a NUL-terminated string and `out`
// valid for `len` writes.
enum ShefluctStatus shefluct_report_table_values(const struct ShefluctReport *report,
                                                 const char *name,
                                                 double *out,
                                                 size_t len);

// Tag of the model family of a field: 0 constant, 1 affine, 2 bounded-smooth.
//
// # Safety
// `field` must be a live handle.
int32_t shefluct_field_family(const struct ShefluctField *field);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHEFLUCT_H */

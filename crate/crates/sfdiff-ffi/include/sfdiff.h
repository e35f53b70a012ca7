#ifndef SFDIFF_H
#define SFDIFF_H

/* Generated from the sfdiff-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Grid side length; fields are GRID_SIDE x GRID_SIDE.
#define SFDIFF_GRID_SIDE 32

// Cells per field buffer.
#define SFDIFF_GRID_CELLS (SFDIFF_GRID_SIDE * SFDIFF_GRID_SIDE)

// Result of every fallible call.
typedef enum SfdiffStatus {
  SFDIFF_STATUS_OK = 0,
  // Invalid configuration or argument values.
  SFDIFF_STATUS_CONFIG = 1,
  // Input data violates a domain precondition.
  SFDIFF_STATUS_DOMAIN = 2,
  // A numerical procedure failed.
  SFDIFF_STATUS_NUMERICAL = 3,
  // A computation would exceed a hard resource cap.
  SFDIFF_STATUS_RESOURCE = 4,
  // An API contract was violated.
  SFDIFF_STATUS_CONTRACT = 5,
  // Malformed binary artifact.
  SFDIFF_STATUS_FORMAT = 6,
  // File system failure.
  SFDIFF_STATUS_IO = 7,
  // A required pointer argument was null.
  SFDIFF_STATUS_NULL_ARGUMENT = 8,
  // A string argument was not valid UTF-8.
  SFDIFF_STATUS_UTF8 = 9,
  // An internal panic was caught at the boundary.
  SFDIFF_STATUS_PANIC = 10,
} SfdiffStatus;

// A trained denoiser restored from a checkpoint (opaque).
typedef struct SfdiffModel SfdiffModel;

// A rectangular room with a fixed source (opaque).
typedef struct SfdiffRoom SfdiffRoom;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message (empty after a success) into `buf` as a
// NUL-terminated string, truncating to `cap` bytes. Returns the full
// message length in bytes, excluding the NUL; pass a null `buf` to query
// the length alone.
size_t sfdiff_last_error_message(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *sfdiff_version(void);

// Validates and allocates a room handle. Lengths and t60 in meters and
// seconds; the source must lie strictly inside.
enum SfdiffStatus sfdiff_room_new(double lx,
                                  double ly,
                                  double lz,
                                  double t60,
                                  double source_x,
                                  double source_y,
                                  double source_z,
                                  struct SfdiffRoom **out);

// Frees a room handle; a null pointer is ignored.
void sfdiff_room_free(struct SfdiffRoom *room);

// Simulates the transfer function magnitude on the standard 32x32 grid at
// plane height `z_o`, writing GRID_CELLS doubles to `out`.
enum SfdiffStatus sfdiff_simulate_magnitude(const struct SfdiffRoom *room,
                                            double z_o,
                                            double frequency_hz,
                                            double margin,
                                            double *out);

// Interpolates observed magnitudes across the grid with the free-field
// kernel and ridge weight `lambda`. Reads observed cells of `observed`
// per `mask`, writes the full field to `out` with observed cells passed
// through.
enum SfdiffStatus sfdiff_kernel_reconstruct(const struct SfdiffRoom *room,
                                            double z_o,
                                            double frequency_hz,
                                            const double *observed,
                                            const uint8_t *mask,
                                            double lambda,
                                            double *out);

// Loads a checkpoint from a NUL-terminated UTF-8 path.
enum SfdiffStatus sfdiff_model_load(const char *path, struct SfdiffModel **out);

// Frees a model handle; a null pointer is ignored.
void sfdiff_model_free(struct SfdiffModel *model);

// Optimizer steps recorded in the loaded checkpoint (0 for a null handle).
uint64_t sfdiff_model_train_steps(const struct SfdiffModel *model);

// Reconstructs a field from sparse observations by iterative denoising
// with `steps` sampling iterations. Randomness is fully determined by
// (`seed`, `sample_index`); observed cells pass through to `out`.
enum SfdiffStatus sfdiff_model_reconstruct(struct SfdiffModel *model,
                                           const double *observed,
                                           const uint8_t *mask,
                                           double frequency_hz,
                                           size_t steps,
                                           uint64_t seed,
                                           uint64_t sample_index,
                                           double *out);

// Normalized mean squared error in dB between an estimate and the truth.
// `mask` may be null for the full-grid region; pass nonzero
// `unknown_only` to score unobserved cells alone (mask required).
enum SfdiffStatus sfdiff_nmse_db(const double *estimate,
                                 const double *truth,
                                 const uint8_t *mask,
                                 int unknown_only,
                                 double *out_db);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFDIFF_H */

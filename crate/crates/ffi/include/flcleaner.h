#ifndef FLCLEANER_H
#define FLCLEANER_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FlcStatus {
  FLC_STATUS_OK = 0,
  FLC_STATUS_NULL_POINTER = 1,
  FLC_STATUS_INVALID_ARGUMENT = 2,
  FLC_STATUS_CONFIG = 3,
  FLC_STATUS_IO = 4,
  FLC_STATUS_RUNTIME = 5,
  FLC_STATUS_BUFFER_TOO_SMALL = 6,
  FLC_STATUS_PANIC = 7,
} FlcStatus;

/**
 * A trained CVAE checkpoint.
 */
typedef struct FlcCvae FlcCvae;

/**
 * Flat model parameters.
 */
typedef struct FlcWeights FlcWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *flc_last_error(void);

/**
 * Seeded weights of an `input -> hidden -> classes` MLP.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum FlcStatus flc_model_init_mlp(size_t input,
                                  size_t hidden,
                                  size_t classes,
                                  uint64_t seed,
                                  struct FlcWeights **out);

/**
 * # Safety
 * `values` must point to `len` doubles and `out` to storage for one handle.
 */
enum FlcStatus flc_weights_from_values(const double *values, size_t len, struct FlcWeights **out);

/**
 * Parses the length-prefixed little-endian encoding.
 *
 * # Safety
 * `bytes` must point to `len` bytes and `out` to storage for one handle.
 */
enum FlcStatus flc_weights_from_bytes(const uint8_t *bytes, size_t len, struct FlcWeights **out);

/**
 * Number of parameters, or 0 for a null handle.
 *
 * # Safety
 * `weights` must be null or a live handle.
 */
size_t flc_weights_len(const struct FlcWeights *weights);

/**
 * Copies the parameters into `buf`, which must hold exactly `len` doubles.
 *
 * # Safety
 * `weights` must be a live handle and `buf` must point to `len` doubles.
 */
enum FlcStatus flc_weights_get(const struct FlcWeights *weights, double *buf, size_t len);

/**
 * Writes the byte encoding into `buf` and its size into `written`. With a
 * null `buf` only the required size is reported.
 *
 * # Safety
 * `weights` must be a live handle, `buf` null or `cap` writable bytes, and
 * `written` a valid pointer.
 */
enum FlcStatus flc_weights_to_bytes(const struct FlcWeights *weights,
                                    uint8_t *buf,
                                    size_t cap,
                                    size_t *written);

/**
 * # Safety
 * `weights` must be null or a handle not yet freed.
 */
void flc_weights_free(struct FlcWeights *weights);

/**
 * Filters `n` clients by reconstruction error. Client `i` has score
 * `eps[i]`; `benign_out[i]` is set to 1 when accepted and 0 when blocked.
 *
 * # Safety
 * `eps` and `benign_out` must point to `n` elements; `delta_out` may be null.
 */
enum FlcStatus flc_trust_propagate(const double *eps,
                                   size_t n,
                                   double lambda,
                                   uint8_t *benign_out,
                                   double *delta_out);

/**
 * Geometric median of `n` row-major points of dimension `dim`, written to
 * `out` (`dim` doubles). Returns the iteration count through `iterations`
 * when it is not null.
 *
 * # Safety
 * `points` must hold `n * dim` doubles and `out` `dim` doubles.
 */
enum FlcStatus flc_geometric_median(const double *points,
                                    size_t n,
                                    size_t dim,
                                    double tol,
                                    size_t max_iters,
                                    double *out,
                                    size_t *iterations);

/**
 * Dataset-size weighted average of `n` models.
 *
 * # Safety
 * `models` must hold `n` live handles, `sizes` `n` counts, and `out` must be
 * valid storage for one handle.
 */
enum FlcStatus flc_fedavg(const struct FlcWeights *const *models,
                          const size_t *sizes,
                          size_t n,
                          struct FlcWeights **out);

/**
 * Loads a CVAE checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` valid storage for one handle.
 */
enum FlcStatus flc_cvae_load(const char *path, struct FlcCvae **out);

/**
 * Length of the activation vectors the CVAE accepts, or 0 for null.
 *
 * # Safety
 * `cvae` must be null or a live handle.
 */
size_t flc_cvae_input_dim(const struct FlcCvae *cvae);

/**
 * Deterministic reconstruction error of one normalized activation map.
 *
 * # Safety
 * `cvae` must be a live handle, `nam` must hold `len` doubles and `out` must
 * be a valid pointer.
 */
enum FlcStatus flc_cvae_reconstruction_error(const struct FlcCvae *cvae,
                                             const double *nam,
                                             size_t len,
                                             size_t label,
                                             double *out);

/**
 * # Safety
 * `cvae` must be null or a handle not yet freed.
 */
void flc_cvae_free(struct FlcCvae *cvae);

/**
 * Runs the experiment described by a config file and writes its reports.
 *
 * # Safety
 * Both arguments must be nul-terminated strings.
 */
enum FlcStatus flc_run_experiment(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLCLEANER_H */

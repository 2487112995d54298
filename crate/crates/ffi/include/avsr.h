#ifndef AVSR_H
#define AVSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of noisy grid cells: four categories times five SNR levels.
 */
#define AVSR_GRID_CELLS 20

typedef enum AvsrStatus {
  AVSR_STATUS_OK = 0,
  AVSR_STATUS_NULL_ARGUMENT = 1,
  AVSR_STATUS_INVALID_ARGUMENT = 2,
  AVSR_STATUS_CONFIG = 3,
  AVSR_STATUS_NUMERIC = 4,
  AVSR_STATUS_IO = 5,
  AVSR_STATUS_CHECKPOINT = 6,
  AVSR_STATUS_PANIC = 7,
} AvsrStatus;

/**
 * Named matrices loaded from a checkpoint file.
 */
typedef struct AvsrCheckpoint AvsrCheckpoint;

/**
 * A training run in progress.
 */
typedef struct AvsrTrainer AvsrTrainer;

/**
 * One optimizer step's losses.
 */
typedef struct AvsrStepReport {
  size_t step;
  bool frozen;
  double grad_norm;
  double total;
  double l_asr;
  double l_order;
  double l_direction;
  double l_speed;
  double l_temp;
  double l_ref;
} AvsrStepReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *avsr_last_error_message(void);

/**
 * Token error rate in percent. The reference must be non-empty.
 *
 * # Safety
 * `reference` and `hypothesis` point to at least the given number of
 * tokens (either may be NULL when its length is 0); `out` is writable.
 */
enum AvsrStatus avsr_wer(const uint32_t *reference,
                         size_t reference_len,
                         const uint32_t *hypothesis,
                         size_t hypothesis_len,
                         double *out);

/**
 * N-WER over all cells and over the cells at or below 0 dB.
 *
 * `cells` holds [`AVSR_GRID_CELLS`] values, category-major in the order
 * babble, speech, music, natural, each over SNR -10, -5, 0, 5, 10 dB.
 *
 * # Safety
 * `cells` points to [`AVSR_GRID_CELLS`] doubles; both outputs are writable.
 */
enum AvsrStatus avsr_nwer(const double *cells, double *out_nwer, double *out_noise_dominant);

/**
 * Writes `clean + alpha * noise` with `alpha` chosen for exactly `snr_db`.
 * Signals are row-major `frames x channels`; the noise is tiled or cropped
 * to the clean length.
 *
 * # Safety
 * `clean` and `out` hold `frames * channels` doubles and `noise` holds
 * `noise_frames * channels`.
 */
enum AvsrStatus avsr_mix_noise_at_snr(const double *clean,
                                      size_t frames,
                                      size_t channels,
                                      const double *noise,
                                      size_t noise_frames,
                                      double snr_db,
                                      double *out);

/**
 * Loads a checkpoint file into a new handle.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum AvsrStatus avsr_checkpoint_open(const char *path, struct AvsrCheckpoint **out);

/**
 * Number of matrices; 0 for NULL.
 *
 * # Safety
 * `handle` is NULL or came from [`avsr_checkpoint_open`].
 */
size_t avsr_checkpoint_len(const struct AvsrCheckpoint *handle);

/**
 * Name of matrix `index`, or NULL when out of range. Owned by the handle.
 *
 * # Safety
 * `handle` is NULL or came from [`avsr_checkpoint_open`].
 */
const char *avsr_checkpoint_name(const struct AvsrCheckpoint *handle, size_t index);

/**
 * Shape of matrix `index`.
 *
 * # Safety
 * `handle` is NULL or came from [`avsr_checkpoint_open`]; outputs are writable.
 */
enum AvsrStatus avsr_checkpoint_shape(const struct AvsrCheckpoint *handle,
                                      size_t index,
                                      size_t *rows,
                                      size_t *cols);

/**
 * Row-major values of matrix `index`, or NULL when out of range. Owned by
 * the handle.
 *
 * # Safety
 * `handle` is NULL or came from [`avsr_checkpoint_open`].
 */
const double *avsr_checkpoint_data(const struct AvsrCheckpoint *handle, size_t index);

/**
 * # Safety
 * `handle` is NULL or came from [`avsr_checkpoint_open`] and is not used again.
 */
void avsr_checkpoint_free(struct AvsrCheckpoint *handle);

/**
 * Creates a trainer from TOML configuration text; keys left out take
 * their defaults.
 *
 * # Safety
 * `config_toml` is a NUL-terminated string; `out` is writable.
 */
enum AvsrStatus avsr_trainer_new(const char *config_toml, struct AvsrTrainer **out);

/**
 * Runs one optimizer step and reports its losses.
 *
 * # Safety
 * `handle` came from [`avsr_trainer_new`]; `out` is NULL or writable.
 */
enum AvsrStatus avsr_trainer_step(struct AvsrTrainer *handle, struct AvsrStepReport *out);

/**
 * Writes the current parameters as a checkpoint file.
 *
 * # Safety
 * `handle` came from [`avsr_trainer_new`]; `path` is a NUL-terminated string.
 */
enum AvsrStatus avsr_trainer_save(const struct AvsrTrainer *handle, const char *path);

/**
 * # Safety
 * `handle` is NULL or came from [`avsr_trainer_new`] and is not used again.
 */
void avsr_trainer_free(struct AvsrTrainer *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVSR_H */

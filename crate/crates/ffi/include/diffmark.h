#ifndef DIFFMARK_H
#define DIFFMARK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Distortions accepted by [`dm_attack`]. `param` meaning per kind:
 * SNR in dB, echo attenuation (100 ms delay), crop rate, unused (TPDF),
 * cutoff in Hz, unused (0.3-8 kHz), level, stretch factor (above 1 shortens).
 */
typedef enum DmAttackKind {
  DM_ATTACK_KIND_NONE = 0,
  DM_ATTACK_KIND_GAUSSIAN_NOISE = 1,
  DM_ATTACK_KIND_ECHO = 2,
  DM_ATTACK_KIND_REAR_CROP = 3,
  DM_ATTACK_KIND_DITHER = 4,
  DM_ATTACK_KIND_LOWPASS = 5,
  DM_ATTACK_KIND_BANDPASS = 6,
  DM_ATTACK_KIND_PINK_NOISE = 7,
  DM_ATTACK_KIND_TIME_STRETCH = 8,
} DmAttackKind;

/**
 * Result of every call.
 */
typedef enum DmStatus {
  DM_STATUS_OK = 0,
  DM_STATUS_NULL_POINTER = 1,
  DM_STATUS_INVALID_ARGUMENT = 2,
  DM_STATUS_IO = 3,
  DM_STATUS_FORMAT = 4,
  DM_STATUS_NUMERIC = 5,
  DM_STATUS_BUFFER_TOO_SMALL = 6,
  DM_STATUS_PANIC = 7,
} DmStatus;

/**
 * A loaded checkpoint.
 */
typedef struct DmModel DmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `cap`. Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t dm_last_error(char *buf, size_t cap);

/**
 * Loads a checkpoint file into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DmStatus dm_model_load(const char *path, struct DmModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`dm_model_load`] and not be used afterwards.
 */
void dm_model_free(struct DmModel *model);

/**
 * Payload length, clip length in samples and sample rate of a model.
 *
 * # Safety
 * `model` must be a live handle; output pointers may be null.
 */
enum DmStatus dm_model_info(const struct DmModel *model,
                            size_t *payload_bits,
                            size_t *clip_len,
                            uint32_t *sample_rate);

/**
 * Synthesizes one watermarked clip carrying `bits` (values 0 or 1),
 * conditioned on the mel spectrogram of `cond_samples`. Both the
 * conditioning clip and `out` hold exactly the model's clip length.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum DmStatus dm_generate(const struct DmModel *model,
                          const double *cond_samples,
                          size_t cond_len,
                          const uint8_t *bits,
                          size_t n_bits,
                          uint64_t seed,
                          double *out,
                          size_t out_len);

/**
 * Decodes `n_bits` bits from a clip of any length. `confidence`, when not
 * null, receives the mean of `|2 sigmoid(logit) - 1|`.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum DmStatus dm_extract(const struct DmModel *model,
                         const double *samples,
                         size_t len,
                         uint8_t *bits_out,
                         size_t n_bits,
                         double *confidence);

/**
 * Applies one distortion. Crops and stretches change the length, so the
 * result length goes to `*out_len`; when `out_cap` is too small nothing is
 * written except `*out_len` and the status is `BUFFER_TOO_SMALL`.
 *
 * # Safety
 * `samples` must be valid for `len` values, `out` for `out_cap` values.
 */
enum DmStatus dm_attack(const double *samples,
                        size_t len,
                        uint32_t sample_rate,
                        enum DmAttackKind kind,
                        double param,
                        uint64_t seed,
                        double *out,
                        size_t out_cap,
                        size_t *out_len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dm_version(void);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DIFFMARK_H */

#ifndef FOLEYGEN_H
#define FOLEYGEN_H

/* Generated by cbindgen from foleygen-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum FgStatus {
  FgStatus_Ok = 0,
  /**
   * File could not be read or written.
   */
  FgStatus_Io = 1,
  /**
   * File contents malformed (bad magic, truncation).
   */
  FgStatus_Format = 2,
  /**
   * Bad configuration or missing artifact.
   */
  FgStatus_Config = 3,
  /**
   * Dimension mismatch between artifacts.
   */
  FgStatus_Shape = 4,
  /**
   * Argument rejected by validation.
   */
  FgStatus_Invalid = 5,
  /**
   * Numerical failure (non-finite values).
   */
  FgStatus_Numeric = 6,
  /**
   * A required pointer argument was null.
   */
  FgStatus_NullPointer = 7,
  /**
   * A string argument was not valid UTF-8.
   */
  FgStatus_Utf8 = 8,
  /**
   * Internal panic caught at the boundary.
   */
  FgStatus_Panic = 9,
} FgStatus;

/**
 * Attention mechanism selector, mirroring the config values.
 */
typedef enum FgMechanism {
  FgMechanism_AllFrame = 0,
  FgMechanism_CausalVisual = 1,
  FgMechanism_FrameSpecific = 2,
} FgMechanism;

typedef struct FgAudio FgAudio;

typedef struct FgCodec FgCodec;

typedef struct FgFeaturizer FgFeaturizer;

typedef struct FgModel FgModel;

typedef struct FgTokens FgTokens;

typedef struct FgVisual FgVisual;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static nul-terminated string.
 */
const char *fg_version(void);

/**
 * Message describing the most recent failure on this thread ("" if none).
 * The pointer stays valid until the next foleygen call on the same thread.
 */
const char *fg_last_error_message(void);

/**
 * Loads an RVQM codec file.
 *
 * # Safety
 * `path` must be nul-terminated; `out` must be a valid pointer.
 */
enum FgStatus fg_codec_load(const char *path, struct FgCodec **out);

/**
 * # Safety
 * `c` must come from fg_codec_load (or be null).
 */
void fg_codec_free(struct FgCodec *c);

/**
 * Number of codebooks (0 for null).
 */
size_t fg_codec_n_q(const struct FgCodec *c);

/**
 * Codes per codebook (0 for null).
 */
size_t fg_codec_codebook_size(const struct FgCodec *c);

/**
 * Loads an FGLM checkpoint.
 *
 * # Safety
 * `path` must be nul-terminated; `out` must be a valid pointer.
 */
enum FgStatus fg_model_load(const char *path, struct FgModel **out);

/**
 * # Safety
 * `m` must come from fg_model_load (or be null).
 */
void fg_model_free(struct FgModel *m);

/**
 * Token streams the model predicts per step (0 for null).
 */
size_t fg_model_n_q(const struct FgModel *m);

/**
 * Delayed steps one generation emits (0 for null).
 */
size_t fg_model_gen_steps(const struct FgModel *m);

/**
 * Builds the tone-probe featurizer used when the codec was trained.
 * `tones` lists the class tone frequencies in Hz.
 *
 * # Safety
 * `tones` must point to `n_tones` doubles; `out` must be a valid pointer.
 */
enum FgStatus fg_featurizer_new(const double *tones,
                                size_t n_tones,
                                size_t d,
                                size_t hop,
                                uint32_t sample_rate,
                                struct FgFeaturizer **out);

/**
 * # Safety
 * `f` must come from fg_featurizer_new (or be null).
 */
void fg_featurizer_free(struct FgFeaturizer *f);

/**
 * Loads a VEMB embedding file.
 *
 * # Safety
 * `path` must be nul-terminated; `out` must be a valid pointer.
 */
enum FgStatus fg_visual_load(const char *path, struct FgVisual **out);

/**
 * Wraps a caller-provided T x D_v row-major feature matrix.
 *
 * # Safety
 * `feats` must point to `t * d_v` doubles; `out` must be a valid pointer.
 */
enum FgStatus fg_visual_from_buffer(const double *feats,
                                    size_t t,
                                    size_t d_v,
                                    uint32_t frame_rate_v,
                                    struct FgVisual **out);

/**
 * # Safety
 * `v` must come from a fg_visual_* constructor (or be null).
 */
void fg_visual_free(struct FgVisual *v);

/**
 * Visual frame count (0 for null).
 */
size_t fg_visual_t(const struct FgVisual *v);

/**
 * Samples one audio clip with classifier-free guidance. On success writes a
 * waveform handle to `out_audio` and, when `out_tokens` is non-null, the
 * token grid to `out_tokens`.
 *
 * # Safety
 * Handles must come from their constructors; `out_audio` must be valid;
 * `out_tokens` may be null.
 */
enum FgStatus fg_generate(const struct FgModel *model,
                          const struct FgCodec *codec,
                          const struct FgFeaturizer *fz,
                          const struct FgVisual *visual,
                          enum FgMechanism mechanism,
                          double cfg_scale,
                          size_t top_k,
                          double temperature,
                          uint64_t seed,
                          struct FgAudio **out_audio,
                          struct FgTokens **out_tokens);

/**
 * Sample count (0 for null).
 */
size_t fg_audio_len(const struct FgAudio *a);

/**
 * Sample rate in Hz (0 for null).
 */
uint32_t fg_audio_sample_rate(const struct FgAudio *a);

/**
 * Copies up to `cap` samples into `dst`; returns the full sample count.
 *
 * # Safety
 * `dst` must point to at least `cap` floats.
 */
size_t fg_audio_samples(const struct FgAudio *a, float *dst, size_t cap);

/**
 * Writes the waveform as 16-bit PCM WAV.
 *
 * # Safety
 * `a` must come from fg_generate; `path` must be nul-terminated.
 */
enum FgStatus fg_audio_save_wav(const struct FgAudio *a, const char *path);

/**
 * # Safety
 * `a` must come from fg_generate (or be null).
 */
void fg_audio_free(struct FgAudio *a);

/**
 * Codebook count (0 for null).
 */
size_t fg_tokens_n_q(const struct FgTokens *t);

/**
 * Frames per codebook (0 for null).
 */
size_t fg_tokens_len(const struct FgTokens *t);

/**
 * Code at (codebook k, frame idx); -1 when out of range or null.
 */
int32_t fg_tokens_at(const struct FgTokens *t, size_t k, size_t idx);

/**
 * Writes the grid as an RVQT token file.
 *
 * # Safety
 * `t` must come from fg_generate; `path` must be nul-terminated.
 */
enum FgStatus fg_tokens_save(const struct FgTokens *t, const char *path);

/**
 * # Safety
 * `t` must come from fg_generate (or be null).
 */
void fg_tokens_free(struct FgTokens *t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOLEYGEN_H */

#ifndef U2FORMER_H
#define U2FORMER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum U2fKind {
  U2F_KIND_RAIN = 0,
  U2F_KIND_HAZE = 1,
  U2F_KIND_REFLECTION = 2,
} U2fKind;

typedef enum U2fStatus {
  U2F_STATUS_OK = 0,
  U2F_STATUS_NULL_POINTER = 1,
  U2F_STATUS_INVALID_ARGUMENT = 2,
  U2F_STATUS_SHAPE_MISMATCH = 3,
  U2F_STATUS_IO = 4,
  U2F_STATUS_CORRUPT_CHECKPOINT = 5,
  U2F_STATUS_CONFIG_MISMATCH = 6,
  U2F_STATUS_NON_FINITE = 7,
  U2F_STATUS_PANIC = 8,
} U2fStatus;

// Opaque model handle.
typedef struct U2fModel U2fModel;

// Multiply-accumulate counts of one transformer block.
typedef struct U2fFlops {
  uint64_t qkv_proj;
  uint64_t attn_matrix;
  uint64_t attn_apply;
  uint64_t out_proj;
  uint64_t ffn;
  uint64_t filter_overhead;
  uint64_t total;
} U2fFlops;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *u2f_last_error(void);

void u2f_clear_error(void);

// Freshly initialized model with the default desk architecture
// (`base_channels` overrides C when non-zero).
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum U2fStatus u2f_model_new(size_t base_channels, uint64_t seed, struct U2fModel **out);

// Load a checkpoint written by `u2f_model_save` or the `train` command.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a valid handle slot.
enum U2fStatus u2f_model_load(const char *path, struct U2fModel **out);

// # Safety
// `model` must be a valid handle; `path` a NUL-terminated string.
enum U2fStatus u2f_model_save(const struct U2fModel *model, const char *path);

// # Safety
// `model` must be null or a handle not yet freed.
void u2f_model_free(struct U2fModel *model);

// Trainable scalars of the restoration network (projection head
// excluded), or 0 for a null handle.
//
// # Safety
// `model` must be null or a valid handle.
size_t u2f_model_num_params(const struct U2fModel *model);

// Background and noise estimates of one image. All three buffers hold
// `3 * height * width` floats.
//
// # Safety
// `model` must be a valid handle and the buffers must be that large.
enum U2fStatus u2f_model_restore(const struct U2fModel *model,
                                 const float *input,
                                 size_t height,
                                 size_t width,
                                 float *out_background,
                                 float *out_noise);

// One synthetic `(input, background, noise)` triple of side `size`.
//
// # Safety
// Each buffer must hold `3 * size * size` floats.
enum U2fStatus u2f_synth_sample(enum U2fKind kind,
                                size_t size,
                                uint64_t seed,
                                float *input,
                                float *background,
                                float *noise);

// # Safety
// `a` and `b` must hold `3 * height * width` floats; `out` must be valid.
enum U2fStatus u2f_psnr(const float *a, const float *b, size_t height, size_t width, double *out);

// # Safety
// `a` and `b` must hold `3 * height * width` floats; `out` must be valid.
enum U2fStatus u2f_ssim(const float *a, const float *b, size_t height, size_t width, double *out);

// Analytic MACs of one top-k filtered block on a `channels x height x
// width` input.
//
// # Safety
// `out` must be a valid pointer.
enum U2fStatus u2f_block_flops(size_t channels,
                               size_t height,
                               size_t width,
                               size_t window,
                               size_t heads,
                               double keep_ratio,
                               struct U2fFlops *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* U2FORMER_H */

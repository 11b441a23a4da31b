/* C interface for the vitinterp attention-saliency engine. */

#ifndef VITINTERP_H
#define VITINTERP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Call succeeded.
#define VITINTERP_OK 0

// Invalid argument (bad enum value, class pair, null pointer).
#define VITINTERP_EINVAL 1

// Data error (unreadable file, malformed container, numeric guard).
#define VITINTERP_EDATA 2

// Correction scheme selectors.
#define VITINTERP_SCHEME_POSITIVE 0

#define VITINTERP_SCHEME_COMPLETE 1

#define VITINTERP_SCHEME_ABSOLUTE 2

// Loss form selectors. Single-logit uses `c1`; the contrastive forms
// use `c1` and `c2`.
#define VITINTERP_LOSS_SINGLE 0

#define VITINTERP_LOSS_DIFF 1

#define VITINTERP_LOSS_RATIO 2

#define VITINTERP_LOSS_NDIFF 3

// Opaque model handle.
typedef struct VitModel VitModel;

// Opaque saliency handle.
typedef struct VitSaliency VitSaliency;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent error on this thread, or null if the
// last call succeeded. The pointer stays valid until the next failing
// call on the same thread.
const char *vitinterp_last_error(void);

// Load a weight container. Returns a handle, or null with the error
// recorded.
//
// # Safety
// `path` must be a NUL-terminated string.
struct VitModel *vitinterp_model_load(const char *path);

// # Safety
// `model` must be a handle from `vitinterp_model_load` (or null).
void vitinterp_model_free(struct VitModel *model);

// Patch-token count of the model (saliency length).
//
// # Safety
// `model` must be a valid handle.
uintptr_t vitinterp_model_num_patches(const struct VitModel *model);

// Class count of the model head.
//
// # Safety
// `model` must be a valid handle.
uintptr_t vitinterp_model_num_classes(const struct VitModel *model);

// Interpret an image file and return a saliency handle through `out`.
// Preprocessing uses mean 0.5 / std 0.5 per channel.
//
// # Safety
// `model` must be a valid handle, `image_path` a NUL-terminated
// string, `out` a valid pointer.
int vitinterp_interpret(const struct VitModel *model,
                        const char *image_path,
                        int scheme,
                        int loss_kind,
                        uintptr_t c1,
                        uintptr_t c2,
                        struct VitSaliency **out);

// Interpret an image file and write the rendered heatmap overlay
// (alpha 0.5) next to it.
//
// # Safety
// Pointer arguments as for `vitinterp_interpret`; `out_path` must be
// a NUL-terminated string.
int vitinterp_interpret_to_image(const struct VitModel *model,
                                 const char *image_path,
                                 int scheme,
                                 int loss_kind,
                                 uintptr_t c1,
                                 uintptr_t c2,
                                 const char *out_path);

// Number of per-patch scores in the map.
//
// # Safety
// `saliency` must be a valid handle.
uintptr_t vitinterp_saliency_len(const struct VitSaliency *saliency);

// 1 when the map was all-zero before normalization, else 0.
//
// # Safety
// `saliency` must be a valid handle.
int vitinterp_saliency_degenerate(const struct VitSaliency *saliency);

// Copy the raw signed scores into `out` (capacity `len`).
//
// # Safety
// `saliency` must be a valid handle and `out` must point to at least
// `len` doubles.
int vitinterp_saliency_scores(const struct VitSaliency *saliency, double *out, uintptr_t len);

// Copy the max-abs-normalized scores (range [-1, 1]) into `out`.
//
// # Safety
// As for `vitinterp_saliency_scores`.
int vitinterp_saliency_normalized(const struct VitSaliency *saliency, double *out, uintptr_t len);

// # Safety
// `saliency` must be a handle from this library (or null).
void vitinterp_saliency_free(struct VitSaliency *saliency);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VITINTERP_H */

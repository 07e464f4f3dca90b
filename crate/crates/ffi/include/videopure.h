#ifndef VIDEOPURE_H
#define VIDEOPURE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum VpStatus {
  VP_STATUS_OK = 0,
  VP_STATUS_NULL_POINTER = 1,
  VP_STATUS_INVALID_ARGUMENT = 2,
  VP_STATUS_IO = 3,
  VP_STATUS_FORMAT = 4,
  VP_STATUS_CONFIG = 5,
  VP_STATUS_NUMERIC = 6,
  VP_STATUS_TRAINING = 7,
  VP_STATUS_PURIFICATION = 8,
  VP_STATUS_ATTACK = 9,
  VP_STATUS_INTERNAL = 10,
  VP_STATUS_PANIC = 11,
} VpStatus;

// A standalone video classifier.
typedef struct VpClassifier VpClassifier;

// One configured defense.
typedef struct VpDefense VpDefense;

// Frozen models loaded from an experiment config.
typedef struct VpStack VpStack;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Length in bytes of the last error message on this thread (0 when none).
size_t vp_last_error_length(void);

// Copies the last error message into `buf` as a NUL-terminated string, truncating to `len - 1` bytes.
// Returns the number of bytes written, excluding the terminator.
//
// # Safety
// `buf` must point to `len` writable bytes.
size_t vp_last_error_message(char *buf,
                             size_t len);

// Static NUL-terminated crate version.
const char *vp_version(void);

// Loads the models named by an experiment config file.
//
// # Safety
// `config_path` must be a NUL-terminated string; `out` must be writable.
enum VpStatus vp_stack_load(const char *config_path, struct VpStack **out);

// # Safety
// `stack` must come from `vp_stack_load` and not be used afterwards; null is ignored.
void vp_stack_free(struct VpStack *stack);

// Builds a defense from a JSON spec such as `{"name":"jpeg","quality":75}`.
//
// # Safety
// `stack` must be a live handle, `spec_json` NUL-terminated, `out` writable.
enum VpStatus vp_defense_new(const struct VpStack *stack,
                             const char *spec_json,
                             struct VpDefense **out);

// # Safety
// `defense` must come from `vp_defense_new` and not be used afterwards; null is ignored.
void vp_defense_free(struct VpDefense *defense);

// Purifies and writes the last candidate (the final denoised video) to `out_video`,
// which must hold as many floats as the input. `flow` may be null; otherwise it holds
// (frames − 1) × height × width × 2 floats.
//
// # Safety
// All non-null pointers must be valid for the sizes above.
enum VpStatus vp_defense_purify(const struct VpDefense *defense,
                                const float *video,
                                size_t frames,
                                size_t height,
                                size_t width,
                                size_t channels,
                                const float *flow,
                                uint64_t seed,
                                float *out_video);

// Defended prediction: purify, classify every candidate, vote.
//
// # Safety
// As for `vp_defense_purify`; `out_class` must be writable.
enum VpStatus vp_defense_predict(const struct VpStack *stack,
                                 const struct VpDefense *defense,
                                 const float *video,
                                 size_t frames,
                                 size_t height,
                                 size_t width,
                                 size_t channels,
                                 const float *flow,
                                 uint64_t seed,
                                 size_t *out_class);

// PGD from a JSON attack spec (`{"kind":"gray_box"}`, `{"kind":"bpda"}`, ... with an optional
// `"config"`). A null `defense` attacks the bare classifier. The result goes to `out_video`.
//
// # Safety
// As for `vp_defense_purify`.
enum VpStatus vp_attack(const struct VpStack *stack,
                        const struct VpDefense *defense,
                        const char *attack_json,
                        const float *video,
                        size_t frames,
                        size_t height,
                        size_t width,
                        size_t channels,
                        const float *flow,
                        size_t label,
                        float *out_video);

// Loads a classifier checkpoint.
//
// # Safety
// `path` must be NUL-terminated; `out` writable.
enum VpStatus vp_classifier_load(const char *path, struct VpClassifier **out);

// # Safety
// `clf` must come from `vp_classifier_load` and not be used afterwards; null is ignored.
void vp_classifier_free(struct VpClassifier *clf);

// Undefended prediction. `out_logits` may be null; otherwise it receives `logits_len`
// values at most. `out_num_classes` (may be null) receives the class count.
//
// # Safety
// All non-null pointers must be valid for the given sizes.
enum VpStatus vp_classifier_predict(const struct VpClassifier *clf,
                                    const float *video,
                                    size_t frames,
                                    size_t height,
                                    size_t width,
                                    size_t channels,
                                    size_t *out_class,
                                    float *out_logits,
                                    size_t logits_len,
                                    size_t *out_num_classes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIDEOPURE_H */

#ifndef STASR_H
#define STASR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum StasrStatus {
  STASR_STATUS_OK = 0,
  STASR_STATUS_NULL_POINTER = 1,
  STASR_STATUS_INVALID_ARGUMENT = 2,
  STASR_STATUS_IO = 3,
  STASR_STATUS_FORMAT = 4,
  STASR_STATUS_CONFIG = 5,
  STASR_STATUS_DIMENSION = 6,
  STASR_STATUS_DATA = 7,
  STASR_STATUS_NON_FINITE = 8,
  STASR_STATUS_USAGE = 9,
  STASR_STATUS_PANIC = 10,
} StasrStatus;

// A loaded checkpoint: model weights and vocabulary.
typedef struct StasrModel StasrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL after a
// success. The pointer stays valid until the next call on this thread.
const char *stasr_last_error(void);

// Loads a checkpoint file into a new model handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum StasrStatus stasr_model_load(const char *path, struct StasrModel **out);

// Releases a model handle. NULL is ignored.
//
// # Safety
// `model` must come from [`stasr_model_load`] and not be used afterwards.
void stasr_model_free(struct StasrModel *model);

// Exact number of scalar parameters.
//
// # Safety
// `model` and `out` must be valid pointers.
enum StasrStatus stasr_model_num_parameters(const struct StasrModel *model, uint64_t *out);

// Number of filter-bank channels per input frame.
//
// # Safety
// `model` and `out` must be valid pointers.
enum StasrStatus stasr_model_mel_bins(const struct StasrModel *model, size_t *out);

// Number of optimizer updates the checkpoint had received.
//
// # Safety
// `model` and `out` must be valid pointers.
enum StasrStatus stasr_model_updates(const struct StasrModel *model, uint64_t *out);

// Transcribes one utterance of `frames × bins` row-major features, already
// normalized the way the training data was. `beam <= 1` selects greedy
// search. The transcript is returned in `out_text`; free it with
// [`stasr_string_free`]. The model may be shared across threads.
//
// # Safety
// `features` must point to `frames * bins` doubles; `model` and
// `out_text` must be valid pointers.
enum StasrStatus stasr_model_decode(const struct StasrModel *model,
                                    const double *features,
                                    size_t frames,
                                    size_t bins,
                                    size_t beam,
                                    double alpha,
                                    size_t max_len,
                                    char **out_text);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void stasr_string_free(char *s);

// Standardizes each filter-bank channel of `frames × bins` features in
// place to zero mean and unit variance, treating the utterance as its own
// recording.
//
// # Safety
// `features` must point to `frames * bins` writable doubles.
enum StasrStatus stasr_normalize_features(double *features, size_t frames, size_t bins);

// Learning rate of the warm-up schedule at `step` (1-based).
//
// # Safety
// `out` must be a valid pointer.
enum StasrStatus stasr_noam_lr(uint64_t step,
                               double init_lr,
                               size_t d_model,
                               uint64_t warmup,
                               double *out);

// Word error rate of one hypothesis against one reference.
//
// # Safety
// `reference` and `hypothesis` must be NUL-terminated strings and `out` a
// valid pointer.
enum StasrStatus stasr_wer(const char *reference, const char *hypothesis, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STASR_H */

#ifndef HGSEG_H
#define HGSEG_H

#include <stdint.h>

typedef enum HgsegStatus {
  HGSEG_STATUS_OK = 0,
  HGSEG_STATUS_NULL_ARGUMENT = 1,
  HGSEG_STATUS_INVALID_UTF8 = 2,
  HGSEG_STATUS_IO = 3,
  HGSEG_STATUS_FORMAT = 4,
  HGSEG_STATUS_INVALID_INPUT = 5,
  HGSEG_STATUS_CONFIG = 6,
  HGSEG_STATUS_SHAPE = 7,
  HGSEG_STATUS_CHECKPOINT = 8,
  HGSEG_STATUS_NON_FINITE = 9,
  HGSEG_STATUS_PANIC = 10,
} HgsegStatus;

/**
 * Opaque trained model.
 */
typedef struct HgsegModel HgsegModel;

typedef struct HgsegMetrics {
  double precision;
  double recall;
  double f1;
  double oov_recall;
  /**
   * Non-zero when the gold text has no OOV words.
   */
  int32_t oov_degenerate;
  uint64_t gold_words;
  uint64_t predicted_words;
  uint64_t correct_words;
} HgsegMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. On success `*out` holds a model to release with
 * `hgseg_model_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HgsegStatus hgseg_model_load(const char *path, struct HgsegModel **out);

/**
 * # Safety
 * `model` must come from `hgseg_model_load` and not be freed twice. Null is
 * ignored.
 */
void hgseg_model_free(struct HgsegModel *model);

/**
 * Segments UTF-8 text line by line. Words in the output are separated by
 * single spaces; line breaks are kept.
 *
 * # Safety
 * `model` must be a live model, `text` NUL-terminated and `out` valid.
 */
enum HgsegStatus hgseg_segment(const struct HgsegModel *model, const char *text, char **out);

/**
 * Applies the character normalization used by the models.
 *
 * # Safety
 * `text` must be NUL-terminated and `out` valid.
 */
enum HgsegStatus hgseg_normalize(const char *text, char **out);

/**
 * Scores space-segmented `pred` against `gold`, one sentence per line. OOV
 * recall uses the lexicon of `model` when it is not null and treats every
 * gold word as OOV otherwise.
 *
 * # Safety
 * `gold` and `pred` must be NUL-terminated, `model` null or live, `out` valid.
 */
enum HgsegStatus hgseg_score(const char *gold,
                             const char *pred,
                             const struct HgsegModel *model,
                             struct HgsegMetrics *out);

/**
 * # Safety
 * `s` must come from this library and not be freed twice. Null is ignored.
 */
void hgseg_string_free(char *s);

/**
 * Message of the last failed call on this thread, empty after a success.
 * Valid until the next call into the library on the same thread.
 */
const char *hgseg_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HGSEG_H */

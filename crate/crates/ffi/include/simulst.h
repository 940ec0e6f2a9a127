#ifndef SIMULST_H
#define SIMULST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// `k` value meaning "wait for the whole source".
#define SIMULST_WAIT_ALL ~0

// Result of every fallible call.
typedef enum SimulstStatus {
  SIMULST_STATUS_OK = 0,
  SIMULST_STATUS_NULL_POINTER = 1,
  SIMULST_STATUS_INVALID_ARGUMENT = 2,
  SIMULST_STATUS_IO = 3,
  SIMULST_STATUS_FORMAT = 4,
  SIMULST_STATUS_FINGERPRINT = 5,
  SIMULST_STATUS_NUMERIC = 6,
  SIMULST_STATUS_STREAM_ENDED = 7,
  SIMULST_STATUS_PANIC = 8,
} SimulstStatus;

// Kind of action taken by [`simulst_session_step`].
typedef enum SimulstAction {
  SIMULST_ACTION_READ = 0,
  SIMULST_ACTION_WRITE = 1,
  SIMULST_ACTION_FINISH = 2,
  // More frames are needed before the next action.
  SIMULST_ACTION_NEED_INPUT = 3,
} SimulstAction;

// A loaded model.
typedef struct SimulstModel SimulstModel;

// One streaming translation.
typedef struct SimulstSession SimulstSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread as a NUL-terminated
// string into `buf` (truncated to `cap` bytes) and returns the number of
// bytes the full message needs, including the terminator.
size_t simulst_last_error(char *buf, size_t cap);

// Loads a training checkpoint.
enum SimulstStatus simulst_model_load(const char *path, struct SimulstModel **out);

void simulst_model_free(struct SimulstModel *model);

// Feature dimension the model expects, or 0 for a null handle.
size_t simulst_model_feature_dim(const struct SimulstModel *model);

// Milliseconds per encoder frame, or 0 for a null handle.
double simulst_model_frame_ms(const struct SimulstModel *model);

// Look-ahead latency of the encoder in milliseconds.
double simulst_model_lookahead_ms(const struct SimulstModel *model);

// Starts a session. `k == 0` or `n == 0` selects the values the model was
// trained with; [`SIMULST_WAIT_ALL`] as `k` decodes full sentences.
enum SimulstStatus simulst_session_new(const struct SimulstModel *model,
                                       size_t k,
                                       size_t n,
                                       size_t beam,
                                       struct SimulstSession **out);

void simulst_session_free(struct SimulstSession *session);

// Appends `rows` feature frames (row-major, `rows × feature_dim` floats).
// `new_segments` (nullable) receives the number of segments completed.
enum SimulstStatus simulst_session_push(struct SimulstSession *session,
                                        const float *frames,
                                        size_t rows,
                                        size_t *new_segments);

// Signals end of input. `new_segments` as in [`simulst_session_push`].
enum SimulstStatus simulst_session_end(struct SimulstSession *session, size_t *new_segments);

// Takes the next action. For a write, up to `cap` committed tokens are
// copied to `tokens` and `n_tokens` receives their count; otherwise
// `n_tokens` is 0.
enum SimulstStatus simulst_session_step(struct SimulstSession *session,
                                        enum SimulstAction *action,
                                        size_t *tokens,
                                        size_t cap,
                                        size_t *n_tokens);

// Committed target token ids so far.
enum SimulstStatus simulst_session_hypothesis(const struct SimulstSession *session,
                                              size_t *buf,
                                              size_t cap,
                                              size_t *len);

// Listening duration in milliseconds of each committed token.
enum SimulstStatus simulst_session_delays(const struct SimulstSession *session,
                                          double *buf,
                                          size_t cap,
                                          size_t *len);

// Encoder frames produced so far.
size_t simulst_session_source_frames(const struct SimulstSession *session);

// Average lagging in milliseconds.
enum SimulstStatus simulst_average_lagging(const double *delays,
                                           size_t n,
                                           size_t source_frames,
                                           double frame_ms,
                                           size_t ref_len,
                                           double offset_ms,
                                           double *out);

// Average proportion in `(0, 1]`.
enum SimulstStatus simulst_average_proportion(const double *delays,
                                              size_t n,
                                              size_t source_frames,
                                              double frame_ms,
                                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIMULST_H */

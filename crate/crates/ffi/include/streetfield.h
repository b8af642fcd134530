#ifndef STREETFIELD_H
#define STREETFIELD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_ARGUMENT = 2,
  SF_STATUS_NOT_FOUND = 3,
  SF_STATUS_IO = 4,
  SF_STATUS_PARSE = 5,
  SF_STATUS_CHECKPOINT = 6,
  SF_STATUS_BUFFER_TOO_SMALL = 7,
  SF_STATUS_INTERNAL = 8,
} SfStatus;

// Owned bytes returned to the caller.
typedef struct SfBuffer SfBuffer;

// A loaded model directory with its configuration and trajectories.
typedef struct SfModel SfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sf_version(void);

// Length in bytes of the last error message on this thread, without NUL.
size_t sf_last_error_length(void);

// Copies the last error message into `buf` with a NUL terminator,
// truncating to `len - 1` bytes. Returns the full message length.
//
// # Safety
// `buf` must be null or valid for `len` bytes of writes.
size_t sf_last_error_message(char *buf, size_t len);

// Opens a model directory. `config_path` and `manifest_path` may be null:
// the default configuration is used and no trajectories are loaded.
//
// # Safety
// String arguments must be null or NUL-terminated; `out` must be writable.
enum SfStatus sf_model_open(const char *model_dir,
                            const char *config_path,
                            const char *manifest_path,
                            struct SfModel **out);

// # Safety
// `model` must be null or a handle from [`sf_model_open`] not yet freed.
void sf_model_free(struct SfModel *model);

// Number of blocks that have a trained model.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum SfStatus sf_model_block_count(const struct SfModel *model, size_t *out);

// Renders a JSON request (the `POST /render` body) to PNG bytes.
//
// # Safety
// `model` must be a live handle, `request_json` NUL-terminated and `out`
// writable. The buffer is released with [`sf_buffer_free`].
enum SfStatus sf_render_png(const struct SfModel *model,
                            const char *request_json,
                            struct SfBuffer **out);

// Renders a JSON request into caller memory as row-major RGB8.
// `capacity` must be at least `3 * width * height`.
//
// # Safety
// `model` must be a live handle, `request_json` NUL-terminated and
// `pixels` valid for `capacity` bytes of writes.
enum SfStatus sf_render_rgb8(const struct SfModel *model,
                             const char *request_json,
                             uint8_t *pixels,
                             size_t capacity);

// # Safety
// `buf` must be a live buffer.
const uint8_t *sf_buffer_data(const struct SfBuffer *buf);

// # Safety
// `buf` must be null or a live buffer.
size_t sf_buffer_len(const struct SfBuffer *buf);

// # Safety
// `buf` must be null or a buffer not yet freed.
void sf_buffer_free(struct SfBuffer *buf);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STREETFIELD_H */

#ifndef VISCODE_H
#define VISCODE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Payload kinds as stored in the envelope header.
#define VC_KIND_METADATA 0

#define VC_KIND_SOURCE 1

#define VC_KIND_SPEC 2

typedef enum VcStatus {
  VC_STATUS_OK = 0,
  VC_STATUS_NULL_ARGUMENT = 1,
  VC_STATUS_INVALID_ARGUMENT = 2,
  VC_STATUS_MODEL_MISSING = 3,
  VC_STATUS_BAD_IMAGE = 4,
  VC_STATUS_CAPACITY_EXCEEDED = 5,
  VC_STATUS_DECODE_FAILED = 6,
  VC_STATUS_INTERNAL = 99,
} VcStatus;

// Owned byte buffer handed to the caller.
typedef struct VcBuffer VcBuffer;

// Loaded importance and stego checkpoints.
typedef struct VcModels VcModels;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *vc_last_error(void);

// Load `importance.bin` and `stego.bin` from `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a writable pointer.
enum VcStatus vc_models_load(const char *dir, struct VcModels **out);

// # Safety
// `models` must come from [`vc_models_load`] and not be used afterwards.
void vc_models_free(struct VcModels *models);

// Largest payload (envelope bytes) a `width` x `height` image holds.
uintptr_t vc_capacity(uintptr_t width, uintptr_t height, uintptr_t eta);

// Embed `payload` into an encoded image (PNG or JPEG bytes) and return the
// coded image as PNG.
//
// # Safety
// Pointers must be valid for the given lengths; `out` must be writable.
enum VcStatus vc_encode(const struct VcModels *models,
                        const uint8_t *image,
                        uintptr_t image_len,
                        uint8_t kind,
                        const uint8_t *payload,
                        uintptr_t payload_len,
                        uintptr_t eta,
                        struct VcBuffer **out);

// Recover the payload of a coded image. `kind` receives the envelope kind.
//
// # Safety
// Pointers must be valid for the given lengths; `kind` and `out` must be writable.
enum VcStatus vc_decode(const struct VcModels *models,
                        const uint8_t *image,
                        uintptr_t image_len,
                        uint8_t *kind,
                        struct VcBuffer **out);

// # Safety
// `buf` must come from this library.
const uint8_t *vc_buffer_data(const struct VcBuffer *buf);

// # Safety
// `buf` must come from this library.
uintptr_t vc_buffer_len(const struct VcBuffer *buf);

// # Safety
// `buf` must come from this library and not be used afterwards.
void vc_buffer_free(struct VcBuffer *buf);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VISCODE_H */

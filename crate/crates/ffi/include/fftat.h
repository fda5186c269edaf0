#ifndef FFTAT_H
#define FFTAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum FftatStatus {
  FFTAT_STATUS_OK = 0,
  FFTAT_STATUS_NULL_POINTER = 1,
  FFTAT_STATUS_INVALID_ARGUMENT = 2,
  FFTAT_STATUS_CONFIG = 3,
  FFTAT_STATUS_IO = 4,
  FFTAT_STATUS_CHECKPOINT = 5,
  FFTAT_STATUS_NUMERICAL = 6,
  FFTAT_STATUS_PANIC = 7,
} FftatStatus;

// A `P×P` transferability graph.
typedef struct FftatGraphHandle FftatGraphHandle;

// Model in f64 precision, with the graph it was trained with.
typedef struct FftatModelHandle FftatModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null. Valid until
// the next failing call on the same thread.
const char *fftat_last_error_message(void);

// Fresh model with default dimensions except `image_side` and `classes`.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
enum FftatStatus fftat_model_new(size_t image_side,
                                 size_t classes,
                                 uint64_t seed,
                                 struct FftatModelHandle **out);

// Loads a training checkpoint written in either precision.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
enum FftatStatus fftat_model_load(const char *path, struct FftatModelHandle **out);

// Releases a model; null is ignored.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
void fftat_model_free(struct FftatModelHandle *model);

// Image side length in pixels; 0 for a null handle.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
size_t fftat_model_image_side(const struct FftatModelHandle *model);

// Number of classes; 0 for a null handle.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
size_t fftat_model_classes(const struct FftatModelHandle *model);

// Classifies `count` CHW images with values in [0, 1], writing one label
// per image. `images` holds `count * 3 * side * side` floats.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
enum FftatStatus fftat_model_predict(const struct FftatModelHandle *model,
                                     const float *images,
                                     size_t count,
                                     size_t *labels);

// Copy of the model's current graph.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
enum FftatStatus fftat_model_graph(const struct FftatModelHandle *model,
                                   struct FftatGraphHandle **out);

// All-ones graph over `patches` patches.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
enum FftatStatus fftat_graph_unweighted(size_t patches, struct FftatGraphHandle **out);

// Reads a graph CSV as written by training runs.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
enum FftatStatus fftat_graph_load_csv(const char *path, struct FftatGraphHandle **out);

// Releases a graph; null is ignored.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
void fftat_graph_free(struct FftatGraphHandle *graph);

// Side length `P`; 0 for a null handle.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
size_t fftat_graph_patches(const struct FftatGraphHandle *graph);

// Copies the row-major `P×P` matrix into `out`, which holds `len` doubles.
// # Safety
// Pointer arguments must be null or valid for the documented extent;
// handles must come from this library and not be freed yet.
enum FftatStatus fftat_graph_copy(const struct FftatGraphHandle *graph, double *out, size_t len);

// Transferability score for a discriminator source-probability `p`.
double fftat_transferability_score(double p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FFTAT_H */

/* Generated by cbindgen from mdrnet-ffi. Do not edit. */

#ifndef MDRNET_H
#define MDRNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  MDR_STATUS_OK = 0,
  MDR_STATUS_NULL_POINTER = 1,
  MDR_STATUS_INVALID_ARGUMENT = 2,
  MDR_STATUS_OUT_OF_BOUNDS = 3,
  MDR_STATUS_SHAPE = 4,
  MDR_STATUS_FORMAT = 5,
  MDR_STATUS_IO = 6,
  MDR_STATUS_CONFIG = 7,
  MDR_STATUS_NON_FINITE = 8,
  MDR_STATUS_CHECK_FAILED = 9,
  MDR_STATUS_PANIC = 10,
} MdrStatus;

typedef enum {
  MDR_REDUCTION_MEAN_POOL = 0,
  MDR_REDUCTION_MAX_POOL = 1,
  MDR_REDUCTION_FLATTEN_CONV = 2,
  MDR_REDUCTION_FULL_HEIGHT_SPARSE_CONV = 3,
  MDR_REDUCTION_SDR_RELU = 4,
  MDR_REDUCTION_SDR_SIGMOID = 5,
  MDR_REDUCTION_SDR_SOFTMAX = 6,
} MdrReduction;

/**
 * Dense BEV map handle.
 */
typedef struct MdrMap MdrMap;

/**
 * Backbone parameters handle.
 */
typedef struct MdrModel MdrModel;

/**
 * Sparse voxel tensor handle.
 */
typedef struct MdrTensor MdrTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Owned by the library.
 */
const char *mdr_last_error(void);

void mdr_clear_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mdr_version(void);

/**
 * # Safety
 * `out` must be valid for writing one pointer.
 */
MdrStatus mdr_tensor_new(size_t nx, size_t ny, size_t nz, size_t channels, MdrTensor **out);

/**
 * # Safety
 * `t` must be NULL or a handle from this library that has not been freed.
 */
void mdr_tensor_free(MdrTensor *t);

/**
 * Inserts or overwrites one voxel. `len` must equal the channel count.
 *
 * # Safety
 * `t` must be a live handle; `feat` must point to `len` readable doubles.
 */
MdrStatus mdr_tensor_set(MdrTensor *t,
                         uint32_t i,
                         uint32_t j,
                         uint32_t k,
                         const double *feat,
                         size_t len);

/**
 * Copies one voxel's features into `out` and sets `*found`; vacant voxels
 * leave `out` untouched.
 *
 * # Safety
 * `t` must be a live handle; `out` must hold `len` doubles; `found` must be writable.
 */
MdrStatus mdr_tensor_get(const MdrTensor *t,
                         uint32_t i,
                         uint32_t j,
                         uint32_t k,
                         double *out,
                         size_t len,
                         bool *found);

/**
 * Number of active voxels; 0 for NULL.
 *
 * # Safety
 * `t` must be NULL or a live handle.
 */
size_t mdr_tensor_len(const MdrTensor *t);

/**
 * # Safety
 * `t` must be NULL or a live handle.
 */
size_t mdr_tensor_channels(const MdrTensor *t);

/**
 * Reads a tensor file (SVT1).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
MdrStatus mdr_tensor_load(const char *path, MdrTensor **out);

/**
 * # Safety
 * `t` must be a live handle; `path` must be a NUL-terminated string.
 */
MdrStatus mdr_tensor_save(const MdrTensor *t, const char *path);

/**
 * Voxelizes a point file. `config_path` may be NULL for the built-in toy grid.
 *
 * # Safety
 * Paths must be NULL (config only) or NUL-terminated strings; `out` must be writable.
 */
MdrStatus mdr_voxelize_file(const char *bin_path, const char *config_path, MdrTensor **out);

/**
 * Reduces along height with freshly initialized parameters drawn from `seed`.
 *
 * # Safety
 * `t` must be a live handle; `out` must be writable.
 */
MdrStatus mdr_reduce(const MdrTensor *t, MdrReduction kind, uint64_t seed, MdrMap **out);

/**
 * # Safety
 * `m` must be NULL or a live handle.
 */
void mdr_map_free(MdrMap *m);

/**
 * # Safety
 * `m` must be a live handle; the out pointers must be writable.
 */
MdrStatus mdr_map_shape(const MdrMap *m, size_t *width, size_t *height, size_t *channels);

/**
 * Copies the map, laid out `(i * height + j) * channels + c`, into `out`.
 * `len` must equal `width * height * channels`.
 *
 * # Safety
 * `m` must be a live handle; `out` must hold `len` doubles.
 */
MdrStatus mdr_map_copy(const MdrMap *m, double *out, size_t len);

/**
 * Builds a backbone. `config_json` may be NULL for the default configuration.
 *
 * # Safety
 * `config_json` must be NULL or NUL-terminated; `out` must be writable.
 */
MdrStatus mdr_model_build(const char *config_json, uint64_t seed, MdrModel **out);

/**
 * # Safety
 * `m` must be NULL or a live handle.
 */
void mdr_model_free(MdrModel *m);

/**
 * # Safety
 * `m` must be NULL or a live handle.
 */
size_t mdr_model_num_params(const MdrModel *m);

/**
 * # Safety
 * `m` must be a live handle; `dir` must be NUL-terminated.
 */
MdrStatus mdr_model_save(const MdrModel *m, const char *dir);

/**
 * # Safety
 * `dir` must be NUL-terminated; `out` must be writable.
 */
MdrStatus mdr_model_load(const char *dir, MdrModel **out);

/**
 * Runs the backbone and returns the final BEV map.
 *
 * # Safety
 * `m` and `t` must be live handles; `out` must be writable.
 */
MdrStatus mdr_model_forward(const MdrModel *m, const MdrTensor *t, MdrMap **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDRNET_H */

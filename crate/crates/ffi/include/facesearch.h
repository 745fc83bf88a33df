#ifndef FACESEARCH_H
#define FACESEARCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every function.
typedef enum FsStatus {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_INVALID_ARGUMENT = 2,
  FS_STATUS_SHAPE = 3,
  FS_STATUS_DEGENERATE = 4,
  FS_STATUS_IO = 5,
  FS_STATUS_FORMAT = 6,
  FS_STATUS_BUFFER_TOO_SMALL = 7,
  FS_STATUS_PANIC = 8,
} FsStatus;

// Labeled synthetic dataset.
typedef struct FsDataset FsDataset;

// MLP backbone.
typedef struct FsNetwork FsNetwork;

// Per-parameter value grids.
typedef struct FsSearchSpace FsSearchSpace;

// Loss hyper-parameters: `cos(m1·θ + m2) − m3` for the target logit, scaled by
// `s_p`, and `s_n` for the others.
typedef struct FsLossParams {
  double m1;
  double m2;
  double m3;
  double s_p;
  double s_n;
} FsLossParams;

// Base MLP shape before depth and width ratios are applied.
typedef struct FsBaseArch {
  size_t input_dim;
  size_t base_depth;
  size_t base_width;
  size_t embed_dim;
} FsBaseArch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer stays
// valid until the next library call on the same thread.
const char *fs_last_error(void);

// Library version as a static NUL-terminated string.
const char *fs_version(void);

// Releases a string produced by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void fs_string_free(char *s);

// Generates a dataset from a JSON spec. Missing fields take their defaults;
// NULL or `"{}"` gives the default spec.
//
// # Safety
// `spec_json` must be NULL or a NUL-terminated string; `out` must be writable.
enum FsStatus fs_dataset_generate(const char *spec_json, struct FsDataset **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum FsStatus fs_dataset_load(const char *path, struct FsDataset **out);

// # Safety
// `ds` must be a live handle; `path` a NUL-terminated string.
enum FsStatus fs_dataset_save(const struct FsDataset *ds, const char *path);

// Number of samples, or 0 for NULL.
//
// # Safety
// `ds` must be NULL or a live handle.
size_t fs_dataset_len(const struct FsDataset *ds);

// Number of classes, or 0 for NULL.
//
// # Safety
// `ds` must be NULL or a live handle.
size_t fs_dataset_n_classes(const struct FsDataset *ds);

// Copies the labels into `out` (capacity `cap`). Fails with
// `BufferTooSmall` when `cap < fs_dataset_len(ds)`.
//
// # Safety
// `ds` must be a live handle; `out` must hold `cap` elements.
enum FsStatus fs_dataset_labels(const struct FsDataset *ds, size_t *out, size_t cap);

// # Safety
// `ds` must be NULL or a handle not yet freed.
void fs_dataset_free(struct FsDataset *ds);

// Cleans `ds`. The cleaned dataset goes to `cleaned_out` and, when
// `report_json_out` is not NULL, the cleaning report as a JSON string.
//
// # Safety
// `ds` must be a live handle; `cleaned_out` must be writable.
enum FsStatus fs_clean(const struct FsDataset *ds,
                       double tau_intra,
                       double tau_inter,
                       int leave_one_out,
                       struct FsDataset **cleaned_out,
                       char **report_json_out);

// Mean margin loss of `b` row embeddings `x` (b × d) against `k` class
// weights `w` (k × d). `logits_out` may be NULL or hold b × k values.
//
// # Safety
// Pointers must reference arrays of the stated sizes.
enum FsStatus fs_loss_forward(const double *x,
                              const size_t *y,
                              size_t b,
                              const double *w,
                              size_t k,
                              size_t d,
                              struct FsLossParams params,
                              double *loss_out,
                              double *logits_out);

// Loss and its gradients with respect to `x` (b × d) and `w` (k × d).
//
// # Safety
// Pointers must reference arrays of the stated sizes.
enum FsStatus fs_loss_backward(const double *x,
                               const size_t *y,
                               size_t b,
                               const double *w,
                               size_t k,
                               size_t d,
                               struct FsLossParams params,
                               double *loss_out,
                               double *grad_x_out,
                               double *grad_w_out);

// `acc · (cost / target_cost)^alpha`.
//
// # Safety
// `out` must be writable.
enum FsStatus fs_reward(double acc, double cost, double target_cost, double alpha, double *out);

// Data and loss difficulty of a combination given as nine values in the
// order tau_intra, tau_inter, m1, m2, m3, s_p, s_n, D, W.
//
// # Safety
// `values` must hold nine doubles; both outputs must be writable.
enum FsStatus fs_difficulty(const double *values, double *data_out, double *loss_out);

// True-accept rate at the threshold that meets `far_target` on the impostor scores.
//
// # Safety
// Score pointers must reference arrays of the stated lengths.
enum FsStatus fs_tar_at_far(const double *genuine,
                            size_t n_genuine,
                            const double *impostor,
                            size_t n_impostor,
                            double far_target,
                            double *out);

// The built-in grids.
//
// # Safety
// `out` must be writable.
enum FsStatus fs_space_default(struct FsSearchSpace **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum FsStatus fs_space_load(const char *path, struct FsSearchSpace **out);

// Writes the nine grid sizes.
//
// # Safety
// `space` must be a live handle; `sizes_out` must hold nine elements.
enum FsStatus fs_space_sizes(const struct FsSearchSpace *space, size_t *sizes_out);

// Maps nine grid indices to their values.
//
// # Safety
// `tokens` and `values_out` must hold nine elements.
enum FsStatus fs_space_decode(const struct FsSearchSpace *space,
                              const size_t *tokens,
                              double *values_out);

// Maps nine on-grid values back to grid indices.
//
// # Safety
// `values` and `tokens_out` must hold nine elements.
enum FsStatus fs_space_encode(const struct FsSearchSpace *space,
                              const double *values,
                              size_t *tokens_out);

// # Safety
// `space` must be NULL or a handle not yet freed.
void fs_space_free(struct FsSearchSpace *space);

// Builds a freshly initialised network from a base shape and expansion ratios.
//
// # Safety
// `out` must be writable.
enum FsStatus fs_network_instantiate(struct FsBaseArch base,
                                     double depth_ratio,
                                     double width_ratio,
                                     uint64_t seed,
                                     struct FsNetwork **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum FsStatus fs_network_load(const char *path, struct FsNetwork **out);

// # Safety
// `net` must be a live handle; `path` a NUL-terminated string.
enum FsStatus fs_network_save(const struct FsNetwork *net, const char *path);

// Input width, or 0 for NULL.
//
// # Safety
// `net` must be NULL or a live handle.
size_t fs_network_input_dim(const struct FsNetwork *net);

// Embedding width, or 0 for NULL.
//
// # Safety
// `net` must be NULL or a live handle.
size_t fs_network_embed_dim(const struct FsNetwork *net);

// Multiply-add count of one forward pass for a single input row.
//
// # Safety
// `net` must be a live handle; `out` must be writable.
enum FsStatus fs_network_flops(const struct FsNetwork *net, uint64_t *out);

// Embeds `rows` inputs of width `cols` into `out` (rows × embed_dim).
//
// # Safety
// `x` must hold rows × cols doubles and `out` rows × embed_dim.
enum FsStatus fs_network_forward(const struct FsNetwork *net,
                                 const double *x,
                                 size_t rows,
                                 size_t cols,
                                 double *out);

// # Safety
// `net` must be NULL or a handle not yet freed.
void fs_network_free(struct FsNetwork *net);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACESEARCH_H */

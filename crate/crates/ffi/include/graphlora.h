#ifndef GRAPHLORA_H
#define GRAPHLORA_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GlStatus {
  GL_STATUS_OK = 0,
  GL_STATUS_NULL_POINTER = 1,
  GL_STATUS_INVALID_ARGUMENT = 2,
  GL_STATUS_BUFFER_TOO_SMALL = 3,
  GL_STATUS_INVALID_INPUT = 10,
  GL_STATUS_CONTRACT = 11,
  GL_STATUS_FORMAT = 12,
  GL_STATUS_PROTOCOL = 13,
  GL_STATUS_TRAINING = 14,
  GL_STATUS_CONDITION = 15,
  GL_STATUS_NUMERIC = 16,
  /**
   * A verification command ran but its check failed.
   */
  GL_STATUS_VERIFICATION = 17,
  GL_STATUS_CONFIG = 18,
  GL_STATUS_IO = 19,
  GL_STATUS_PANIC = 99,
} GlStatus;

/**
 * Loaded attributed graph.
 */
typedef struct GlGraph GlGraph;

/**
 * Dense row-major matrix of doubles.
 */
typedef struct GlMatrix GlMatrix;

/**
 * Fine-tuned model (frozen backbone, adapters, projector, head).
 */
typedef struct GlModel GlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t gl_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gl_version(void);

/**
 * Loads a graph directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out_graph` must be writable.
 */
enum GlStatus gl_graph_load(const char *dir, struct GlGraph **out_graph);

/**
 * # Safety
 * `graph` must be null or a handle from [`gl_graph_load`] not yet freed.
 */
void gl_graph_free(struct GlGraph *graph);

/**
 * Node count, feature dimension and class count of `graph`.
 *
 * # Safety
 * `graph` must be a live handle; each output pointer may be null.
 */
enum GlStatus gl_graph_shape(const struct GlGraph *graph,
                             size_t *nodes,
                             size_t *feature_dim,
                             size_t *classes);

/**
 * Personalized PageRank diffusion of `graph` with teleport `alpha`
 * (closed form, self-loops as in the default configuration).
 *
 * # Safety
 * `graph` must be a live handle; `out_matrix` must be writable.
 */
enum GlStatus gl_ppr_diffusion(const struct GlGraph *graph,
                               double alpha,
                               struct GlMatrix **out_matrix);

/**
 * Squared MMD between two row-major sample sets with the median-heuristic
 * Gaussian kernel.
 *
 * # Safety
 * `x` must hold `nx * dim` doubles, `y` `ny * dim`; `out_value` writable.
 */
enum GlStatus gl_mmd(const double *x,
                     size_t nx,
                     const double *y,
                     size_t ny,
                     size_t dim,
                     double *out_value);

/**
 * Loads a fine-tuned model directory written by the `finetune` command.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out_model` must be writable.
 */
enum GlStatus gl_model_load(const char *dir, struct GlModel **out_model);

/**
 * # Safety
 * `model` must be null or a handle from [`gl_model_load`] not yet freed.
 */
void gl_model_free(struct GlModel *model);

/**
 * Final-layer embeddings of every node of `graph`.
 *
 * # Safety
 * `model` and `graph` must be live handles; `out_matrix` writable.
 */
enum GlStatus gl_model_embed(const struct GlModel *model,
                             const struct GlGraph *graph,
                             struct GlMatrix **out_matrix);

/**
 * Predicted class of every node of `graph`, written to `labels`
 * (capacity `len`, at least the node count).
 *
 * # Safety
 * `model` and `graph` must be live handles; `labels` valid for `len` entries.
 */
enum GlStatus gl_model_predict(const struct GlModel *model,
                               const struct GlGraph *graph,
                               uint32_t *labels,
                               size_t len);

/**
 * # Safety
 * `matrix` must be a live handle; outputs may be null.
 */
enum GlStatus gl_matrix_shape(const struct GlMatrix *matrix, size_t *rows, size_t *cols);

/**
 * Copies the row-major contents of `matrix` into `buf` (capacity `len`).
 *
 * # Safety
 * `matrix` must be a live handle; `buf` valid for `len` doubles.
 */
enum GlStatus gl_matrix_copy(const struct GlMatrix *matrix, double *buf, size_t len);

/**
 * # Safety
 * `matrix` must be null or a live handle not yet freed.
 */
void gl_matrix_free(struct GlMatrix *matrix);

/**
 * Runs a pipeline command (`pretrain`, `finetune`, `eval`, `ablate`,
 * `theory`, `gradcheck`) with a JSON run configuration (empty string for
 * defaults). On success `out_report` receives the JSON report, to be freed
 * with [`gl_string_free`]. Commands whose own check fails still write the
 * report and return `Verification`.
 *
 * # Safety
 * `command` and `config_json` must be NUL-terminated strings; `out_report`
 * must be writable.
 */
enum GlStatus gl_run(const char *command, const char *config_json, char **out_report);

/**
 * # Safety
 * `s` must be null or a string returned by this library not yet freed.
 */
void gl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRAPHLORA_H */

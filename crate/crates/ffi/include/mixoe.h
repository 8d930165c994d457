#ifndef MIXOE_H
#define MIXOE_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MixoeStatus {
  MIXOE_STATUS_OK = 0,
  MIXOE_STATUS_NULL_POINTER = 1,
  MIXOE_STATUS_INVALID_ARGUMENT = 2,
  MIXOE_STATUS_INVALID_DATA = 3,
  MIXOE_STATUS_INVALID_INPUT = 4,
  MIXOE_STATUS_UNSUPPORTED = 5,
  MIXOE_STATUS_IO = 6,
  MIXOE_STATUS_PARSE = 7,
  MIXOE_STATUS_CHECKPOINT = 8,
  MIXOE_STATUS_DIVERGENCE = 9,
  MIXOE_STATUS_PANIC = 10,
} MixoeStatus;

typedef enum MixoeScorer {
  MIXOE_SCORER_MSP = 0,
  MIXOE_SCORER_ODIN = 1,
  MIXOE_SCORER_ENERGY = 2,
} MixoeScorer;

/**
 * A classifier restored from a checkpoint.
 */
typedef struct MixoeModel MixoeModel;

/**
 * Holdout environments produced by [`mixoe_splits_make`].
 */
typedef struct MixoeSplitSet MixoeSplitSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library on the same thread.
 */
const char *mixoe_last_error(void);

/**
 * Frees a string returned by this library.
 */
void mixoe_string_free(char *s);

/**
 * Tie-aware AUROC with ID as the positive class.
 */
enum MixoeStatus mixoe_auroc(const double *id_scores,
                             size_t n_id,
                             const double *ood_scores,
                             size_t n_ood,
                             double *out);

/**
 * Fraction of OOD scores rejected at the threshold accepting `tpr_target`
 * of ID.
 */
enum MixoeStatus mixoe_tnr_at_tpr(const double *id_scores,
                                  size_t n_id,
                                  const double *ood_scores,
                                  size_t n_ood,
                                  double tpr_target,
                                  double *out);

/**
 * Scores each of `rows` logit vectors of length `k`. A non-positive
 * `temperature` selects the scorer's default.
 */
enum MixoeStatus mixoe_score(enum MixoeScorer scorer,
                             const double *logits,
                             size_t rows,
                             size_t k,
                             double temperature,
                             double *out);

/**
 * `λ·onehot(label) + (1−λ)·uniform` over `k` classes.
 */
enum MixoeStatus mixoe_soft_target(size_t label, size_t k, double lambda, double *out);

/**
 * `λ·x_in + (1−λ)·x_out`, elementwise over `len` values.
 */
enum MixoeStatus mixoe_mix_linear(const double *x_in,
                                  const double *x_out,
                                  size_t len,
                                  double lambda,
                                  double *out);

/**
 * Pastes a box of `x_out` into `x_in` (both `channels×height×width`). The
 * box centre is drawn from a generator seeded with `seed`; the ID share
 * after clipping goes to `lambda_adjusted`.
 */
enum MixoeStatus mixoe_mix_cut(const double *x_in,
                               const double *x_out,
                               size_t channels,
                               size_t height,
                               size_t width,
                               double lambda,
                               uint64_t seed,
                               double *out,
                               double *lambda_adjusted);

/**
 * Draws `n_splits` holdout environments over `classes`.
 */
enum MixoeStatus mixoe_splits_make(const char *dataset,
                                   const char *const *classes,
                                   size_t n_classes,
                                   const char *const *coarse_sources,
                                   size_t n_coarse,
                                   size_t n_ood,
                                   uint32_t n_splits,
                                   uint64_t seed,
                                   struct MixoeSplitSet **out);

enum MixoeStatus mixoe_splits_len(const struct MixoeSplitSet *set, size_t *out);

/**
 * Manifest text of split `index` (0-based). Free with
 * [`mixoe_string_free`].
 */
enum MixoeStatus mixoe_splits_manifest(const struct MixoeSplitSet *set, size_t index, char **out);

void mixoe_splits_free(struct MixoeSplitSet *set);

/**
 * Rebuilds the classifier recorded in a checkpoint file.
 */
enum MixoeStatus mixoe_model_load(const char *path, struct MixoeModel **out);

enum MixoeStatus mixoe_model_input_dim(const struct MixoeModel *model, size_t *out);

enum MixoeStatus mixoe_model_num_classes(const struct MixoeModel *model, size_t *out);

/**
 * Logits for `rows` inputs of `input_dim` values each, written row-major
 * into `out` (`rows × num_classes`).
 */
enum MixoeStatus mixoe_model_forward(const struct MixoeModel *model,
                                     const double *inputs,
                                     size_t rows,
                                     double *out);

void mixoe_model_free(struct MixoeModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXOE_H */

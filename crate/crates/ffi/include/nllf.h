#ifndef NLLF_H
#define NLLF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NllfStatus {
  NLLF_STATUS_OK = 0,
  NLLF_STATUS_NULL_POINTER = 1,
  NLLF_STATUS_INVALID_UTF8 = 2,
  NLLF_STATUS_IO = 3,
  NLLF_STATUS_PARSE = 4,
  NLLF_STATUS_VALIDATION = 5,
  NLLF_STATUS_INTERNAL = 6,
  NLLF_STATUS_PANIC = 7,
} NllfStatus;

/**
 * Trained question-answering pair encoder.
 */
typedef struct NllfEncoder NllfEncoder;

/**
 * Fitted decision tree.
 */
typedef struct NllfTree NllfTree;

/**
 * Metrics of one confusion matrix; the headline triple follows `macro_mode`.
 */
typedef struct NllfMetrics {
  double accuracy;
  double precision_pos;
  double recall_pos;
  double f1_pos;
  double precision_neg;
  double recall_neg;
  double f1_neg;
  double macro_precision;
  double macro_recall;
  double macro_f1;
  double headline_precision;
  double headline_recall;
  double headline_f1;
} NllfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the
 * library and valid until the next failing call on the same thread.
 */
const char *nllf_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void nllf_string_free(char *s);

/**
 * Loads a tree from the `tree.json` written by the training stage.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NllfStatus nllf_tree_load(const char *path, struct NllfTree **out_tree);

/**
 * # Safety
 * `tree` must come from [`nllf_tree_load`] and not be used afterwards.
 */
void nllf_tree_free(struct NllfTree *tree);

/**
 * Number of feature columns a row must have.
 *
 * # Safety
 * `tree` must be a live handle or null (returns 0).
 */
size_t nllf_tree_width(const struct NllfTree *tree);

/**
 * Id of feature column `index`, as a newly allocated string.
 *
 * # Safety
 * `tree` must be a live handle; `out_id` must be writable.
 */
enum NllfStatus nllf_tree_feature_id(const struct NllfTree *tree, size_t index, char **out_id);

/**
 * Predicts one row: class 0/1 and the leaf's positive share.
 * Either output pointer may be null.
 *
 * # Safety
 * `values` must point at `len` doubles in the tree's column order.
 */
enum NllfStatus nllf_tree_predict(const struct NllfTree *tree,
                                  const double *values,
                                  size_t len,
                                  int32_t *out_class,
                                  double *out_positive_share);

/**
 * Decision path of one row as a JSON document; free with [`nllf_string_free`].
 *
 * # Safety
 * As for [`nllf_tree_predict`]; `out_json` must be writable.
 */
enum NllfStatus nllf_tree_explain(const struct NllfTree *tree,
                                  const double *values,
                                  size_t len,
                                  char **out_json);

/**
 * Loads a trained pair encoder from its directory (`run/nllfg`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out_encoder` must be writable.
 */
enum NllfStatus nllf_encoder_load(const char *dir, struct NllfEncoder **out_encoder);

/**
 * # Safety
 * `encoder` must come from [`nllf_encoder_load`] and not be used afterwards.
 */
void nllf_encoder_free(struct NllfEncoder *encoder);

/**
 * Independent yes and no scores in (0, 1) for a text and a question.
 *
 * # Safety
 * `text` and `question` must be NUL-terminated; outputs must be writable.
 */
enum NllfStatus nllf_encoder_score(const struct NllfEncoder *encoder,
                                   const char *text_,
                                   const char *question,
                                   double *out_yes,
                                   double *out_no);

/**
 * Reads a yes/no verdict out of an LLM response with the default
 * vocabulary. `out_answer` gets 1 for yes, 0 for no, -1 when there is none.
 *
 * # Safety
 * `response` must be NUL-terminated; `out_answer` must be writable.
 */
enum NllfStatus nllf_extract_answer(const char *response,
                                    bool chain_of_thought,
                                    int32_t *out_answer);

/**
 * Metrics of a binary confusion matrix. Empty denominators give 0.
 *
 * # Safety
 * `out_metrics` must be writable.
 */
enum NllfStatus nllf_metrics(uint64_t tp,
                             uint64_t fp,
                             uint64_t tn,
                             uint64_t fn_,
                             bool macro_mode,
                             struct NllfMetrics *out_metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NLLF_H */

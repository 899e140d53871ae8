#ifndef PROCPLAN_H
#define PROCPLAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PpStatus {
  PP_STATUS_OK = 0,
  PP_STATUS_NULL_POINTER = 1,
  PP_STATUS_INVALID_ARGUMENT = 2,
  PP_STATUS_SHAPE = 3,
  PP_STATUS_IO = 4,
  PP_STATUS_PARSE = 5,
  PP_STATUS_NUMERIC = 6,
  PP_STATUS_PANIC = 7,
} PpStatus;

/*
 Loaded checkpoint.
 */
typedef struct PpModel PpModel;

typedef struct PpPlanMetrics {
  double success_rate;
  double mean_accuracy;
  double mean_iou;
} PpPlanMetrics;

typedef struct PpModelInfo {
  size_t horizon;
  size_t num_actions;
  size_t input_dim;
  size_t noise_dim;
} PpModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or NULL. The pointer
 stays valid until the next call into this library on the same thread.
 */
const char *pp_last_error(void);

/*
 Most likely action sequence under `emissions` (`[horizon, num_actions]`)
 and `transitions` (`[num_actions, num_actions]`), written to
 `out_plan[horizon]`. Ties go to the lowest action id.

 # Safety
 All pointers must reference buffers of the stated sizes.
 */
enum PpStatus pp_viterbi(const double *emissions,
                         size_t horizon,
                         size_t num_actions,
                         const double *transitions,
                         uint32_t *out_plan);

/*
 Row-stochastic transition matrix estimated from `n_plans` plans of
 length `horizon`, written row-major to `out[num_actions * num_actions]`.

 # Safety
 All pointers must reference buffers of the stated sizes.
 */
enum PpStatus pp_transitions(const uint32_t *plans,
                             size_t n_plans,
                             size_t horizon,
                             size_t num_actions,
                             double *out);

/*
 SR, mAcc and mIoU of `n` predicted plans against `n` ground-truth plans.

 # Safety
 `preds` and `gts` must hold `n * horizon` ids; `out` must be valid.
 */
enum PpStatus pp_plan_metrics(const uint32_t *preds,
                              const uint32_t *gts,
                              size_t n,
                              size_t horizon,
                              struct PpPlanMetrics *out);

/*
 Loads a checkpoint directory written by `procplan train`.

 # Safety
 `dir` must be a NUL-terminated UTF-8 path; `out` must be valid.
 */
enum PpStatus pp_model_load(const char *dir, struct PpModel **out);

/*
 Releases a model. NULL is ignored.

 # Safety
 `model` must come from [`pp_model_load`] and not be used afterwards.
 */
void pp_model_free(struct PpModel *model);

/*
 # Safety
 `model` and `out` must be valid.
 */
enum PpStatus pp_model_info(const struct PpModel *model, struct PpModelInfo *out);

/*
 Draws `k` plans for one start/goal pair (each `input_dim` floats) and
 writes them to `out_plans[k * horizon]`. Same seed, same plans.

 # Safety
 `model` must be valid and the buffers must have the stated sizes.
 */
enum PpStatus pp_model_sample(const struct PpModel *model,
                              const double *v_start,
                              const double *v_goal,
                              size_t input_dim,
                              size_t k,
                              uint64_t seed,
                              uint32_t *out_plans);

/*
 Samples `k` plans and decodes them with Viterbi over their marginal,
 using `transitions` (`[num_actions, num_actions]`). Writes
 `out_plan[horizon]`.

 # Safety
 `model` must be valid and the buffers must have the stated sizes.
 */
enum PpStatus pp_model_plan(const struct PpModel *model,
                            const double *v_start,
                            const double *v_goal,
                            size_t input_dim,
                            size_t k,
                            uint64_t seed,
                            const double *transitions,
                            uint32_t *out_plan);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROCPLAN_H */

#ifndef WPT_H
#define WPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every API call. Anything but `Ok` leaves a message readable
 * through `wpt_last_error` on the calling thread.
 */
typedef enum WptStatus {
  WptStatus_Ok = 0,
  /**
   * A parameter was malformed: bad JSON, bad shape, bad config.
   */
  WptStatus_InvalidArgument = 1,
  /**
   * The graph or plan is structurally unusable.
   */
  WptStatus_InvalidGraph = 2,
  /**
   * A kernel or cost evaluation failed.
   */
  WptStatus_EvaluationFailed = 3,
  /**
   * The operation is not supported for this operator or layout.
   */
  WptStatus_Unsupported = 4,
  /**
   * A required pointer was null.
   */
  WptStatus_NullPointer = 5,
  /**
   * A string argument was not valid UTF-8.
   */
  WptStatus_InvalidUtf8 = 6,
  /**
   * The implementation panicked; treat the handle set as poisoned.
   */
  WptStatus_Panic = 7,
} WptStatus;

/**
 * Physical order of a rank-4 tensor; `Unspecified` for other ranks.
 */
typedef enum WptLayout {
  WptLayout_Unspecified = 0,
  WptLayout_Nchw = 1,
  WptLayout_Nhwc = 2,
} WptLayout;

typedef enum WptPadding {
  WptPadding_Same = 0,
  WptPadding_Valid = 1,
} WptPadding;

/**
 * Cost oracle for `wpt_tune_conv`: the deterministic synthetic surface,
 * or wall-clock measurement of the real kernels.
 */
typedef enum WptEvaluator {
  WptEvaluator_Synthetic = 0,
  WptEvaluator_Measured = 1,
} WptEvaluator;

/**
 * Named input tensors for `wpt_execute`.
 */
typedef struct WptBindings WptBindings;

typedef struct WptGraph WptGraph;

/**
 * Output tensors of one execution, in stable name order.
 */
typedef struct WptOutputs WptOutputs;

typedef struct WptPlan WptPlan;

typedef struct WptTemplate WptTemplate;

typedef struct WptTensor WptTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *wpt_last_error(void);

/**
 * Releases a string returned by this library.
 */
void wpt_string_free(char *text);

/**
 * Parses a graph from its JSON wire format.
 */
enum WptStatus wpt_graph_from_json(const char *json, struct WptGraph **out);

/**
 * Serializes a graph to its JSON wire format.
 */
enum WptStatus wpt_graph_to_json(const struct WptGraph *graph, char **out);

void wpt_graph_free(struct WptGraph *graph);

/**
 * The built-in conv schedule template.
 */
enum WptStatus wpt_template_default_conv(struct WptTemplate **out);

/**
 * Content hash identifying the template.
 */
enum WptStatus wpt_template_id(const struct WptTemplate *template_, char **out);

void wpt_template_free(struct WptTemplate *template_);

/**
 * Folds constants, fuses operators, tunes every supported operator with
 * genetic search against the deterministic synthetic cost model, and
 * returns the rewritten graph plus the inference plan for it. `budget`
 * caps evaluations per operator; 0 means the search default. Both output
 * handles are written on success only.
 */
enum WptStatus wpt_optimize(const struct WptGraph *graph,
                            const struct WptTemplate *template_,
                            uint64_t seed,
                            size_t budget,
                            struct WptGraph **optimized_out,
                            struct WptPlan **plan_out);

/**
 * Parses a plan from JSON.
 */
enum WptStatus wpt_plan_from_json(const char *json, struct WptPlan **out);

/**
 * Serializes a plan to JSON.
 */
enum WptStatus wpt_plan_to_json(const struct WptPlan *plan, char **out);

/**
 * Sum of the per-node cost estimates the plan was selected under.
 */
enum WptStatus wpt_plan_estimate_ms(const struct WptPlan *plan, double *out);

void wpt_plan_free(struct WptPlan *plan);

/**
 * Copies `len` floats into a fresh tensor. Rank-4 tensors carry the given
 * layout; other ranks must pass `Unspecified`.
 */
enum WptStatus wpt_tensor_create(const size_t *dims,
                                 size_t rank,
                                 enum WptLayout layout,
                                 const float *data,
                                 size_t len,
                                 struct WptTensor **out);

enum WptStatus wpt_tensor_rank(const struct WptTensor *tensor, size_t *out);

/**
 * Writes up to `cap` dimension sizes.
 */
enum WptStatus wpt_tensor_dims(const struct WptTensor *tensor, size_t *dims, size_t cap);

/**
 * Borrows the tensor's payload; the view dies with the tensor.
 */
enum WptStatus wpt_tensor_data(const struct WptTensor *tensor, const float **data, size_t *len);

void wpt_tensor_free(struct WptTensor *tensor);

enum WptStatus wpt_bindings_new(struct WptBindings **out);

/**
 * Binds a copy of `tensor` to the placeholder `node_id`, replacing any
 * previous binding for it.
 */
enum WptStatus wpt_bindings_set(struct WptBindings *bindings,
                                const char *node_id,
                                const struct WptTensor *tensor);

void wpt_bindings_free(struct WptBindings *bindings);

/**
 * Executes `plan` over `graph` with the bound inputs. The template must
 * be the one the plan was tuned under.
 */
enum WptStatus wpt_execute(const struct WptGraph *graph,
                           const struct WptPlan *plan,
                           const struct WptTemplate *template_,
                           const struct WptBindings *bindings,
                           struct WptOutputs **out);

enum WptStatus wpt_outputs_count(const struct WptOutputs *outputs, size_t *out);

/**
 * Name of the `index`-th output, in stable name order.
 */
enum WptStatus wpt_outputs_name(const struct WptOutputs *outputs, size_t index, char **out);

/**
 * Copies the named output into a fresh tensor handle.
 */
enum WptStatus wpt_outputs_get(const struct WptOutputs *outputs,
                               const char *name,
                               struct WptTensor **out);

void wpt_outputs_free(struct WptOutputs *outputs);

/**
 * Tunes one square-kernel conv with genetic search and writes the winning
 * schedule into `config_out` (one value per template parameter) plus its
 * cost into `runtime_ms`. `budget` of 0 means the search default; the
 * measured evaluator times the real kernels, so expect it to be slow.
 */
enum WptStatus wpt_tune_conv(const struct WptTemplate *template_,
                             size_t n,
                             size_t c_in,
                             size_t c_out,
                             size_t kernel,
                             size_t h,
                             size_t w,
                             size_t stride,
                             enum WptPadding padding,
                             enum WptEvaluator evaluator,
                             uint64_t seed,
                             size_t budget,
                             uint64_t *config_out,
                             size_t config_cap,
                             double *runtime_ms);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WPT_H */

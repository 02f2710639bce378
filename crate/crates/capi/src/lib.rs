//! C bindings over the graph, tuning, and execution APIs. Every handle is
//! opaque; every call returns a status code and records a message for
//! `wpt_last_error` on failure. Returned strings belong to the caller and
//! are released with `wpt_string_free`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use wpt_core::evaluator::{MeasureOptions, MeasuredEvaluator, SyntheticEvaluator};
use wpt_core::genetic::{run_genetic, GeneticConfig};
use wpt_core::graph::json::{graph_from_json, graph_to_json};
use wpt_core::graph::passes::{constant_fold, fuse_operators};
use wpt_core::graph::{op_signature, ConvSpec, Graph, Layout, OperatorSpec, Padding, TensorSpec};
use wpt_core::kernels::Tensor;
use wpt_core::planner::{
    optimize_graph, EvaluatorChoice, InferencePlan, PlannerOptions, SearchStrategy, TuneOptions,
};
use wpt_core::runtime::{execute, ExecutionOutcome};
use wpt_core::schedule::ScheduleTemplate;
use wpt_core::Error;

/// Result of every API call. Anything but `Ok` leaves a message readable
/// through `wpt_last_error` on the calling thread.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WptStatus {
    Ok = 0,
    /// A parameter was malformed: bad JSON, bad shape, bad config.
    InvalidArgument = 1,
    /// The graph or plan is structurally unusable.
    InvalidGraph = 2,
    /// A kernel or cost evaluation failed.
    EvaluationFailed = 3,
    /// The operation is not supported for this operator or layout.
    Unsupported = 4,
    /// A required pointer was null.
    NullPointer = 5,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 6,
    /// The implementation panicked; treat the handle set as poisoned.
    Panic = 7,
}

/// Physical order of a rank-4 tensor; `Unspecified` for other ranks.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WptLayout {
    Unspecified = 0,
    Nchw = 1,
    Nhwc = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WptPadding {
    Same = 0,
    Valid = 1,
}

/// Cost oracle for `wpt_tune_conv`: the deterministic synthetic surface,
/// or wall-clock measurement of the real kernels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WptEvaluator {
    Synthetic = 0,
    Measured = 1,
}

pub struct WptGraph {
    inner: Graph,
}

pub struct WptTemplate {
    inner: ScheduleTemplate,
}

pub struct WptPlan {
    inner: InferencePlan,
}

pub struct WptTensor {
    inner: Tensor,
}

/// Named input tensors for `wpt_execute`.
pub struct WptBindings {
    inner: BTreeMap<String, Tensor>,
}

/// Output tensors of one execution, in stable name order.
pub struct WptOutputs {
    inner: ExecutionOutcome,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = CString::new(message.replace('\0', " ")).expect("nul stripped");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = sanitized);
}

fn status_of(err: &Error) -> WptStatus {
    if err.is_evaluation_failure() {
        return WptStatus::EvaluationFailed;
    }
    match err {
        Error::InvalidGraph(_) | Error::UnboundNode(_) | Error::Malformed { .. } => {
            WptStatus::InvalidGraph
        }
        Error::Unsupported(_) | Error::UnsupportedRank(_) => WptStatus::Unsupported,
        _ => WptStatus::InvalidArgument,
    }
}

fn fail(err: Error) -> WptStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

/// Runs `body` with panics converted to a status instead of unwinding
/// across the FFI boundary.
fn guarded(body: impl FnOnce() -> WptStatus) -> WptStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&msg);
            WptStatus::Panic
        }
    }
}

macro_rules! require {
    ($ptr:expr, $name:literal) => {
        if $ptr.is_null() {
            set_error(concat!($name, " is null"));
            return WptStatus::NullPointer;
        }
    };
}

unsafe fn utf8_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, WptStatus> {
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error(&format!("{name} is not valid UTF-8"));
            Err(WptStatus::InvalidUtf8)
        }
    }
}

fn give_string(text: String, out: *mut *mut c_char) -> WptStatus {
    let c = match CString::new(text) {
        Ok(c) => c,
        Err(_) => {
            set_error("string contains an interior NUL byte");
            return WptStatus::InvalidArgument;
        }
    };
    unsafe { *out = c.into_raw() };
    WptStatus::Ok
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wpt_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Releases a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn wpt_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}

/// Parses a graph from its JSON wire format.
#[no_mangle]
pub unsafe extern "C" fn wpt_graph_from_json(
    json: *const c_char,
    out: *mut *mut WptGraph,
) -> WptStatus {
    require!(json, "json");
    require!(out, "out");
    guarded(|| {
        let text = match utf8_arg(json, "json") {
            Ok(t) => t,
            Err(status) => return status,
        };
        match graph_from_json(text) {
            Ok(graph) => {
                *out = Box::into_raw(Box::new(WptGraph { inner: graph }));
                WptStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Serializes a graph to its JSON wire format.
#[no_mangle]
pub unsafe extern "C" fn wpt_graph_to_json(
    graph: *const WptGraph,
    out: *mut *mut c_char,
) -> WptStatus {
    require!(graph, "graph");
    require!(out, "out");
    guarded(|| give_string(graph_to_json(&(*graph).inner), out))
}

#[no_mangle]
pub unsafe extern "C" fn wpt_graph_free(graph: *mut WptGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// The built-in conv schedule template.
#[no_mangle]
pub unsafe extern "C" fn wpt_template_default_conv(out: *mut *mut WptTemplate) -> WptStatus {
    require!(out, "out");
    guarded(|| {
        *out = Box::into_raw(Box::new(WptTemplate { inner: ScheduleTemplate::conv_default() }));
        WptStatus::Ok
    })
}

/// Content hash identifying the template.
#[no_mangle]
pub unsafe extern "C" fn wpt_template_id(
    template: *const WptTemplate,
    out: *mut *mut c_char,
) -> WptStatus {
    require!(template, "template");
    require!(out, "out");
    guarded(|| give_string((*template).inner.template_id(), out))
}

#[no_mangle]
pub unsafe extern "C" fn wpt_template_free(template: *mut WptTemplate) {
    if !template.is_null() {
        drop(Box::from_raw(template));
    }
}

/// Folds constants, fuses operators, tunes every supported operator with
/// genetic search against the deterministic synthetic cost model, and
/// returns the rewritten graph plus the inference plan for it. `budget`
/// caps evaluations per operator; 0 means the search default. Both output
/// handles are written on success only.
#[no_mangle]
pub unsafe extern "C" fn wpt_optimize(
    graph: *const WptGraph,
    template: *const WptTemplate,
    seed: u64,
    budget: usize,
    optimized_out: *mut *mut WptGraph,
    plan_out: *mut *mut WptPlan,
) -> WptStatus {
    require!(graph, "graph");
    require!(template, "template");
    require!(optimized_out, "optimized_out");
    require!(plan_out, "plan_out");
    guarded(|| {
        let staged = match constant_fold(&(*graph).inner).and_then(|g| fuse_operators(&g)) {
            Ok(g) => g,
            Err(err) => return fail(err),
        };
        let options = PlannerOptions {
            strategies: vec![SearchStrategy::Genetic],
            evaluator: EvaluatorChoice::Synthetic { noise: 0.0 },
            tune: TuneOptions { budget: (budget > 0).then_some(budget), seed },
        };
        match optimize_graph(&staged, &(*template).inner, &options, None) {
            Ok(mut outcome) => {
                outcome.plan.seed = seed;
                *optimized_out = Box::into_raw(Box::new(WptGraph { inner: staged }));
                *plan_out = Box::into_raw(Box::new(WptPlan { inner: outcome.plan }));
                WptStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Parses a plan from JSON.
#[no_mangle]
pub unsafe extern "C" fn wpt_plan_from_json(
    json: *const c_char,
    out: *mut *mut WptPlan,
) -> WptStatus {
    require!(json, "json");
    require!(out, "out");
    guarded(|| {
        let text = match utf8_arg(json, "json") {
            Ok(t) => t,
            Err(status) => return status,
        };
        match serde_json::from_str::<InferencePlan>(text) {
            Ok(plan) => {
                *out = Box::into_raw(Box::new(WptPlan { inner: plan }));
                WptStatus::Ok
            }
            Err(err) => {
                set_error(&format!("malformed plan JSON: {err}"));
                WptStatus::InvalidArgument
            }
        }
    })
}

/// Serializes a plan to JSON.
#[no_mangle]
pub unsafe extern "C" fn wpt_plan_to_json(
    plan: *const WptPlan,
    out: *mut *mut c_char,
) -> WptStatus {
    require!(plan, "plan");
    require!(out, "out");
    guarded(|| match serde_json::to_string_pretty(&(*plan).inner) {
        Ok(text) => give_string(text, out),
        Err(err) => {
            set_error(&format!("plan serialization failed: {err}"));
            WptStatus::InvalidArgument
        }
    })
}

/// Sum of the per-node cost estimates the plan was selected under.
#[no_mangle]
pub unsafe extern "C" fn wpt_plan_estimate_ms(
    plan: *const WptPlan,
    out: *mut f64,
) -> WptStatus {
    require!(plan, "plan");
    require!(out, "out");
    *out = (*plan).inner.static_estimate_ms;
    WptStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn wpt_plan_free(plan: *mut WptPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

fn layout_of(layout: WptLayout) -> Option<Layout> {
    match layout {
        WptLayout::Unspecified => None,
        WptLayout::Nchw => Some(Layout::Nchw),
        WptLayout::Nhwc => Some(Layout::Nhwc),
    }
}

/// Copies `len` floats into a fresh tensor. Rank-4 tensors carry the given
/// layout; other ranks must pass `Unspecified`.
#[no_mangle]
pub unsafe extern "C" fn wpt_tensor_create(
    dims: *const usize,
    rank: usize,
    layout: WptLayout,
    data: *const f32,
    len: usize,
    out: *mut *mut WptTensor,
) -> WptStatus {
    require!(dims, "dims");
    require!(data, "data");
    require!(out, "out");
    guarded(|| {
        let dims = std::slice::from_raw_parts(dims, rank).to_vec();
        let payload = std::slice::from_raw_parts(data, len).to_vec();
        let mut spec = TensorSpec::new(dims);
        spec.layout = layout_of(layout);
        if spec.layout.is_some() && spec.rank() != 4 {
            set_error("layouts apply to rank-4 tensors only");
            return WptStatus::InvalidArgument;
        }
        match Tensor::new(spec, payload) {
            Ok(tensor) => {
                *out = Box::into_raw(Box::new(WptTensor { inner: tensor }));
                WptStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn wpt_tensor_rank(
    tensor: *const WptTensor,
    out: *mut usize,
) -> WptStatus {
    require!(tensor, "tensor");
    require!(out, "out");
    *out = (*tensor).inner.spec.rank();
    WptStatus::Ok
}

/// Writes up to `cap` dimension sizes.
#[no_mangle]
pub unsafe extern "C" fn wpt_tensor_dims(
    tensor: *const WptTensor,
    dims: *mut usize,
    cap: usize,
) -> WptStatus {
    require!(tensor, "tensor");
    require!(dims, "dims");
    let src = &(*tensor).inner.spec.dims;
    let n = src.len().min(cap);
    std::slice::from_raw_parts_mut(dims, n).copy_from_slice(&src[..n]);
    WptStatus::Ok
}

/// Borrows the tensor's payload; the view dies with the tensor.
#[no_mangle]
pub unsafe extern "C" fn wpt_tensor_data(
    tensor: *const WptTensor,
    data: *mut *const f32,
    len: *mut usize,
) -> WptStatus {
    require!(tensor, "tensor");
    require!(data, "data");
    require!(len, "len");
    *data = (*tensor).inner.data.as_ptr();
    *len = (*tensor).inner.data.len();
    WptStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn wpt_tensor_free(tensor: *mut WptTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

#[no_mangle]
pub unsafe extern "C" fn wpt_bindings_new(out: *mut *mut WptBindings) -> WptStatus {
    require!(out, "out");
    *out = Box::into_raw(Box::new(WptBindings { inner: BTreeMap::new() }));
    WptStatus::Ok
}

/// Binds a copy of `tensor` to the placeholder `node_id`, replacing any
/// previous binding for it.
#[no_mangle]
pub unsafe extern "C" fn wpt_bindings_set(
    bindings: *mut WptBindings,
    node_id: *const c_char,
    tensor: *const WptTensor,
) -> WptStatus {
    require!(bindings, "bindings");
    require!(node_id, "node_id");
    require!(tensor, "tensor");
    guarded(|| {
        let id = match utf8_arg(node_id, "node_id") {
            Ok(s) => s,
            Err(status) => return status,
        };
        (*bindings).inner.insert(id.to_string(), (*tensor).inner.clone());
        WptStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn wpt_bindings_free(bindings: *mut WptBindings) {
    if !bindings.is_null() {
        drop(Box::from_raw(bindings));
    }
}

/// Executes `plan` over `graph` with the bound inputs. The template must
/// be the one the plan was tuned under.
#[no_mangle]
pub unsafe extern "C" fn wpt_execute(
    graph: *const WptGraph,
    plan: *const WptPlan,
    template: *const WptTemplate,
    bindings: *const WptBindings,
    out: *mut *mut WptOutputs,
) -> WptStatus {
    require!(graph, "graph");
    require!(plan, "plan");
    require!(template, "template");
    require!(bindings, "bindings");
    require!(out, "out");
    guarded(|| {
        let templates = std::slice::from_ref(&(*template).inner);
        match execute(&(*graph).inner, &(*plan).inner, templates, &(*bindings).inner) {
            Ok(outcome) => {
                *out = Box::into_raw(Box::new(WptOutputs { inner: outcome }));
                WptStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn wpt_outputs_count(
    outputs: *const WptOutputs,
    out: *mut usize,
) -> WptStatus {
    require!(outputs, "outputs");
    require!(out, "out");
    *out = (*outputs).inner.outputs.len();
    WptStatus::Ok
}

/// Name of the `index`-th output, in stable name order.
#[no_mangle]
pub unsafe extern "C" fn wpt_outputs_name(
    outputs: *const WptOutputs,
    index: usize,
    out: *mut *mut c_char,
) -> WptStatus {
    require!(outputs, "outputs");
    require!(out, "out");
    guarded(|| match (*outputs).inner.outputs.keys().nth(index) {
        Some(name) => give_string(name.clone(), out),
        None => {
            set_error(&format!("output index {index} out of range"));
            WptStatus::InvalidArgument
        }
    })
}

/// Copies the named output into a fresh tensor handle.
#[no_mangle]
pub unsafe extern "C" fn wpt_outputs_get(
    outputs: *const WptOutputs,
    name: *const c_char,
    out: *mut *mut WptTensor,
) -> WptStatus {
    require!(outputs, "outputs");
    require!(name, "name");
    require!(out, "out");
    guarded(|| {
        let key = match utf8_arg(name, "name") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match (*outputs).inner.outputs.get(key) {
            Some(tensor) => {
                *out = Box::into_raw(Box::new(WptTensor { inner: tensor.clone() }));
                WptStatus::Ok
            }
            None => {
                set_error(&format!("no output named '{key}'"));
                WptStatus::InvalidArgument
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn wpt_outputs_free(outputs: *mut WptOutputs) {
    if !outputs.is_null() {
        drop(Box::from_raw(outputs));
    }
}

/// Tunes one square-kernel conv with genetic search and writes the winning
/// schedule into `config_out` (one value per template parameter) plus its
/// cost into `runtime_ms`. `budget` of 0 means the search default; the
/// measured evaluator times the real kernels, so expect it to be slow.
#[no_mangle]
pub unsafe extern "C" fn wpt_tune_conv(
    template: *const WptTemplate,
    n: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: WptPadding,
    evaluator: WptEvaluator,
    seed: u64,
    budget: usize,
    config_out: *mut u64,
    config_cap: usize,
    runtime_ms: *mut f64,
) -> WptStatus {
    require!(template, "template");
    require!(config_out, "config_out");
    require!(runtime_ms, "runtime_ms");
    guarded(|| {
        let template = &(*template).inner;
        if config_cap < template.params.len() {
            set_error(&format!(
                "config_out holds {config_cap} values but the template defines {}",
                template.params.len()
            ));
            return WptStatus::InvalidArgument;
        }
        let conv = ConvSpec {
            n,
            c_in,
            c_out,
            k_h: kernel,
            k_w: kernel,
            h,
            w,
            stride,
            padding: match padding {
                WptPadding::Same => Padding::Same,
                WptPadding::Valid => Padding::Valid,
            },
        };
        if let Err(err) = conv.validate() {
            return fail(err);
        }
        let op = OperatorSpec::Conv2D(conv);
        let signature = op_signature(&op, &[]);
        let oracle: Box<dyn wpt_core::evaluator::Evaluate> = match evaluator {
            WptEvaluator::Synthetic => {
                match SyntheticEvaluator::new(signature, template, seed, 0.0) {
                    Ok(e) => Box::new(e),
                    Err(err) => return fail(err),
                }
            }
            WptEvaluator::Measured => {
                match MeasuredEvaluator::new(
                    &op,
                    Layout::Nchw,
                    template,
                    seed,
                    MeasureOptions::default(),
                ) {
                    Ok(e) => Box::new(e),
                    Err(err) => return fail(err),
                }
            }
        };
        let cfg = GeneticConfig {
            seed,
            max_evaluations: (budget > 0).then_some(budget),
            ..Default::default()
        };
        match run_genetic(template, oracle.as_ref(), &cfg, &[template.baseline_config()]) {
            Ok(outcome) => {
                let values = &outcome.best.values;
                std::slice::from_raw_parts_mut(config_out, values.len())
                    .copy_from_slice(values);
                *runtime_ms = outcome.best_runtime_ms;
                WptStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

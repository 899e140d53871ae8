//! C ABI for the planner: Viterbi decoding, transition estimation, plan
//! metrics, and checkpoint loading and sampling.
//!
//! Every fallible function returns a [`PpStatus`]. On failure the message is
//! kept per thread and read with [`pp_last_error`]. Action ids cross the
//! boundary as `uint32_t`, plans as row-major `[n, horizon]` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use ndarray::Array2;
use procplan::model::Model;
use procplan::{metrics, planner, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Parse = 5,
    Numeric = 6,
    Panic = 7,
}

/// Loaded checkpoint.
pub struct PpModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PpStatus {
    match e {
        Error::Shape { .. } | Error::NotScalar(_) => PpStatus::Shape,
        Error::Invalid(_) => PpStatus::InvalidArgument,
        Error::Io { .. } => PpStatus::Io,
        Error::Parse { .. } => PpStatus::Parse,
        Error::NonFinite { .. } | Error::Diverged { .. } => PpStatus::Numeric,
    }
}

struct Fail(PpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PpStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(PpStatus::NullPointer, format!("{name} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PpStatus::InvalidArgument, msg.into())
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn checked_len(a: usize, b: usize) -> Result<usize, Fail> {
    a.checked_mul(b).ok_or_else(|| invalid("buffer size overflows"))
}

unsafe fn plans_from(p: *const u32, n: usize, horizon: usize, name: &str) -> Result<Vec<Vec<usize>>, Fail> {
    let flat = input(p, checked_len(n, horizon)?, name)?;
    if horizon == 0 {
        return Ok(vec![Vec::new(); n]);
    }
    Ok(flat
        .chunks(horizon)
        .map(|c| c.iter().map(|&a| a as usize).collect())
        .collect())
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Most likely action sequence under `emissions` (`[horizon, num_actions]`)
/// and `transitions` (`[num_actions, num_actions]`), written to
/// `out_plan[horizon]`. Ties go to the lowest action id.
///
/// # Safety
/// All pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn pp_viterbi(
    emissions: *const f64,
    horizon: usize,
    num_actions: usize,
    transitions: *const f64,
    out_plan: *mut u32,
) -> PpStatus {
    guard(|| {
        if horizon == 0 || num_actions == 0 {
            return Err(invalid("horizon and num_actions must be positive"));
        }
        let e = input(emissions, checked_len(horizon, num_actions)?, "emissions")?;
        let t = input(transitions, checked_len(num_actions, num_actions)?, "transitions")?;
        let out = output(out_plan, horizon, "out_plan")?;
        let e = Array2::from_shape_vec((horizon, num_actions), e.to_vec()).map_err(|e| invalid(e.to_string()))?;
        let t = Array2::from_shape_vec((num_actions, num_actions), t.to_vec()).map_err(|e| invalid(e.to_string()))?;
        let plan = planner::viterbi_decode(&e, &t)?;
        for (o, a) in out.iter_mut().zip(plan) {
            *o = a as u32;
        }
        Ok(())
    })
}

/// Row-stochastic transition matrix estimated from `n_plans` plans of
/// length `horizon`, written row-major to `out[num_actions * num_actions]`.
///
/// # Safety
/// All pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn pp_transitions(
    plans: *const u32,
    n_plans: usize,
    horizon: usize,
    num_actions: usize,
    out: *mut f64,
) -> PpStatus {
    guard(|| {
        let plans = plans_from(plans, n_plans, horizon, "plans")?;
        let out = output(out, checked_len(num_actions, num_actions)?, "out")?;
        let m = planner::estimate_transitions(&plans, num_actions)?;
        out.copy_from_slice(m.as_standard_layout().as_slice().expect("standard layout"));
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpPlanMetrics {
    pub success_rate: f64,
    pub mean_accuracy: f64,
    pub mean_iou: f64,
}

/// SR, mAcc and mIoU of `n` predicted plans against `n` ground-truth plans.
///
/// # Safety
/// `preds` and `gts` must hold `n * horizon` ids; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_plan_metrics(
    preds: *const u32,
    gts: *const u32,
    n: usize,
    horizon: usize,
    out: *mut PpPlanMetrics,
) -> PpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = plans_from(preds, n, horizon, "preds")?;
        let g = plans_from(gts, n, horizon, "gts")?;
        *out = PpPlanMetrics {
            success_rate: metrics::success_rate(&p, &g)?,
            mean_accuracy: metrics::mean_accuracy(&p, &g)?,
            mean_iou: metrics::mean_iou(&p, &g)?,
        };
        Ok(())
    })
}

/// Loads a checkpoint directory written by `procplan train`.
///
/// # Safety
/// `dir` must be a NUL-terminated UTF-8 path; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_model_load(dir: *const c_char, out: *mut *mut PpModel) -> PpStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = CStr::from_ptr(dir).to_str().map_err(|_| invalid("dir is not UTF-8"))?;
        let model = Model::load(Path::new(dir))?;
        *out = Box::into_raw(Box::new(PpModel { model }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`pp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pp_model_free(model: *mut PpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PpModelInfo {
    pub horizon: usize,
    pub num_actions: usize,
    pub input_dim: usize,
    pub noise_dim: usize,
}

/// # Safety
/// `model` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_model_info(model: *const PpModel, out: *mut PpModelInfo) -> PpStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = PpModelInfo {
            horizon: m.config.horizon,
            num_actions: m.config.num_actions,
            input_dim: m.config.input_dim,
            noise_dim: m.config.d_noise,
        };
        Ok(())
    })
}

/// Draws `k` plans for one start/goal pair (each `input_dim` floats) and
/// writes them to `out_plans[k * horizon]`. Same seed, same plans.
///
/// # Safety
/// `model` must be valid and the buffers must have the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn pp_model_sample(
    model: *const PpModel,
    v_start: *const f64,
    v_goal: *const f64,
    input_dim: usize,
    k: usize,
    seed: u64,
    out_plans: *mut u32,
) -> PpStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if input_dim != m.config.input_dim {
            return Err(invalid(format!("input_dim {input_dim}, model expects {}", m.config.input_dim)));
        }
        let vs = input(v_start, input_dim, "v_start")?;
        let vg = input(v_goal, input_dim, "v_goal")?;
        let out = output(out_plans, checked_len(k, m.config.horizon)?, "out_plans")?;
        let set = planner::sample_plans(m, vs, vg, k, seed)?;
        for (o, a) in out.iter_mut().zip(set.plans.iter().flatten()) {
            *o = *a as u32;
        }
        Ok(())
    })
}

/// Samples `k` plans and decodes them with Viterbi over their marginal,
/// using `transitions` (`[num_actions, num_actions]`). Writes
/// `out_plan[horizon]`.
///
/// # Safety
/// `model` must be valid and the buffers must have the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn pp_model_plan(
    model: *const PpModel,
    v_start: *const f64,
    v_goal: *const f64,
    input_dim: usize,
    k: usize,
    seed: u64,
    transitions: *const f64,
    out_plan: *mut u32,
) -> PpStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let n = m.config.num_actions;
        if input_dim != m.config.input_dim {
            return Err(invalid(format!("input_dim {input_dim}, model expects {}", m.config.input_dim)));
        }
        let vs = input(v_start, input_dim, "v_start")?;
        let vg = input(v_goal, input_dim, "v_goal")?;
        let t = input(transitions, checked_len(n, n)?, "transitions")?;
        let out = output(out_plan, m.config.horizon, "out_plan")?;
        let t = Array2::from_shape_vec((n, n), t.to_vec()).map_err(|e| invalid(e.to_string()))?;
        let set = planner::sample_plans(m, vs, vg, k, seed)?;
        let em = planner::marginal_distribution(&set.plans, n)?;
        for (o, a) in out.iter_mut().zip(planner::viterbi_decode(&em, &t)?) {
            *o = a as u32;
        }
        Ok(())
    })
}

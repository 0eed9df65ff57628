//! C ABI over `zsl-core`.
//!
//! Matrices are dense row-major `double` buffers. Classes are addressed by
//! index; the first `p` of `n` classes are the seen ones. Every fallible
//! function returns a [`ZslStatus`]; on failure the message is available from
//! [`zsl_last_error_message`] on the same thread. Handles are opaque and must
//! be released with their `_free` function.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DMatrix;
use zsl_core::propagation::{
    predict_indices, propagate_closed, propagate_iterative, ArgmaxMode, PiMode,
    PropagationOperator, ScoreMatrix,
};
use zsl_core::seeder::{predict_proba, train_logreg, FeatureDataset, LogRegModel};
use zsl_core::semantic::{build_weight_matrix, SemanticSpace};
use zsl_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    DimensionMismatch = 3,
    IllConditioned = 4,
    NoConvergence = 5,
    NonFinite = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZslPiMode {
    Literal = 0,
    Stationary = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZslArgmax {
    Unseen = 0,
    All = 1,
}

/// Propagation operator over a fixed class graph.
pub struct ZslOperator {
    op: PropagationOperator,
}

/// One-vs-rest logistic regression model.
pub struct ZslLogReg {
    model: LogRegModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ZslStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let mut root = &e;
        while let Error::Stage { source, .. } = root {
            root = source;
        }
        let status = match root {
            Error::DimensionMismatch { .. } => ZslStatus::DimensionMismatch,
            Error::IllConditioned { .. } => ZslStatus::IllConditioned,
            Error::NoConvergence { .. } => ZslStatus::NoConvergence,
            Error::NonFinite(_) => ZslStatus::NonFinite,
            _ => ZslStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ZslStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ZslStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ZslStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(ZslStatus::NullPointer, format!("`{name}` is null"))
}

fn checked_len(a: usize, b: usize) -> Result<usize, Failure> {
    a.checked_mul(b)
        .ok_or_else(|| Failure(ZslStatus::InvalidInput, "buffer size overflows".into()))
}

unsafe fn input<'a>(ptr: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn class_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

fn space(semantic: &[f64], n: usize, dim: usize, p: usize) -> Result<SemanticSpace, Failure> {
    if p > n {
        return Err(Failure(
            ZslStatus::InvalidInput,
            format!("p = {p} exceeds n = {n}"),
        ));
    }
    let ids = class_ids(n);
    let vectors: HashMap<String, Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), semantic[i * dim..(i + 1) * dim].to_vec()))
        .collect();
    Ok(SemanticSpace::new(
        ids[..p].to_vec(),
        ids[p..].to_vec(),
        vectors,
    )?)
}

fn score_matrix(values: &[f64], rows: usize, n: usize, p: usize) -> Result<ScoreMatrix, Failure> {
    Ok(ScoreMatrix::new(
        DMatrix::from_row_slice(rows, n, values),
        (0..rows).map(|i| i.to_string()).collect(),
        class_ids(n),
        p,
    )?)
}

fn write_rows(m: &DMatrix<f64>, out: &mut [f64]) {
    let cols = m.ncols();
    for (i, row) in m.row_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[i * cols + j] = *v;
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn zsl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn zsl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds the `n x n` class-graph weight matrix from `n x dim` semantic
/// vectors (seen classes first) into `out_weights`.
///
/// # Safety
/// `semantic` must hold `n * dim` doubles and `out_weights` room for `n * n`.
#[no_mangle]
pub unsafe extern "C" fn zsl_graph_build(
    semantic: *const f64,
    n: usize,
    dim: usize,
    p: usize,
    k1: usize,
    k2: usize,
    out_weights: *mut f64,
) -> ZslStatus {
    guard(|| {
        let semantic = input(semantic, checked_len(n, dim)?, "semantic")?;
        let out = output(out_weights, checked_len(n, n)?, "out_weights")?;
        let graph = build_weight_matrix(&space(semantic, n, dim, p)?, k1, k2)?;
        write_rows(&graph.weights, out);
        Ok(())
    })
}

/// Builds the propagation operator for `n x dim` semantic vectors.
///
/// # Safety
/// `semantic` must hold `n * dim` doubles; `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn zsl_operator_new(
    semantic: *const f64,
    n: usize,
    dim: usize,
    p: usize,
    k1: usize,
    k2: usize,
    eta: f64,
    alpha: f64,
    pi_mode: ZslPiMode,
    out: *mut *mut ZslOperator,
) -> ZslStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let semantic = input(semantic, checked_len(n, dim)?, "semantic")?;
        let graph = build_weight_matrix(&space(semantic, n, dim, p)?, k1, k2)?;
        let mode = match pi_mode {
            ZslPiMode::Literal => PiMode::Literal,
            ZslPiMode::Stationary => PiMode::Stationary,
        };
        let op = PropagationOperator::new(&graph, eta, alpha, mode)?;
        *out = Box::into_raw(Box::new(ZslOperator { op }));
        Ok(())
    })
}

/// # Safety
/// `op` must come from [`zsl_operator_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn zsl_operator_free(op: *mut ZslOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// Number of classes of the operator, 0 for NULL.
///
/// # Safety
/// `op` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn zsl_operator_classes(op: *const ZslOperator) -> usize {
    op.as_ref().map_or(0, |o| o.op.n())
}

/// Spectral radius of the symmetric operator, NaN for NULL.
///
/// # Safety
/// `op` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn zsl_operator_spectral_radius(op: *const ZslOperator) -> f64 {
    op.as_ref().map_or(f64::NAN, |o| o.op.spectral_radius())
}

/// Direct solve of the propagated scores for `rows x n` seeds.
///
/// # Safety
/// `seeds` and `out` must hold `rows * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn zsl_operator_propagate(
    op: *const ZslOperator,
    seeds: *const f64,
    rows: usize,
    out: *mut f64,
) -> ZslStatus {
    guard(|| {
        let op = &op.as_ref().ok_or_else(|| null("op"))?.op;
        let len = checked_len(rows, op.n())?;
        let y = score_matrix(input(seeds, len, "seeds")?, rows, op.n(), op.p())?;
        let out = output(out, len, "out")?;
        write_rows(&propagate_closed(&y, op)?.values, out);
        Ok(())
    })
}

/// Fixed-point iteration from the seeds. Writes the last iterate and the
/// iteration count; returns `NO_CONVERGENCE` if `tol` was not reached.
///
/// # Safety
/// `seeds` and `out` must hold `rows * n` doubles; `out_iterations` may be
/// NULL.
#[no_mangle]
pub unsafe extern "C" fn zsl_operator_propagate_iterative(
    op: *const ZslOperator,
    seeds: *const f64,
    rows: usize,
    tol: f64,
    max_iter: usize,
    out: *mut f64,
    out_iterations: *mut usize,
) -> ZslStatus {
    guard(|| {
        let op = &op.as_ref().ok_or_else(|| null("op"))?.op;
        let len = checked_len(rows, op.n())?;
        let y = score_matrix(input(seeds, len, "seeds")?, rows, op.n(), op.p())?;
        let out = output(out, len, "out")?;
        let r = propagate_iterative(&y, op, tol, max_iter)?;
        write_rows(&r.scores.values, out);
        if let Some(it) = out_iterations.as_mut() {
            *it = r.iterations;
        }
        if r.converged {
            Ok(())
        } else {
            Err(Error::NoConvergence {
                iterations: r.iterations,
                residual: r.last_delta,
            }
            .into())
        }
    })
}

/// Arg-max class index per row of a `rows x n` score matrix; ties go to the
/// lower index.
///
/// # Safety
/// `scores` must hold `rows * n` doubles and `out` room for `rows` indices.
#[no_mangle]
pub unsafe extern "C" fn zsl_predict_labels(
    scores: *const f64,
    rows: usize,
    n: usize,
    p: usize,
    argmax: ZslArgmax,
    out: *mut usize,
) -> ZslStatus {
    guard(|| {
        let s = score_matrix(input(scores, checked_len(rows, n)?, "scores")?, rows, n, p)?;
        let mode = match argmax {
            ZslArgmax::Unseen => ArgmaxMode::Unseen,
            ZslArgmax::All => ArgmaxMode::All,
        };
        if mode == ArgmaxMode::Unseen && p == n && rows > 0 {
            return Err(Failure(
                ZslStatus::InvalidInput,
                "no unseen classes to choose from".into(),
            ));
        }
        output(out, rows, "out")?.copy_from_slice(&predict_indices(&s, mode));
        Ok(())
    })
}

/// Trains one-vs-rest logistic regression on `rows x dim` features with
/// labels in `0..classes`.
///
/// # Safety
/// `x` must hold `rows * dim` doubles, `labels` `rows` entries; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zsl_logreg_train(
    x: *const f64,
    labels: *const usize,
    rows: usize,
    dim: usize,
    classes: usize,
    c: f64,
    out: *mut *mut ZslLogReg,
) -> ZslStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let x = input(x, checked_len(rows, dim)?, "x")?;
        let labels: &[usize] = if rows == 0 {
            &[]
        } else if labels.is_null() {
            return Err(null("labels"));
        } else {
            std::slice::from_raw_parts(labels, rows)
        };
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Failure(
                ZslStatus::InvalidInput,
                format!("label {bad} outside 0..{classes}"),
            ));
        }
        let data = FeatureDataset::new(
            (0..rows).map(|i| i.to_string()).collect(),
            DMatrix::from_row_slice(rows, dim, x),
            labels.iter().map(|l| Some(l.to_string())).collect(),
        )?;
        let model = train_logreg(&data, &class_ids(classes), c)?;
        *out = Box::into_raw(Box::new(ZslLogReg { model }));
        Ok(())
    })
}

/// Normalized class probabilities, `rows x classes`.
///
/// # Safety
/// `x` must hold `rows * dim` doubles and `out` room for `rows * classes`.
#[no_mangle]
pub unsafe extern "C" fn zsl_logreg_predict_proba(
    model: *const ZslLogReg,
    x: *const f64,
    rows: usize,
    out: *mut f64,
) -> ZslStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let (dim, k) = (model.dim(), model.n_classes());
        let x = input(x, checked_len(rows, dim)?, "x")?;
        let out = output(out, checked_len(rows, k)?, "out")?;
        for i in 0..rows {
            let probs = predict_proba(model, &x[i * dim..(i + 1) * dim])?;
            out[i * k..(i + 1) * k].copy_from_slice(&probs);
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`zsl_logreg_train`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn zsl_logreg_free(model: *mut ZslLogReg) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

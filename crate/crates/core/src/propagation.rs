//! Markov operator over the class graph and the label propagation solves.
//!
//! The graph's weight matrix is row-normalized into a transition matrix,
//! mixed with a uniform off-diagonal jump of mass `eta`, and symmetrized into
//! the smoothing operator `theta`. Propagated scores are
//! `Y (I - alpha * theta)^-1`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantic::{ClassGraph, ClassId};

/// Condition estimates above this are rejected by the closed-form solve.
pub const MAX_CONDITION: f64 = 1e12;
/// Residual target of the stationary-distribution power iteration.
pub const STATIONARY_TOL: f64 = 1e-12;
pub const STATIONARY_MAX_ITER: usize = 2_000_000;

/// How the per-class mass `pi` entering the smoothing operator is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PiMode {
    /// Row sums of the normalized transition matrix.
    #[default]
    Literal,
    /// Stationary distribution of the chain.
    Stationary,
}

impl std::str::FromStr for PiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(PiMode::Literal),
            "stationary" => Ok(PiMode::Stationary),
            _ => Err(Error::invalid(format!("unknown pi mode `{s}`"))),
        }
    }
}

/// Which columns `predict_labels` takes the argmax over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ArgmaxMode {
    #[default]
    Unseen,
    All,
}

impl std::str::FromStr for ArgmaxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unseen" | "unseen-only" => Ok(ArgmaxMode::Unseen),
            "all" | "all-classes" => Ok(ArgmaxMode::All),
            _ => Err(Error::invalid(format!("unknown argmax mode `{s}`"))),
        }
    }
}

/// Per-image class scores, columns in `class_order` (seen classes first).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: DMatrix<f64>,
    pub image_ids: Vec<String>,
    pub class_order: Vec<ClassId>,
    pub p: usize,
}

impl ScoreMatrix {
    pub fn new(
        values: DMatrix<f64>,
        image_ids: Vec<String>,
        class_order: Vec<ClassId>,
        p: usize,
    ) -> Result<Self> {
        if values.nrows() != image_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: image_ids.len(),
                got: values.nrows(),
            });
        }
        if values.ncols() != class_order.len() {
            return Err(Error::DimensionMismatch {
                expected: class_order.len(),
                got: values.ncols(),
            });
        }
        if p > class_order.len() {
            return Err(Error::invalid("seen count exceeds class count"));
        }
        Ok(ScoreMatrix {
            values,
            image_ids,
            class_order,
            p,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Checks the seed-matrix invariants: nonnegative, unseen columns zero,
    /// seen part of each row summing to one.
    pub fn validate_seed(&self) -> Result<()> {
        for (r, row) in self.values.row_iter().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::invalid(format!("seed row {r} has a negative entry")));
            }
            if row.iter().skip(self.p).any(|&v| v != 0.0) {
                return Err(Error::invalid(format!(
                    "seed row {r} has nonzero unseen entries"
                )));
            }
            let s: f64 = row.iter().take(self.p).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("seed row {r} sums to {s}")));
            }
        }
        Ok(())
    }
}

/// `T = D^-1 W`.
pub fn transition_matrix(graph: &ClassGraph) -> Result<DMatrix<f64>> {
    let w = &graph.weights;
    let mut t = w.clone();
    for (i, mut row) in t.row_iter_mut().enumerate() {
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            let id = graph
                .class_order
                .get(i)
                .cloned()
                .unwrap_or_else(|| i.to_string());
            return Err(Error::ZeroRowSum(id));
        }
        row /= s;
    }
    Ok(t)
}

/// `P = eta/(n-1) (1 - I) + (1 - eta) T`.
pub fn normalize_transition(t: &DMatrix<f64>, eta: f64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta must lie in [0, 1), got {eta}")));
    }
    let n = t.nrows();
    if n != t.ncols() {
        return Err(Error::invalid("transition matrix must be square"));
    }
    if n < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if eta == 0.0 {
        return Ok(t.clone());
    }
    let jump = eta / (n - 1) as f64;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let teleport = if i == j { 0.0 } else { jump };
        teleport + (1.0 - eta) * t[(i, j)]
    }))
}

/// Per-class mass `pi`.
pub fn row_mass(p: &DMatrix<f64>, mode: PiMode) -> Result<DVector<f64>> {
    match mode {
        PiMode::Literal => Ok(DVector::from_iterator(
            p.nrows(),
            p.row_iter().map(|r| r.iter().sum::<f64>()),
        )),
        PiMode::Stationary => stationary_distribution(p, STATIONARY_TOL, STATIONARY_MAX_ITER),
    }
}

/// Left eigenvector `pi P = pi`, `sum(pi) = 1`, by power iteration from the
/// uniform distribution. Converged when `max |pi P - pi| <= tol`.
pub fn stationary_distribution(
    p: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let n = p.nrows();
    let pt = p.transpose();
    let mut pi = DVector::from_element(n, 1.0 / n as f64);
    let mut next = DVector::zeros(n);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        pt.mul_to(&pi, &mut next);
        let s = next.sum();
        next /= s;
        residual = next
            .iter()
            .zip(pi.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut pi, &mut next);
        if residual <= tol {
            return Ok(pi);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// `theta = (Pi^1/2 P Pi^-1/2 + Pi^-1/2 P^T Pi^1/2) / 2`, symmetric by
/// construction.
pub fn theta_operator(p: &DMatrix<f64>, pi: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    if pi.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: pi.len(),
        });
    }
    if let Some(u) = pi.iter().position(|&m| !(m > 0.0)) {
        return Err(Error::invalid(format!(
            "class mass pi[{u}] = {} must be positive",
            pi[u]
        )));
    }
    let root: Vec<f64> = pi.iter().map(|m| m.sqrt()).collect();
    let scaled = |u: usize, v: usize| root[u] * p[(u, v)] / root[v];
    let mut theta = DMatrix::zeros(n, n);
    for u in 0..n {
        for v in u..n {
            let val = (scaled(u, v) + scaled(v, u)) / 2.0;
            theta[(u, v)] = val;
            theta[(v, u)] = val;
        }
    }
    Ok(theta)
}

/// Diagnostics for a built operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorDiagnostics {
    pub n_classes: usize,
    pub p: usize,
    pub q: usize,
    pub eta: f64,
    pub alpha: f64,
    pub pi_mode: PiMode,
    pub transition_row_sum_error: f64,
    pub normalized_row_sum_error: f64,
    pub theta_asymmetry: f64,
    pub pi_min: f64,
    pub pi_max: f64,
    pub spectral_radius: f64,
    pub condition_estimate: f64,
}

#[derive(Debug, Clone)]
pub struct PropagationOperator {
    transition: DMatrix<f64>,
    p_matrix: DMatrix<f64>,
    pi: DVector<f64>,
    theta: DMatrix<f64>,
    alpha: f64,
    eta: f64,
    pi_mode: PiMode,
    class_order: Vec<ClassId>,
    p: usize,
}

impl PropagationOperator {
    pub fn new(graph: &ClassGraph, eta: f64, alpha: f64, pi_mode: PiMode) -> Result<Self> {
        let t = transition_matrix(graph)?;
        let mut op =
            Self::from_transition(t, graph.class_order.clone(), graph.p, eta, alpha, pi_mode)?;
        op.class_order = graph.class_order.clone();
        Ok(op)
    }

    /// Build from an already row-stochastic transition matrix.
    pub fn from_transition(
        transition: DMatrix<f64>,
        class_order: Vec<ClassId>,
        p: usize,
        eta: f64,
        alpha: f64,
        pi_mode: PiMode,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        if class_order.len() != transition.nrows() {
            return Err(Error::DimensionMismatch {
                expected: transition.nrows(),
                got: class_order.len(),
            });
        }
        let p_matrix = normalize_transition(&transition, eta)?;
        let pi = row_mass(&p_matrix, pi_mode)?;
        let theta = theta_operator(&p_matrix, &pi)?;
        Ok(PropagationOperator {
            transition,
            p_matrix,
            pi,
            theta,
            alpha,
            eta,
            pi_mode,
            class_order,
            p,
        })
    }

    /// Same operator with a different propagation parameter.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(PropagationOperator {
            alpha,
            ..self.clone()
        })
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn normalized(&self) -> &DMatrix<f64> {
        &self.p_matrix
    }

    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn pi_mode(&self) -> PiMode {
        self.pi_mode
    }

    pub fn class_order(&self) -> &[ClassId] {
        &self.class_order
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.class_order.len()
    }

    /// `I - alpha * theta`.
    pub fn system_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) - &self.theta * self.alpha
    }

    pub fn spectral_radius(&self) -> f64 {
        SymmetricEigen::new(self.theta.clone())
            .eigenvalues
            .iter()
            .fold(0.0, |m, e| f64::max(m, e.abs()))
    }

    /// 2-norm condition number of the system matrix.
    pub fn condition_estimate(&self) -> f64 {
        let sv = self.system_matrix().singular_values();
        let max = sv.iter().cloned().fold(0.0, f64::max);
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    }

    pub fn diagnostics(&self) -> OperatorDiagnostics {
        let row_err = |m: &DMatrix<f64>| {
            m.row_iter()
                .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max)
        };
        let theta_asymmetry = (&self.theta - self.theta.transpose()).amax();
        OperatorDiagnostics {
            n_classes: self.n(),
            p: self.p,
            q: self.n() - self.p,
            eta: self.eta,
            alpha: self.alpha,
            pi_mode: self.pi_mode,
            transition_row_sum_error: row_err(&self.transition),
            normalized_row_sum_error: row_err(&self.p_matrix),
            theta_asymmetry,
            pi_min: self.pi.min(),
            pi_max: self.pi.max(),
            spectral_radius: self.spectral_radius(),
            condition_estimate: self.condition_estimate(),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    // alpha = 0 is admitted as the degenerate no-propagation limit.
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_columns(y: &ScoreMatrix, op: &PropagationOperator) -> Result<()> {
    if y.n_classes() != op.n() {
        return Err(Error::DimensionMismatch {
            expected: op.n(),
            got: y.n_classes(),
        });
    }
    Ok(())
}

/// `Y (I - alpha theta)^-1` by LU solve of the transposed system.
pub fn propagate_closed(y: &ScoreMatrix, op: &PropagationOperator) -> Result<ScoreMatrix> {
    check_columns(y, op)?;
    let system = op.system_matrix();
    let condition = op.condition_estimate();
    let ill = |condition| Error::IllConditioned {
        alpha: op.alpha,
        spectral_radius: op.spectral_radius(),
        condition,
    };
    if !(condition <= MAX_CONDITION) {
        return Err(ill(condition));
    }
    // X M = Y  <=>  M^T X^T = Y^T
    let lu = system.transpose().lu();
    let solved = lu
        .solve(&y.values.transpose())
        .ok_or_else(|| ill(f64::INFINITY))?;
    Ok(ScoreMatrix {
        values: solved.transpose(),
        image_ids: y.image_ids.clone(),
        class_order: y.class_order.clone(),
        p: y.p,
    })
}

/// `max |F - alpha F theta - Y|`.
pub fn fixed_point_residual(y: &ScoreMatrix, f: &ScoreMatrix, op: &PropagationOperator) -> f64 {
    let r = &f.values - (&f.values * op.theta()) * op.alpha() - &y.values;
    r.amax()
}

#[derive(Debug, Clone)]
pub struct IterativeResult {
    pub scores: ScoreMatrix,
    pub iterations: usize,
    pub converged: bool,
    pub last_delta: f64,
}

/// Fixed-point iteration `F <- alpha F theta + Y` from `F = Y`. Stops once
/// the max-norm update is at most `tol`; otherwise returns the last iterate
/// flagged as not converged.
pub fn propagate_iterative(
    y: &ScoreMatrix,
    op: &PropagationOperator,
    tol: f64,
    max_iter: usize,
) -> Result<IterativeResult> {
    check_columns(y, op)?;
    let scaled_theta = op.theta() * op.alpha();
    let mut f = y.values.clone();
    let mut last_delta = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let next = &f * &scaled_theta + &y.values;
        last_delta = (&next - &f).amax();
        f = next;
        iterations += 1;
        if last_delta <= tol {
            converged = true;
            break;
        }
        if !last_delta.is_finite() {
            break;
        }
    }
    Ok(IterativeResult {
        scores: ScoreMatrix {
            values: f,
            image_ids: y.image_ids.clone(),
            class_order: y.class_order.clone(),
            p: y.p,
        },
        iterations,
        converged,
        last_delta,
    })
}

/// Argmax column per row; ties go to the lowest column.
pub fn predict_indices(scores: &ScoreMatrix, restrict: ArgmaxMode) -> Vec<usize> {
    let start = match restrict {
        ArgmaxMode::Unseen => scores.p,
        ArgmaxMode::All => 0,
    };
    scores
        .values
        .row_iter()
        .map(|row| {
            let mut best = start;
            for j in start + 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict_labels(scores: &ScoreMatrix, restrict: ArgmaxMode) -> Vec<ClassId> {
    predict_indices(scores, restrict)
        .into_iter()
        .map(|j| scores.class_order[j].clone())
        .collect()
}

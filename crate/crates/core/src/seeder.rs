//! One-vs-rest L2-regularized logistic regression over seen classes, used
//! to seed the propagation with initial class probabilities.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::ScoreMatrix;
use crate::semantic::ClassId;

/// Gradient-norm target of the per-class solve.
pub const GRAD_TOL: f64 = 1e-8;
pub const MAX_NEWTON_ITER: usize = 200;

/// Image features with optional labels (test rows carry none).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub image_ids: Vec<String>,
    pub features: DMatrix<f64>,
    pub labels: Vec<Option<ClassId>>,
}

impl FeatureDataset {
    pub fn new(
        image_ids: Vec<String>,
        features: DMatrix<f64>,
        labels: Vec<Option<ClassId>>,
    ) -> Result<Self> {
        if features.nrows() != image_ids.len() || labels.len() != image_ids.len() {
            return Err(Error::invalid(format!(
                "{} image ids, {} feature rows, {} labels",
                image_ids.len(),
                features.nrows(),
                labels.len()
            )));
        }
        Ok(FeatureDataset {
            image_ids,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows whose label satisfies `keep`, in original order.
    pub fn filter(&self, mut keep: impl FnMut(Option<&str>) -> bool) -> FeatureDataset {
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| keep(self.labels[i].as_deref()))
            .collect();
        self.select(&rows)
    }

    pub fn select(&self, rows: &[usize]) -> FeatureDataset {
        let features = DMatrix::from_fn(rows.len(), self.dim(), |r, c| self.features[(rows[r], c)]);
        FeatureDataset {
            image_ids: rows.iter().map(|&i| self.image_ids[i].clone()).collect(),
            features,
            labels: rows.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// Same rows with labels dropped.
    pub fn unlabeled(&self) -> FeatureDataset {
        FeatureDataset {
            labels: vec![None; self.len()],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub class_order: Vec<ClassId>,
    pub c: f64,
    /// One row per class, `d_feat + 1` entries, bias last.
    pub weights: Vec<Vec<f64>>,
}

impl LogRegModel {
    pub fn n_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, |w| w.len() - 1)
    }

    /// Raw per-class decision values `w_k . [x, 1]`.
    pub fn decision(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.weights.iter().map(|w| margin(w, x)).collect())
    }
}

fn margin(w: &[f64], x: &[f64]) -> f64 {
    let (bias, coef) = w.split_last().expect("weight row has a bias");
    coef.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Per-class binary problem on the bias-augmented design matrix.
struct BinaryProblem<'a> {
    x: &'a DMatrix<f64>,
    z: Vec<f64>,
    c: f64,
}

impl BinaryProblem<'_> {
    fn margins(&self, w: &DVector<f64>) -> DVector<f64> {
        self.x * w
    }

    fn objective(&self, w: &DVector<f64>) -> f64 {
        let m = self.margins(w);
        let data: f64 = m
            .iter()
            .zip(&self.z)
            .map(|(mi, zi)| softplus(-zi * mi))
            .sum();
        0.5 * w.norm_squared() + self.c * data
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let m = self.margins(w);
        let coef = DVector::from_iterator(
            m.len(),
            m.iter()
                .zip(&self.z)
                .map(|(mi, zi)| -zi * sigmoid(-zi * mi) * self.c),
        );
        w + self.x.transpose() * coef
    }

    fn hessian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let m = self.margins(w);
        let d = self.x.ncols();
        let mut h = DMatrix::identity(d, d);
        for (i, mi) in m.iter().enumerate() {
            let s = sigmoid(*mi);
            let k = self.c * s * (1.0 - s);
            let row = self.x.row(i);
            for a in 0..d {
                let ka = k * row[a];
                for b in 0..d {
                    h[(a, b)] += ka * row[b];
                }
            }
        }
        h
    }

    /// Damped Newton with Armijo backtracking; gradient step when the
    /// Hessian cannot be factored.
    fn solve(&self) -> DVector<f64> {
        let mut w = DVector::zeros(self.x.ncols());
        let mut f = self.objective(&w);
        for _ in 0..MAX_NEWTON_ITER {
            let g = self.gradient(&w);
            if g.norm() <= GRAD_TOL {
                break;
            }
            let dir = match self.hessian(&w).cholesky() {
                Some(ch) => -ch.solve(&g),
                None => -g.clone(),
            };
            let slope = g.dot(&dir);
            let mut step = 1.0;
            let mut moved = false;
            while step > 1e-20 {
                let cand = &w + &dir * step;
                let fc = self.objective(&cand);
                if fc <= f + 1e-4 * step * slope {
                    w = cand;
                    f = fc;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        w
    }
}

fn augmented(features: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = features.shape();
    DMatrix::from_fn(n, d + 1, |i, j| if j < d { features[(i, j)] } else { 1.0 })
}

/// Per-class objective `1/2 |w|^2 + c sum_i ln(1 + exp(-z_i w.x_i))` at
/// the given weights, `z_i = +1` for rows of `class`.
pub fn class_objective(train: &FeatureDataset, class: &str, c: f64, w: &[f64]) -> f64 {
    let x = augmented(&train.features);
    let problem = BinaryProblem {
        x: &x,
        z: labels_to_signs(train, class),
        c,
    };
    problem.objective(&DVector::from_column_slice(w))
}

/// Euclidean norm of the gradient of [`class_objective`].
pub fn class_gradient_norm(train: &FeatureDataset, class: &str, c: f64, w: &[f64]) -> f64 {
    let x = augmented(&train.features);
    let problem = BinaryProblem {
        x: &x,
        z: labels_to_signs(train, class),
        c,
    };
    problem.gradient(&DVector::from_column_slice(w)).norm()
}

fn labels_to_signs(train: &FeatureDataset, class: &str) -> Vec<f64> {
    train
        .labels
        .iter()
        .map(|l| {
            if l.as_deref() == Some(class) {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// Fits one binary problem per class in `classes`. Every training row must
/// carry a label from `classes`.
pub fn train_logreg(train: &FeatureDataset, classes: &[ClassId], c: f64) -> Result<LogRegModel> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::invalid(format!("c must be positive, got {c}")));
    }
    if classes.len() < 2 {
        return Err(Error::invalid("need at least two seen classes"));
    }
    if train.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }
    let mut counts: HashMap<&str, usize> = classes.iter().map(|c| (c.as_str(), 0)).collect();
    if counts.len() != classes.len() {
        let mut seen = std::collections::HashSet::new();
        let dup = classes.iter().find(|c| !seen.insert(c.as_str())).unwrap();
        return Err(Error::DuplicateClass(dup.clone()));
    }
    for (i, label) in train.labels.iter().enumerate() {
        let label = label.as_deref().ok_or_else(|| {
            Error::invalid(format!(
                "training row `{}` has no label",
                train.image_ids[i]
            ))
        })?;
        match counts.get_mut(label) {
            Some(n) => *n += 1,
            None => return Err(Error::UnknownClass(label.to_string())),
        }
    }
    if let Some(empty) = classes.iter().find(|c| counts[c.as_str()] == 0) {
        return Err(Error::EmptyClass(empty.clone()));
    }

    let x = augmented(&train.features);
    let weights = classes
        .iter()
        .map(|class| {
            let problem = BinaryProblem {
                x: &x,
                z: labels_to_signs(train, class),
                c,
            };
            let w = problem.solve();
            let g = problem.gradient(&w).norm();
            if g > 1e-6 {
                log::warn!("class `{class}`: gradient norm {g:e} after solve");
            }
            w.iter().copied().collect()
        })
        .collect();
    Ok(LogRegModel {
        class_order: classes.to_vec(),
        c,
        weights,
    })
}

/// Per-class sigmoid of the decision value, normalized to sum to one.
pub fn predict_proba(model: &LogRegModel, x: &[f64]) -> Result<Vec<f64>> {
    let m = model.decision(x)?;
    // log sigma(m) = -softplus(-m); normalize in log space
    let logs: Vec<f64> = m.iter().map(|&v| -softplus(-v)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Seed scores: seen columns from [`predict_proba`], `unseen` columns zero.
pub fn seed_matrix(
    test: &FeatureDataset,
    model: &LogRegModel,
    unseen: &[ClassId],
) -> Result<ScoreMatrix> {
    let p = model.n_classes();
    let n = p + unseen.len();
    let mut values = DMatrix::zeros(test.len(), n);
    let mut row = vec![0.0; test.dim()];
    for i in 0..test.len() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = test.features[(i, j)];
        }
        for (j, prob) in predict_proba(model, &row)?.into_iter().enumerate() {
            values[(i, j)] = prob;
        }
    }
    let class_order = model.class_order.iter().chain(unseen).cloned().collect();
    ScoreMatrix::new(values, test.image_ids.clone(), class_order, p)
}

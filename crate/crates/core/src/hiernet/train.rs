use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{backward, GradientSpec};
use super::forward::{domain_loss, forward, hierarchical_loss};
use super::{HierNetParams, HierSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mu_f: f64,
    pub mu_g: f64,
    pub mu_d: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mu_f: 1.0,
            mu_g: 1.0,
            mu_d: 0.1,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        for (name, v) in [
            ("mu_f", self.mu_f),
            ("mu_g", self.mu_g),
            ("mu_d", self.mu_d),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Momentum buffer, one entry per flattened parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub velocity: Vec<f64>,
}

impl TrainState {
    pub fn new(params: &HierNetParams) -> Self {
        TrainState {
            velocity: vec![0.0; params.n_params()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean `L_h` over labeled samples after the epoch.
    pub hierarchical_loss: f64,
    /// Mean `L_d` over all samples after the epoch.
    pub domain_loss: f64,
}

/// One SGD-with-momentum step: `v <- m v + lr g`, `theta <- theta - v`.
/// Returns the batch-mean hierarchical and domain losses before the update.
pub fn train_step(
    batch: &[HierSample],
    params: &mut HierNetParams,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<(f64, f64)> {
    config.validate()?;
    let spec = GradientSpec::training(config.mu_f, config.mu_g, config.mu_d);
    let g = backward(params, batch, spec)?;
    if !g.hierarchical_loss.is_finite() {
        return Err(Error::NonFinite("hierarchical loss".into()));
    }
    if !g.domain_loss.is_finite() {
        return Err(Error::NonFinite("domain loss".into()));
    }
    let flat_g = g.flatten();
    if let Some(i) = flat_g.iter().position(|v| !v.is_finite()) {
        let what = if i < params.n_shared_params() {
            "shared-parameter gradient"
        } else {
            "domain-head gradient"
        };
        return Err(Error::NonFinite(format!("{what} (parameter {i})")));
    }
    if state.velocity.len() != flat_g.len() {
        return Err(Error::DimensionMismatch {
            expected: flat_g.len(),
            got: state.velocity.len(),
        });
    }
    let mut flat = params.flatten();
    for ((theta, v), gi) in flat.iter_mut().zip(&mut state.velocity).zip(&flat_g) {
        *v = config.momentum * *v + config.learning_rate * gi;
        *theta -= *v;
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    params.assign(&flat)?;
    Ok((g.hierarchical_loss, g.domain_loss))
}

/// Mean `L_h` over labeled samples and mean `L_d` over all samples.
pub fn evaluate(
    params: &HierNetParams,
    samples: &[HierSample],
    mu_f: f64,
    mu_g: f64,
) -> Result<(f64, f64)> {
    let mut hier = 0.0;
    let mut labeled = 0usize;
    let mut dom = 0.0;
    for s in samples {
        let out = forward(&s.x, params)?;
        if s.labels.is_some() {
            hier += hierarchical_loss(s, &out, mu_f, mu_g)?;
            labeled += 1;
        }
        dom += domain_loss(s, &out)?;
    }
    Ok((
        if labeled > 0 {
            hier / labeled as f64
        } else {
            0.0
        },
        if samples.is_empty() {
            0.0
        } else {
            dom / samples.len() as f64
        },
    ))
}

/// Shuffled minibatch epochs; the shuffle is seeded by `config.seed`.
pub fn train_epochs(
    params: &mut HierNetParams,
    samples: &[HierSample],
    config: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainState::new(params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<HierSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            train_step(&batch, params, config, &mut state)?;
        }
        let (h, d) = evaluate(params, samples, config.mu_f, config.mu_g)?;
        history.push(EpochStats {
            epoch,
            hierarchical_loss: h,
            domain_loss: d,
        });
    }
    Ok(history)
}

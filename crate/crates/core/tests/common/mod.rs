#![allow(dead_code)]

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use zsl_core::hiernet::{
    Activation, Architecture, Domain, DomainTap, HierLabels, HierNetParams, HierSample,
};
use zsl_core::propagation::ScoreMatrix;
use zsl_core::seeder::FeatureDataset;
use zsl_core::semantic::SemanticSpace;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn class_ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:03}")).collect()
}

/// Random Gaussian semantic vectors; seen ids `s..`, unseen ids `u..`.
pub fn random_space(rng: &mut ChaCha8Rng, p: usize, q: usize, dim: usize) -> SemanticSpace {
    let seen = class_ids("s", p);
    let unseen = class_ids("u", q);
    let vectors: HashMap<String, Vec<f64>> = seen
        .iter()
        .chain(&unseen)
        .map(|id| (id.clone(), (0..dim).map(|_| normal(rng)).collect()))
        .collect();
    SemanticSpace::new(seen, unseen, vectors).unwrap()
}

/// Rows are seen-class probability vectors, unseen columns zero.
pub fn random_seeds(rng: &mut ChaCha8Rng, rows: usize, p: usize, q: usize) -> ScoreMatrix {
    let n = p + q;
    let mut values = DMatrix::zeros(rows, n);
    for i in 0..rows {
        let raw: Vec<f64> = (0..p).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for j in 0..p {
            values[(i, j)] = raw[j] / total;
        }
    }
    let order: Vec<String> = class_ids("s", p)
        .into_iter()
        .chain(class_ids("u", q))
        .collect();
    ScoreMatrix::new(
        values,
        (0..rows).map(|i| format!("img{i}")).collect(),
        order,
        p,
    )
    .unwrap()
}

/// Independent class-graph construction: full distance sort per row.
pub fn brute_force_weights(space: &SemanticSpace, k1: usize, k2: usize) -> DMatrix<f64> {
    let (p, n) = (space.p(), space.p() + space.q());
    let order = space.class_order();
    let vec_of = |i: usize| space.vector(&order[i]).unwrap().to_vec();
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut w = DMatrix::zeros(n, n);
    for i in 0..p {
        let vi = vec_of(i);
        let mut seen: Vec<(f64, usize)> = (0..p)
            .filter(|&j| j != i)
            .map(|j| (dist(&vi, &vec_of(j)), j))
            .collect();
        let mut unseen: Vec<(f64, usize)> = (p..n).map(|j| (dist(&vi, &vec_of(j)), j)).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        unseen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(d, j) in seen.iter().take(k1).chain(unseen.iter().take(k2)) {
            w[(i, j)] = (-d).exp();
        }
    }
    for i in p..n {
        w[(i, i)] = 1.0;
    }
    w
}

/// `Y sum_t (alpha theta)^t`, summed until the term vanishes.
pub fn neumann(y: &DMatrix<f64>, theta: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let step = theta * alpha;
    let mut term = y.clone();
    let mut sum = y.clone();
    for _ in 0..100_000 {
        term = &term * &step;
        sum += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    sum
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Two to three Gaussian blobs in up to two dimensions.
pub fn toy_dataset(rng: &mut ChaCha8Rng, dim: usize, n: usize, classes: usize) -> FeatureDataset {
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| 2.0 * normal(rng)).collect())
        .collect();
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        values.extend(centers[k].iter().map(|c| c + normal(rng)));
        labels.push(Some(format!("k{k}")));
    }
    FeatureDataset::new(
        (0..n).map(|i| format!("x{i}")).collect(),
        DMatrix::from_row_slice(n, dim, &values),
        labels,
    )
    .unwrap()
}

/// `1/2 |w|^2 + c sum ln(1 + exp(-z w.[x,1]))`, written out directly.
pub fn logistic_objective(data: &FeatureDataset, class: &str, c: f64, w: &[f64]) -> f64 {
    let d = data.dim();
    let mut loss = 0.0;
    for i in 0..data.len() {
        let z = if data.labels[i].as_deref() == Some(class) {
            1.0
        } else {
            -1.0
        };
        let m: f64 = (0..d).map(|j| w[j] * data.features[(i, j)]).sum::<f64>() + w[d];
        let t = -z * m;
        loss += t.max(0.0) + (-t.abs()).exp().ln_1p();
    }
    0.5 * w.iter().map(|v| v * v).sum::<f64>() + c * loss
}

/// Zooming grid search over `[-r, r]^(d+1)`: each round scans an 11-point
/// grid per axis around the incumbent, then shrinks the box.
pub fn grid_search_minimum(data: &FeatureDataset, class: &str, c: f64) -> f64 {
    let k = data.dim() + 1;
    let mut center = vec![0.0; k];
    let mut radius = 50.0;
    let mut best = logistic_objective(data, class, c, &center);
    let steps = 11usize;
    for _ in 0..40 {
        let total = steps.pow(k as u32);
        let mut best_w = center.clone();
        for idx in 0..total {
            let mut rem = idx;
            let w: Vec<f64> = center
                .iter()
                .map(|c0| {
                    let s = rem % steps;
                    rem /= steps;
                    c0 + radius * (2.0 * s as f64 / (steps - 1) as f64 - 1.0)
                })
                .collect();
            let f = logistic_objective(data, class, c, &w);
            if f < best {
                best = f;
                best_w = w;
            }
        }
        center = best_w;
        radius *= 0.5;
    }
    best
}

pub fn random_arch(rng: &mut ChaCha8Rng, activation: Activation, tap: DomainTap) -> Architecture {
    let depth = rng.gen_range(3..=4);
    let mut taps = [0usize; 3];
    let picks = rand::seq::index::sample(rng, depth, 3).into_vec();
    let mut picks = picks;
    picks.sort();
    taps.copy_from_slice(&picks);
    Architecture {
        input_dim: rng.gen_range(2..=4),
        trunk_widths: (0..depth).map(|_| rng.gen_range(2..=5)).collect(),
        taps,
        head_hidden: [
            rng.gen_range(2..=4),
            rng.gen_range(2..=4),
            rng.gen_range(2..=4),
        ],
        n_family: 2,
        n_genus: rng.gen_range(2..=3),
        n_species: rng.gen_range(3..=4),
        domain_hidden: [rng.gen_range(2..=4), rng.gen_range(2..=4)],
        activation,
        domain_tap: tap,
    }
}

/// Params from the seeded init, perturbed so that biases are nonzero.
pub fn random_params(rng: &mut ChaCha8Rng, arch: &Architecture) -> HierNetParams {
    let mut p = HierNetParams::init(arch, rng.gen()).unwrap();
    let flat: Vec<f64> = p
        .flatten()
        .iter()
        .map(|v| v + rng.gen_range(-0.3..0.3))
        .collect();
    p.assign(&flat).unwrap();
    p
}

/// Mixed batch: labeled source rows and unlabeled target rows.
pub fn random_batch(rng: &mut ChaCha8Rng, arch: &Architecture, size: usize) -> Vec<HierSample> {
    (0..size)
        .map(|i| {
            let source = i % 3 != 2;
            HierSample {
                x: (0..arch.input_dim).map(|_| normal(rng)).collect(),
                labels: source.then(|| HierLabels {
                    family: rng.gen_range(0..arch.n_family),
                    genus: rng.gen_range(0..arch.n_genus),
                    species: rng.gen_range(0..arch.n_species),
                }),
                domain: if source {
                    Domain::Source
                } else {
                    Domain::Target
                },
            }
        })
        .collect()
}

/// `ln sum exp(z) - z[label]`, shifted by the max.
pub fn softmax_ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

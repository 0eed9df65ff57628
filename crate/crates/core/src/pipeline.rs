//! End-to-end runs over class-disjoint cross-validation folds.
//!
//! Per fold: optionally train the hierarchical network on seen-class images
//! (unseen-class images as the unlabeled second domain) and swap in its
//! features; fit the seeder; build the class graph and the propagation
//! operator; propagate; predict; score.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hiernet::{Hierarchy, NetOptions, TrainedNet};
use crate::io::{self, SemanticVectors, Split};
use crate::propagation::{
    predict_indices, propagate_closed, ArgmaxMode, OperatorDiagnostics, PiMode,
    PropagationOperator, ScoreMatrix,
};
use crate::seeder::{seed_matrix, train_logreg, FeatureDataset};
use crate::semantic::{build_weight_matrix, ClassId, SemanticSpace};

/// Hyperparameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub k1: usize,
    pub k2: usize,
    pub eta: f64,
    pub alpha: f64,
    pub c: f64,
    pub pi_mode: PiMode,
    pub argmax: ArgmaxMode,
    pub zscore_semantic: bool,
    pub net: Option<NetOptions>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            k1: 5,
            k2: 3,
            eta: 0.001,
            alpha: 0.8,
            c: 0.01,
            pi_mode: PiMode::Literal,
            argmax: ArgmaxMode::Unseen,
            zscore_semantic: false,
            net: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub features: PathBuf,
    pub semantic: PathBuf,
    pub hierarchy: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub n_folds: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(flatten)]
    pub settings: Settings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            features: PathBuf::new(),
            semantic: PathBuf::new(),
            hierarchy: None,
            splits: None,
            n_folds: 4,
            seed: 0,
            output_dir: PathBuf::from("out"),
            settings: Settings::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let s = &mut self.settings;
        match key.as_str() {
            "features" => self.features = PathBuf::from(value.trim()),
            "semantic" => self.semantic = PathBuf::from(value.trim()),
            "hierarchy" => self.hierarchy = Some(PathBuf::from(value.trim())),
            "splits" => self.splits = Some(PathBuf::from(value.trim())),
            "folds" | "n_folds" => self.n_folds = parse_value(&key, value)?,
            "seed" => self.seed = parse_value(&key, value)?,
            "out" | "output_dir" => self.output_dir = PathBuf::from(value.trim()),
            "k1" => s.k1 = parse_value(&key, value)?,
            "k2" => s.k2 = parse_value(&key, value)?,
            "eta" => s.eta = parse_value(&key, value)?,
            "alpha" => s.alpha = parse_value(&key, value)?,
            "c" => s.c = parse_value(&key, value)?,
            "pi_mode" => s.pi_mode = value.trim().parse()?,
            "argmax" => s.argmax = value.trim().parse()?,
            "zscore" | "zscore_semantic" => s.zscore_semantic = parse_bool(&key, value)?,
            "net" => {
                if parse_bool(&key, value)? {
                    s.net.get_or_insert_with(NetOptions::default);
                } else {
                    s.net = None;
                }
            }
            "mu_f" | "mu_g" | "mu_d" | "learning_rate" | "momentum" | "batch_size" | "epochs" => {
                let n = s.net.get_or_insert_with(NetOptions::default);
                match key.as_str() {
                    "mu_f" => n.train.mu_f = parse_value(&key, value)?,
                    "mu_g" => n.train.mu_g = parse_value(&key, value)?,
                    "mu_d" => n.train.mu_d = parse_value(&key, value)?,
                    "learning_rate" => n.train.learning_rate = parse_value(&key, value)?,
                    "momentum" => n.train.momentum = parse_value(&key, value)?,
                    "batch_size" => n.train.batch_size = parse_value(&key, value)?,
                    _ => n.epochs = parse_value(&key, value)?,
                }
            }
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Flat `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected key = value", i + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Loaded inputs of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub features: FeatureDataset,
    pub semantic: SemanticVectors,
    pub hierarchy: Option<Hierarchy>,
}

impl ExperimentData {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        Ok(ExperimentData {
            features: io::read_features(&config.features)?,
            semantic: io::read_semantic_vectors(&config.semantic)?,
            hierarchy: config
                .hierarchy
                .as_deref()
                .map(io::read_hierarchy)
                .transpose()?,
        })
    }

    /// Sorted class ids that have both images and a semantic vector.
    pub fn classes(&self) -> Vec<ClassId> {
        let labeled: BTreeSet<&str> = self
            .features
            .labels
            .iter()
            .flatten()
            .map(String::as_str)
            .collect();
        labeled
            .into_iter()
            .filter(|c| self.semantic.vectors.contains_key(*c))
            .map(str::to_string)
            .collect()
    }
}

/// Seeded partition of `class_ids` into `n_folds` groups; fold `i` holds
/// out group `i`. Both sides keep the input order.
pub fn make_folds(class_ids: &[ClassId], n_folds: usize, seed: u64) -> Result<Vec<Split>> {
    if n_folds < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 folds, got {n_folds}"
        )));
    }
    if n_folds > class_ids.len() {
        return Err(Error::invalid(format!(
            "{n_folds} folds requested for {} classes",
            class_ids.len()
        )));
    }
    let mut idx: Vec<usize> = (0..class_ids.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = class_ids.len();
    Ok((0..n_folds)
        .map(|f| {
            let held: HashSet<usize> = idx[f * n / n_folds..(f + 1) * n / n_folds]
                .iter()
                .copied()
                .collect();
            let (unseen, seen): (Vec<_>, Vec<_>) = (0..n).partition(|i| held.contains(i));
            Split {
                seen: seen.into_iter().map(|i| class_ids[i].clone()).collect(),
                unseen: unseen.into_iter().map(|i| class_ids[i].clone()).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub true_label: ClassId,
    pub predicted: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSummary {
    pub first_epoch_hierarchical_loss: f64,
    pub final_hierarchical_loss: f64,
    pub final_domain_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub seen: Vec<ClassId>,
    pub unseen: Vec<ClassId>,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub chance: f64,
    /// Every test image had all unseen scores tied.
    pub degenerate: bool,
    /// true class -> predicted class -> count
    pub confusion: BTreeMap<ClassId, BTreeMap<ClassId, usize>>,
    pub diagnostics: OperatorDiagnostics,
    pub net: Option<NetSummary>,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_folds: usize,
    pub mean_accuracy: Option<f64>,
    pub folds: Vec<FoldReport>,
    pub config: Option<ExperimentConfig>,
}

impl EvalReport {
    pub fn from_folds(folds: Vec<FoldReport>, config: Option<ExperimentConfig>) -> Self {
        let mean_accuracy = (!folds.is_empty())
            .then(|| folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64);
        EvalReport {
            n_folds: folds.len(),
            mean_accuracy,
            folds,
            config,
        }
    }
}

fn check_split(split: &Split, data: &ExperimentData) -> Result<()> {
    let seen: HashSet<&str> = split.seen.iter().map(String::as_str).collect();
    if let Some(c) = split.unseen.iter().find(|c| seen.contains(c.as_str())) {
        return Err(Error::invalid(format!(
            "class `{c}` is both seen and unseen"
        )));
    }
    for c in split.seen.iter().chain(&split.unseen) {
        if !data.semantic.vectors.contains_key(c) {
            return Err(Error::UnknownClass(c.clone()));
        }
    }
    Ok(())
}

/// Seen-class rows (labeled) and unseen-class rows (labels kept for scoring).
fn fold_data(data: &FeatureDataset, split: &Split) -> (FeatureDataset, FeatureDataset) {
    let seen: HashSet<&str> = split.seen.iter().map(String::as_str).collect();
    let unseen: HashSet<&str> = split.unseen.iter().map(String::as_str).collect();
    let train = data.filter(|l| l.is_some_and(|l| seen.contains(l)));
    let test = data.filter(|l| l.is_some_and(|l| unseen.contains(l)));
    (train, test)
}

/// Runs one fold; errors carry the fold index and stage.
pub fn run_fold(
    data: &ExperimentData,
    split: &Split,
    settings: &Settings,
    fold: usize,
) -> Result<FoldReport> {
    check_split(split, data).map_err(|e| e.at_stage(fold, "ingest"))?;
    let (mut train, mut test) = fold_data(&data.features, split);
    let unseen: HashSet<&str> = split.unseen.iter().map(String::as_str).collect();
    if let Some(bad) = train
        .labels
        .iter()
        .flatten()
        .find(|l| unseen.contains(l.as_str()))
    {
        return Err(
            Error::invalid(format!("unseen class `{bad}` in training labels"))
                .at_stage(fold, "ingest"),
        );
    }

    let mut net_summary = None;
    if let Some(options) = &settings.net {
        let hierarchy = data.hierarchy.as_ref().ok_or_else(|| {
            Error::invalid("network training needs a hierarchy file").at_stage(fold, "train-net")
        })?;
        let net = TrainedNet::train(&train, &test.unlabeled(), hierarchy, &split.seen, options)
            .map_err(|e| e.at_stage(fold, "train-net"))?;
        net_summary = Some(NetSummary {
            first_epoch_hierarchical_loss: net
                .history
                .first()
                .map_or(f64::NAN, |h| h.hierarchical_loss),
            final_hierarchical_loss: net.history.last().map_or(f64::NAN, |h| h.hierarchical_loss),
            final_domain_loss: net.history.last().map_or(f64::NAN, |h| h.domain_loss),
        });
        train = net
            .extract(&train)
            .map_err(|e| e.at_stage(fold, "extract-features"))?;
        test = net
            .extract(&test)
            .map_err(|e| e.at_stage(fold, "extract-features"))?;
    }

    let model = train_logreg(&train, &split.seen, settings.c)
        .map_err(|e| e.at_stage(fold, "train-seeder"))?;
    let seeds = seed_matrix(&test.unlabeled(), &model, &split.unseen)
        .map_err(|e| e.at_stage(fold, "seed"))?;

    let space = SemanticSpace::new(
        split.seen.clone(),
        split.unseen.clone(),
        data.semantic.vectors.clone(),
    )
    .map_err(|e| e.at_stage(fold, "build-graph"))?;
    let space = if settings.zscore_semantic {
        space.z_scored()
    } else {
        space
    };
    let graph = build_weight_matrix(&space, settings.k1, settings.k2)
        .map_err(|e| e.at_stage(fold, "build-graph"))?;
    let op = PropagationOperator::new(&graph, settings.eta, settings.alpha, settings.pi_mode)
        .map_err(|e| e.at_stage(fold, "operator"))?;
    let scores = propagate_closed(&seeds, &op).map_err(|e| e.at_stage(fold, "propagate"))?;

    Ok(score_fold(
        fold,
        split,
        &test,
        &scores,
        settings.argmax,
        op.diagnostics(),
        train.len(),
        net_summary,
    ))
}

#[allow(clippy::too_many_arguments)]
fn score_fold(
    fold: usize,
    split: &Split,
    test: &FeatureDataset,
    scores: &ScoreMatrix,
    argmax: ArgmaxMode,
    diagnostics: OperatorDiagnostics,
    n_train: usize,
    net: Option<NetSummary>,
) -> FoldReport {
    let picked = predict_indices(scores, argmax);
    let mut confusion: BTreeMap<ClassId, BTreeMap<ClassId, usize>> = BTreeMap::new();
    let mut correct = 0usize;
    let mut predictions = Vec::with_capacity(test.len());
    for (i, &j) in picked.iter().enumerate() {
        let truth = test.labels[i].clone().unwrap_or_default();
        let predicted = scores.class_order[j].clone();
        if predicted == truth {
            correct += 1;
        }
        *confusion
            .entry(truth.clone())
            .or_default()
            .entry(predicted.clone())
            .or_default() += 1;
        predictions.push(Prediction {
            image_id: test.image_ids[i].clone(),
            true_label: truth,
            predicted,
        });
    }
    let degenerate = scores.values.row_iter().all(|row| {
        let unseen: Vec<f64> = row.iter().skip(scores.p).copied().collect();
        unseen.windows(2).all(|w| w[0] == w[1])
    });
    FoldReport {
        fold,
        seen: split.seen.clone(),
        unseen: split.unseen.clone(),
        n_train,
        n_test: test.len(),
        accuracy: if test.is_empty() {
            0.0
        } else {
            correct as f64 / test.len() as f64
        },
        chance: 1.0 / split.unseen.len() as f64,
        degenerate,
        confusion,
        diagnostics,
        net,
        predictions,
    }
}

pub fn run_folds(
    data: &ExperimentData,
    splits: &[Split],
    settings: &Settings,
) -> Result<Vec<FoldReport>> {
    splits
        .iter()
        .enumerate()
        .map(|(i, s)| run_fold(data, s, settings, i))
        .collect()
}

/// Folds from the split file, or seeded folds over all classes.
pub fn resolve_splits(config: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<Split>> {
    match &config.splits {
        Some(path) => io::read_splits(path),
        None => make_folds(&data.classes(), config.n_folds, config.seed),
    }
}

/// Loads inputs, runs every fold, writes the report files.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EvalReport> {
    let data = ExperimentData::load(config)?;
    let splits = resolve_splits(config, &data)?;
    let folds = run_folds(&data, &splits, &config.settings)?;
    let report = EvalReport::from_folds(folds, Some(config.clone()));
    emit_report(&report, &config.output_dir)?;
    Ok(report)
}

/// Writes `report.json`, `predictions_fold{i}.csv`, `diagnostics_fold{i}.json`.
pub fn emit_report(report: &EvalReport, output_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    io::write_json(&output_dir.join("report.json"), report)?;
    for f in &report.folds {
        let path = output_dir.join(format!("predictions_fold{}.csv", f.fold));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for p in &f.predictions {
            w.serialize(p)
                .map_err(|e| Error::parse(&path, e.to_string()))?;
        }
        if f.predictions.is_empty() {
            w.write_record(["image_id", "true_label", "predicted"])
                .map_err(|e| Error::parse(&path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        io::write_json(
            &output_dir.join(format!("diagnostics_fold{}.json", f.fold)),
            &f.diagnostics,
        )?;
    }
    Ok(())
}

/// Grid axes for [`tune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub k1: Vec<usize>,
    pub k2: Vec<usize>,
    pub alpha: Vec<f64>,
    /// Only swept when network training is enabled.
    pub mu_d: Vec<f64>,
}

impl Default for TuneGrid {
    fn default() -> Self {
        TuneGrid {
            k1: vec![1, 3, 5, 7],
            k2: vec![1, 2, 3],
            alpha: vec![0.2, 0.5, 0.8, 0.9],
            mu_d: vec![0.0, 0.1, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunePoint {
    pub k1: usize,
    pub k2: usize,
    pub alpha: f64,
    pub mu_d: Option<f64>,
    /// Mean validation accuracy; `None` when some split could not run it.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub validation_splits: Vec<Split>,
    pub points: Vec<TunePoint>,
    pub best: Option<TunePoint>,
}

/// Holds out a third of the seen classes (at least one, leaving at least two)
/// as validation classes.
pub fn validation_split(seen: &[ClassId], seed: u64) -> Result<Split> {
    if seen.len() < 3 {
        return Err(Error::invalid(
            "need at least 3 seen classes for a validation split",
        ));
    }
    let held = (seen.len() / 3).clamp(1, seen.len() - 2);
    let mut folds = make_folds(seen, seen.len(), seed)?;
    // the first `held` single-class folds, merged
    let chosen: HashSet<ClassId> = folds.drain(..held).flat_map(|s| s.unseen).collect();
    let (unseen, seen): (Vec<_>, Vec<_>) = seen.iter().cloned().partition(|c| chosen.contains(c));
    Ok(Split { seen, unseen })
}

/// Grid sweep on validation splits nested inside the seen classes of each
/// outer split. The best point maximizes mean validation accuracy; ties keep
/// the earlier grid point.
pub fn tune(
    data: &ExperimentData,
    outer: &[Split],
    base: &Settings,
    grid: &TuneGrid,
    seed: u64,
) -> Result<TuneReport> {
    let inner: Vec<Split> = outer
        .iter()
        .enumerate()
        .map(|(i, s)| validation_split(&s.seen, seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let mu_axis: Vec<Option<f64>> = if base.net.is_some() {
        grid.mu_d.iter().copied().map(Some).collect()
    } else {
        vec![None]
    };

    let mut points = Vec::new();
    for mu_d in &mu_axis {
        let mut settings = base.clone();
        if let (Some(net), Some(mu)) = (settings.net.as_mut(), mu_d) {
            net.train.mu_d = *mu;
        }
        // per split: features, seeds, and semantic space are shared by the
        // graph/propagation grid
        let mut prepared = Vec::new();
        for (i, split) in inner.iter().enumerate() {
            prepared
                .push(prepare_split(data, split, &settings).map_err(|e| e.at_stage(i, "tune"))?);
        }
        for &k1 in &grid.k1 {
            for &k2 in &grid.k2 {
                for &alpha in &grid.alpha {
                    let mut total = 0.0;
                    let mut ok = true;
                    for (split, prep) in inner.iter().zip(&prepared) {
                        match evaluate_prepared(split, prep, &settings, k1, k2, alpha) {
                            Ok(acc) => total += acc,
                            Err(_) => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    points.push(TunePoint {
                        k1,
                        k2,
                        alpha,
                        mu_d: *mu_d,
                        accuracy: ok.then(|| total / inner.len() as f64),
                    });
                }
            }
        }
    }
    let best = points
        .iter()
        .filter(|p| p.accuracy.is_some())
        .fold(None::<&TunePoint>, |best, p| match best {
            Some(b) if b.accuracy >= p.accuracy => Some(b),
            _ => Some(p),
        })
        .cloned();
    Ok(TuneReport {
        validation_splits: inner,
        points,
        best,
    })
}

struct Prepared {
    test: FeatureDataset,
    seeds: ScoreMatrix,
    space: SemanticSpace,
}

fn prepare_split(data: &ExperimentData, split: &Split, settings: &Settings) -> Result<Prepared> {
    check_split(split, data)?;
    let (mut train, mut test) = fold_data(&data.features, split);
    if let Some(options) = &settings.net {
        let hierarchy = data
            .hierarchy
            .as_ref()
            .ok_or_else(|| Error::invalid("network training needs a hierarchy file"))?;
        let net = TrainedNet::train(&train, &test.unlabeled(), hierarchy, &split.seen, options)?;
        train = net.extract(&train)?;
        test = net.extract(&test)?;
    }
    let model = train_logreg(&train, &split.seen, settings.c)?;
    let seeds = seed_matrix(&test.unlabeled(), &model, &split.unseen)?;
    let space = SemanticSpace::new(
        split.seen.clone(),
        split.unseen.clone(),
        data.semantic.vectors.clone(),
    )?;
    let space = if settings.zscore_semantic {
        space.z_scored()
    } else {
        space
    };
    Ok(Prepared { test, seeds, space })
}

fn evaluate_prepared(
    split: &Split,
    prep: &Prepared,
    settings: &Settings,
    k1: usize,
    k2: usize,
    alpha: f64,
) -> Result<f64> {
    let graph = build_weight_matrix(&prep.space, k1, k2)?;
    let op = PropagationOperator::new(&graph, settings.eta, alpha, settings.pi_mode)?;
    let scores = propagate_closed(&prep.seeds, &op)?;
    let report = score_fold(
        0,
        split,
        &prep.test,
        &scores,
        settings.argmax,
        op.diagnostics(),
        0,
        None,
    );
    Ok(report.accuracy)
}

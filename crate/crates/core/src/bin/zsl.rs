use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use zsl_core::hiernet::{NetOptions, TrainedNet};
use zsl_core::io::{self, Split};
use zsl_core::pipeline::{self, ExperimentConfig, ExperimentData, TuneGrid};
use zsl_core::propagation::{
    predict_labels, propagate_closed, propagate_iterative, PropagationOperator,
};
use zsl_core::seeder::{seed_matrix, train_logreg};
use zsl_core::semantic::{build_weight_matrix, SemanticSpace};
use zsl_core::synth::{generate, SynthConfig};
use zsl_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "zsl",
    version,
    about = "Zero-shot classification by class-graph label propagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validated end-to-end run; writes report.json and per-fold files.
    Run(Common),
    /// Class graph for one split; writes graph.csv.
    BuildGraph(Common),
    /// Propagates a seed matrix over the class graph; writes scores.csv,
    /// predictions.csv and diagnostics.json.
    Propagate {
        #[command(flatten)]
        common: Common,
        /// Seed CSV from `train-seeder`.
        #[arg(long)]
        seeds: PathBuf,
        /// Use the fixed-point iteration instead of the direct solve.
        #[arg(long)]
        iterative: bool,
    },
    /// Fits the seen-class classifier; writes model.json and seeds.csv.
    TrainSeeder(Common),
    /// Trains the hierarchical network on one split; writes net.json.
    TrainNet(Common),
    /// Replaces input features with network features; writes features.csv.
    ExtractFeatures {
        #[command(flatten)]
        common: Common,
        /// Network file from `train-net`.
        #[arg(long)]
        net_file: PathBuf,
    },
    /// Grid sweep on validation classes nested in each split's seen classes;
    /// writes tune.json.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        grid_k1: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        grid_k2: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        grid_alpha: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        grid_mu_d: Option<Vec<f64>>,
    },
    /// Seeded class-disjoint folds; writes splits.json.
    MakeFolds(Common),
    /// Writes a synthetic hierarchical dataset (features.csv, semantic.csv,
    /// hierarchy.csv).
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        families: usize,
        #[arg(long, default_value_t = 2)]
        genera_per_family: usize,
        #[arg(long, default_value_t = 2)]
        species_per_genus: usize,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 30)]
        images_per_species: usize,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
}

/// Inputs and hyperparameters. Flags override the config file.
#[derive(Args, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    semantic: Option<String>,
    #[arg(long)]
    hierarchy: Option<String>,
    /// JSON split file: one `{seen, unseen}` object or a list.
    #[arg(long)]
    splits: Option<String>,
    /// Split index for single-split subcommands.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    folds: Option<String>,
    #[arg(long)]
    k1: Option<String>,
    #[arg(long)]
    k2: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    c: Option<String>,
    #[arg(long)]
    mu_f: Option<String>,
    #[arg(long)]
    mu_g: Option<String>,
    #[arg(long)]
    mu_d: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long, value_parser = ["literal", "stationary"])]
    pi_mode: Option<String>,
    #[arg(long, value_parser = ["unseen", "all"])]
    argmax: Option<String>,
    /// Z-score semantic vectors per dimension before building the graph.
    #[arg(long)]
    zscore: bool,
    /// Train the hierarchical network and use its features.
    #[arg(long)]
    net: bool,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        let flags = [
            ("features", &self.features),
            ("semantic", &self.semantic),
            ("hierarchy", &self.hierarchy),
            ("splits", &self.splits),
            ("folds", &self.folds),
            ("k1", &self.k1),
            ("k2", &self.k2),
            ("eta", &self.eta),
            ("alpha", &self.alpha),
            ("c", &self.c),
            ("mu_f", &self.mu_f),
            ("mu_g", &self.mu_g),
            ("mu_d", &self.mu_d),
            ("learning_rate", &self.learning_rate),
            ("momentum", &self.momentum),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("pi_mode", &self.pi_mode),
            ("argmax", &self.argmax),
            ("seed", &self.seed),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        if self.zscore {
            config.set("zscore", "true")?;
        }
        if self.net {
            config.set("net", "true")?;
        }
        Ok(config)
    }
}

fn required<'a>(path: &'a Path, name: &str) -> Result<&'a Path> {
    if path.as_os_str().is_empty() {
        Err(Error::InvalidInput(format!("--{name} is required")))
    } else {
        Ok(path)
    }
}

fn split_at(config: &ExperimentConfig, fold: usize) -> Result<Split> {
    let path = config
        .splits
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("--splits is required".into()))?;
    let mut splits = io::read_splits(path)?;
    if fold >= splits.len() {
        return Err(Error::InvalidInput(format!(
            "fold {fold} requested but {} holds {} split(s)",
            path.display(),
            splits.len()
        )));
    }
    Ok(splits.swap_remove(fold))
}

fn out_file(config: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::Io {
        path: config.output_dir.clone(),
        source: e,
    })?;
    Ok(config.output_dir.join(name))
}

fn space_for(config: &ExperimentConfig, split: &Split) -> Result<SemanticSpace> {
    let sv = io::read_semantic_vectors(required(&config.semantic, "semantic")?)?;
    let space = SemanticSpace::new(split.seen.clone(), split.unseen.clone(), sv.vectors)?;
    Ok(if config.settings.zscore_semantic {
        space.z_scored()
    } else {
        space
    })
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    image_id: &'a str,
    predicted: &'a str,
}

/// Runs `f` and tags a failure with `stage` unless it already carries one.
fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> std::result::Result<T, String> {
    f().map_err(|e| match e {
        Error::Stage { .. } => e.to_string(),
        other => format!("stage `{name}`: {other}"),
    })
}

fn execute(command: Command) -> std::result::Result<(), String> {
    match command {
        Command::Run(common) => {
            let config = stage("config", || common.config())?;
            let data = stage("ingest", || ExperimentData::load(&config))?;
            let splits = stage("make-folds", || pipeline::resolve_splits(&config, &data))?;
            let folds = stage("run", || {
                pipeline::run_folds(&data, &splits, &config.settings)
            })?;
            let report = pipeline::EvalReport::from_folds(folds, Some(config.clone()));
            stage("report", || {
                pipeline::emit_report(&report, &config.output_dir)
            })?;
            for f in &report.folds {
                println!(
                    "fold {}: accuracy {:.4} (chance {:.4}, {} test images){}",
                    f.fold,
                    f.accuracy,
                    f.chance,
                    f.n_test,
                    if f.degenerate {
                        " [degenerate: all unseen scores tied]"
                    } else {
                        ""
                    }
                );
            }
            match report.mean_accuracy {
                Some(m) => println!("mean accuracy {m:.4}"),
                None => println!("no folds"),
            }
            println!(
                "report written to {}",
                config.output_dir.join("report.json").display()
            );
        }
        Command::MakeFolds(common) => stage("make-folds", || {
            let config = common.config()?;
            let sv = io::read_semantic_vectors(required(&config.semantic, "semantic")?)?;
            let classes = if config.features.as_os_str().is_empty() {
                let mut c = sv.order.clone();
                c.sort();
                c
            } else {
                ExperimentData {
                    features: io::read_features(&config.features)?,
                    semantic: sv,
                    hierarchy: None,
                }
                .classes()
            };
            let folds = pipeline::make_folds(&classes, config.n_folds, config.seed)?;
            let path = out_file(&config, "splits.json")?;
            io::write_json(&path, &folds)?;
            println!("{} folds written to {}", folds.len(), path.display());
            Ok(())
        })?,
        Command::BuildGraph(common) => stage("build-graph", || {
            let config = common.config()?;
            let split = split_at(&config, common.fold)?;
            let space = space_for(&config, &split)?;
            let graph = build_weight_matrix(&space, config.settings.k1, config.settings.k2)?;
            let path = out_file(&config, "graph.csv")?;
            io::write_graph(&path, &graph)?;
            println!(
                "{}x{} graph written to {}",
                graph.n(),
                graph.n(),
                path.display()
            );
            Ok(())
        })?,
        Command::TrainSeeder(common) => stage("train-seeder", || {
            let config = common.config()?;
            let split = split_at(&config, common.fold)?;
            let data = io::read_features(required(&config.features, "features")?)?;
            let seen: std::collections::HashSet<&str> =
                split.seen.iter().map(String::as_str).collect();
            let train = data.filter(|l| l.is_some_and(|l| seen.contains(l)));
            let test = data
                .filter(|l| !l.is_some_and(|l| seen.contains(l)))
                .unlabeled();
            let model = train_logreg(&train, &split.seen, config.settings.c)?;
            let seeds = seed_matrix(&test, &model, &split.unseen)?;
            io::write_json(&out_file(&config, "model.json")?, &model)?;
            let path = out_file(&config, "seeds.csv")?;
            io::write_scores(&path, &seeds)?;
            println!(
                "classifier over {} seen classes; seeds for {} images written to {}",
                model.n_classes(),
                seeds.values.nrows(),
                path.display()
            );
            Ok(())
        })?,
        Command::Propagate {
            common,
            seeds,
            iterative,
        } => stage("propagate", || {
            let config = common.config()?;
            let split = split_at(&config, common.fold)?;
            let space = space_for(&config, &split)?;
            let y = io::read_scores(&seeds, split.seen.len())?;
            if y.class_order != space.class_order() {
                return Err(Error::InvalidInput(
                    "seed columns do not match the split's seen-then-unseen class order".into(),
                ));
            }
            let s = &config.settings;
            let graph = build_weight_matrix(&space, s.k1, s.k2)?;
            let op = PropagationOperator::new(&graph, s.eta, s.alpha, s.pi_mode)?;
            let scores = if iterative {
                let r = propagate_iterative(&y, &op, 1e-12, 100_000)?;
                if !r.converged {
                    return Err(Error::NoConvergence {
                        iterations: r.iterations,
                        residual: r.last_delta,
                    });
                }
                r.scores
            } else {
                propagate_closed(&y, &op)?
            };
            io::write_scores(&out_file(&config, "scores.csv")?, &scores)?;
            io::write_json(&out_file(&config, "diagnostics.json")?, &op.diagnostics())?;
            let labels = predict_labels(&scores, s.argmax);
            let path = out_file(&config, "predictions.csv")?;
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?;
            for (id, label) in scores.image_ids.iter().zip(&labels) {
                w.serialize(PredictionRow {
                    image_id: id,
                    predicted: label,
                })
                .map_err(|e| Error::Parse {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            }
            w.flush().map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            println!("{} predictions written to {}", labels.len(), path.display());
            Ok(())
        })?,
        Command::TrainNet(common) => stage("train-net", || {
            let config = common.config()?;
            let split = split_at(&config, common.fold)?;
            let data = io::read_features(required(&config.features, "features")?)?;
            let hierarchy = io::read_hierarchy(
                config
                    .hierarchy
                    .as_deref()
                    .ok_or_else(|| Error::InvalidInput("--hierarchy is required".into()))?,
            )?;
            let seen: std::collections::HashSet<&str> =
                split.seen.iter().map(String::as_str).collect();
            let train = data.filter(|l| l.is_some_and(|l| seen.contains(l)));
            let target = data
                .filter(|l| !l.is_some_and(|l| seen.contains(l)))
                .unlabeled();
            let options = config
                .settings
                .net
                .clone()
                .unwrap_or_else(NetOptions::default);
            let net = TrainedNet::train(&train, &target, &hierarchy, &split.seen, &options)?;
            let path = out_file(&config, "net.json")?;
            io::write_json(&path, &net)?;
            if let Some(last) = net.history.last() {
                println!(
                    "epoch {}: hierarchical loss {:.6}, domain loss {:.6}",
                    last.epoch, last.hierarchical_loss, last.domain_loss
                );
            }
            println!("network written to {}", path.display());
            Ok(())
        })?,
        Command::ExtractFeatures { common, net_file } => stage("extract-features", || {
            let config = common.config()?;
            let net: TrainedNet = io::read_json(&net_file)?;
            let data = io::read_features(required(&config.features, "features")?)?;
            let out = net.extract(&data)?;
            let path = out_file(&config, "features.csv")?;
            io::write_features(&path, &out)?;
            println!(
                "{}x{} features written to {}",
                out.len(),
                out.dim(),
                path.display()
            );
            Ok(())
        })?,
        Command::Tune {
            common,
            grid_k1,
            grid_k2,
            grid_alpha,
            grid_mu_d,
        } => stage("tune", || {
            let config = common.config()?;
            let data = ExperimentData::load(&config)?;
            let splits = pipeline::resolve_splits(&config, &data)?;
            let mut grid = TuneGrid::default();
            if let Some(v) = grid_k1 {
                grid.k1 = v;
            }
            if let Some(v) = grid_k2 {
                grid.k2 = v;
            }
            if let Some(v) = grid_alpha {
                grid.alpha = v;
            }
            if let Some(v) = grid_mu_d {
                grid.mu_d = v;
            }
            let report = pipeline::tune(&data, &splits, &config.settings, &grid, config.seed)?;
            let path = out_file(&config, "tune.json")?;
            io::write_json(&path, &report)?;
            match &report.best {
                Some(b) => println!(
                    "best: k1 {} k2 {} alpha {}{} -> validation accuracy {:.4}",
                    b.k1,
                    b.k2,
                    b.alpha,
                    b.mu_d.map(|m| format!(" mu_d {m}")).unwrap_or_default(),
                    b.accuracy.unwrap_or(f64::NAN)
                ),
                None => println!("no grid point could be evaluated"),
            }
            println!("sweep written to {}", path.display());
            Ok(())
        })?,
        Command::Synth {
            seed,
            families,
            genera_per_family,
            species_per_genus,
            dim,
            images_per_species,
            out,
        } => stage("synth", || {
            let data = generate(&SynthConfig {
                seed,
                families,
                genera_per_family,
                species_per_genus,
                dim,
                images_per_species,
                ..SynthConfig::default()
            })?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            io::write_features(&out.join("features.csv"), &data.features)?;
            io::write_semantic_vectors(&out.join("semantic.csv"), &data.semantic)?;
            io::write_hierarchy(&out.join("hierarchy.csv"), &data.hierarchy)?;
            println!(
                "{} images of {} species written to {}",
                data.features.len(),
                data.semantic.order.len(),
                out.display()
            );
            Ok(())
        })?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("zsl: error: {e}");
            ExitCode::FAILURE
        }
    }
}

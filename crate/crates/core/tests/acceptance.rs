//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use common::*;
use zsl_core::hiernet::{
    backward, domain_loss, forward, hierarchical_loss, total_loss, Activation, DomainTap,
    GradientSpec, HierNetParams, HierSample, NetOptions,
};
use zsl_core::pipeline::{make_folds, run_folds, EvalReport, ExperimentData, Settings};
use zsl_core::propagation::{
    fixed_point_residual, propagate_closed, propagate_iterative, PiMode, PropagationOperator,
};
use zsl_core::seeder::{predict_proba, train_logreg};
use zsl_core::semantic::build_weight_matrix;
use zsl_core::synth::{generate, SynthConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn random_instance(r: &mut rand_chacha::ChaCha8Rng) -> (usize, usize, usize, usize, usize) {
    let p = r.gen_range(3..=30);
    let q = r.gen_range(1..=10);
    let dim = r.gen_range(2..=8);
    let k1 = r.gen_range(1..p);
    let k2 = r.gen_range(1..=q);
    (p, q, dim, k1, k2)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut worst_diff, mut worst_residual) = (0.0f64, 0.0f64);
    let mut literal_worst = 0.0f64;
    let mut all_converged = true;
    for i in 0..100 {
        let (p, q, dim, k1, k2) = random_instance(&mut r);
        let alpha = [0.1, 0.5, 0.9][i % 3];
        let space = random_space(&mut r, p, q, dim);
        let graph = build_weight_matrix(&space, k1, k2).unwrap();
        let y = random_seeds(&mut r, 5, p, q);
        let op = PropagationOperator::new(&graph, 0.001, alpha, PiMode::Stationary).unwrap();
        let closed = propagate_closed(&y, &op).unwrap();
        let iter = propagate_iterative(&y, &op, 1e-14, 100_000).unwrap();
        all_converged &= iter.converged;
        let series = neumann(&y.values, op.theta(), alpha);
        worst_diff = worst_diff
            .max(max_abs_diff(&closed.values, &series))
            .max(max_abs_diff(&iter.scores.values, &series))
            .max(max_abs_diff(&closed.values, &iter.scores.values));
        worst_residual = worst_residual.max(fixed_point_residual(&y, &closed, &op));
        if alpha < 0.9 {
            // row-sum weighting: the Neumann series needs alpha * rho < 1
            let lit = PropagationOperator::new(&graph, 0.001, alpha, PiMode::Literal).unwrap();
            let c = propagate_closed(&y, &lit).unwrap();
            let it = propagate_iterative(&y, &lit, 1e-14, 100_000).unwrap();
            let s = neumann(&y.values, lit.theta(), alpha);
            literal_worst = literal_worst
                .max(max_abs_diff(&c.values, &s))
                .max(max_abs_diff(&it.scores.values, &s));
            all_converged &= it.converged;
        }
    }
    let elapsed = start.elapsed();
    check(
        worst_diff <= 1e-8 && literal_worst <= 1e-8 && worst_residual <= 1e-10 && all_converged && elapsed < Duration::from_secs(5),
        format!(
            "100 instances, max route gap {worst_diff:.2e} (row-sum pi, alpha<=0.5: {literal_worst:.2e}), max residual {worst_residual:.2e}, {}",
            secs(elapsed)
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let (mut row_err, mut asym) = (0.0f64, 0.0f64);
    let mut structure = true;
    for _ in 0..100 {
        let (p, q, dim, k1, k2) = random_instance(&mut r);
        let space = random_space(&mut r, p, q, dim);
        let graph = build_weight_matrix(&space, k1, k2).unwrap();
        structure &= graph.weights == brute_force_weights(&space, k1, k2);
        let op =
            PropagationOperator::new(&graph, r.gen_range(0.0..0.5), 0.5, PiMode::Literal).unwrap();
        for m in [op.transition(), op.normalized()] {
            for row in m.row_iter() {
                row_err = row_err.max((row.sum() - 1.0).abs());
            }
        }
        asym = asym.max(max_abs_diff(op.theta(), &op.theta().transpose()));
    }
    let elapsed = start.elapsed();
    check(
        structure && row_err <= 1e-12 && asym == 0.0 && elapsed < Duration::from_secs(2),
        format!(
            "100 graphs, block structure exact: {structure}, max row-sum error {row_err:.2e}, theta asymmetry {asym:.1e}, {}",
            secs(elapsed)
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (p, q, dim, k1, k2) = random_instance(&mut r);
        let space = random_space(&mut r, p, q, dim);
        let graph = build_weight_matrix(&space, k1, k2).unwrap();
        let op = PropagationOperator::new(&graph, 0.001, 0.0, PiMode::Literal).unwrap();
        let y = random_seeds(&mut r, 4, p, q);
        worst = worst.max(max_abs_diff(
            &propagate_closed(&y, &op).unwrap().values,
            &y.values,
        ));
    }
    check(
        worst <= 1e-14,
        format!("20 instances, max |F - Y| {worst:.2e}"),
    )
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let mut solver_time = Duration::ZERO;
    let (mut worst_gap, mut worst_sum) = (0.0f64, 0.0f64);
    let mut beats_or_matches = true;
    for i in 0..10 {
        let dim = 1 + i % 2;
        let n = r.gen_range(10..=40);
        let k = 2 + i % 2;
        let c = [0.01, 0.1, 1.0, 10.0][i % 4];
        let data = toy_dataset(&mut r, dim, n, k);
        let classes: Vec<String> = (0..k).map(|j| format!("k{j}")).collect();
        let t = Instant::now();
        let model = train_logreg(&data, &classes, c).unwrap();
        solver_time += t.elapsed();
        for (j, class) in classes.iter().enumerate() {
            let solved = logistic_objective(&data, class, c, &model.weights[j]);
            let oracle = grid_search_minimum(&data, class, c);
            worst_gap = worst_gap.max((solved - oracle).abs() / oracle);
            beats_or_matches &= solved <= oracle * (1.0 + 1e-4);
        }
        for row in 0..data.len() {
            let x: Vec<f64> = data.features.row(row).iter().copied().collect();
            worst_sum =
                worst_sum.max((predict_proba(&model, &x).unwrap().iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(
        worst_gap <= 1e-4 && beats_or_matches && worst_sum <= 1e-12 && solver_time < Duration::from_secs(30),
        format!(
            "10 datasets, max relative objective gap to grid oracle {worst_gap:.2e}, max |sum p - 1| {worst_sum:.2e}, solver {}",
            secs(solver_time)
        ),
    )
}

fn fd_objective(
    p: &HierNetParams,
    batch: &[HierSample],
    mu: (f64, f64, f64),
    domain_only: bool,
) -> f64 {
    batch
        .iter()
        .map(|s| {
            let out = forward(&s.x, p).unwrap();
            if domain_only {
                domain_loss(s, &out).unwrap()
            } else {
                total_loss(s, &out, mu.0, mu.1, mu.2).unwrap()
            }
        })
        .sum::<f64>()
        / batch.len() as f64
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut r = rng(5);
    let mut worst_fd = 0.0f64;
    let mut checked = 0usize;
    let mut reversal_exact = true;
    let mut reversal_rel = 0.0f64;
    for i in 0..20 {
        let tap = if i % 2 == 0 {
            DomainTap::SpeciesFeatures
        } else {
            DomainTap::SpeciesTrunk
        };
        let arch = random_arch(&mut r, Activation::Tanh, tap);
        let p = random_params(&mut r, &arch);
        let batch = random_batch(&mut r, &arch, 5);
        let mu = (
            r.gen_range(0.1..1.5),
            r.gen_range(0.1..1.5),
            r.gen_range(0.05..1.0),
        );
        let g = backward(&p, &batch, GradientSpec::training(mu.0, mu.1, mu.2))
            .unwrap()
            .flatten();
        let flat = p.flatten();
        let shared = p.n_shared_params();
        let h = 1e-5;
        let mut q = p.clone();
        for k in 0..flat.len() {
            let mut x = flat.clone();
            x[k] += h;
            q.assign(&x).unwrap();
            let fp = fd_objective(&q, &batch, mu, k >= shared);
            x[k] -= 2.0 * h;
            q.assign(&x).unwrap();
            let fm = fd_objective(&q, &batch, mu, k >= shared);
            let numeric = (fp - fm) / (2.0 * h);
            worst_fd =
                worst_fd.max((numeric - g[k]).abs() / numeric.abs().max(g[k].abs()).max(1e-6));
            checked += 1;
        }

        let only_domain = |s: f64| GradientSpec {
            mu_f: 0.0,
            mu_g: 0.0,
            mu_s: 0.0,
            grl_scale: s,
        };
        let plain = backward(&p, &batch, only_domain(1.0)).unwrap().flatten();
        let quarter = backward(&p, &batch, only_domain(-0.25)).unwrap().flatten();
        reversal_exact &= (0..shared).all(|k| quarter[k] == -0.25 * plain[k]);
        let mu_d = mu.2;
        let reversed = backward(&p, &batch, only_domain(-mu_d)).unwrap().flatten();
        let scale = plain[..shared].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..shared {
            reversal_rel = reversal_rel.max((reversed[k] + mu_d * plain[k]).abs() / scale);
        }
    }
    let elapsed = start.elapsed();
    check(
        worst_fd < 1e-4 && reversal_exact && reversal_rel <= 1e-13 && elapsed < Duration::from_secs(60),
        format!(
            "20 nets, {checked} partials, max relative error {worst_fd:.2e}; reversal bitwise at mu_d=0.25: {reversal_exact}, max relative deviation {reversal_rel:.1e}; {}",
            secs(elapsed)
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let tap = if i % 2 == 0 {
            DomainTap::SpeciesFeatures
        } else {
            DomainTap::SpeciesTrunk
        };
        let arch = random_arch(&mut r, Activation::Relu, tap);
        let p = random_params(&mut r, &arch);
        let batch = random_batch(&mut r, &arch, 8);
        let (mu_f, mu_g, mu_d) = (
            r.gen_range(0.0..2.0),
            r.gen_range(0.0..2.0),
            r.gen_range(0.0..2.0),
        );
        for s in &batch {
            let out = forward(&s.x, &p).unwrap();
            let ld = softmax_ce(out.domain_logits.as_slice(), s.domain.index());
            let lh = s.labels.map_or(0.0, |l| {
                mu_f * softmax_ce(out.family_logits.as_slice(), l.family)
                    + mu_g * softmax_ce(out.genus_logits.as_slice(), l.genus)
                    + softmax_ce(out.species_logits.as_slice(), l.species)
            });
            if s.labels.is_some() {
                worst = worst.max(
                    (hierarchical_loss(s, &out, mu_f, mu_g).unwrap() - lh).abs() / lh.max(1.0),
                );
            }
            worst = worst.max((domain_loss(s, &out).unwrap() - ld).abs() / ld.max(1.0));
            let total = total_loss(s, &out, mu_f, mu_g, mu_d).unwrap();
            worst = worst.max((total - (lh - mu_d * ld)).abs() / (lh + ld).max(1.0));
        }
    }
    check(
        worst <= 1e-13,
        format!("20 batches, max relative recomposition error {worst:.2e}"),
    )
}

fn synthetic_accuracy(settings: &Settings, seed: u64) -> (f64, f64) {
    let d = generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = ExperimentData {
        features: d.features,
        semantic: d.semantic,
        hierarchy: Some(d.hierarchy),
    };
    let splits = make_folds(&data.classes(), 4, 0).unwrap();
    let chance = splits
        .iter()
        .map(|s| 1.0 / s.unseen.len() as f64)
        .sum::<f64>()
        / splits.len() as f64;
    let report = EvalReport::from_folds(run_folds(&data, &splits, settings).unwrap(), None);
    (report.mean_accuracy.unwrap(), chance)
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut worst = f64::INFINITY;
    let mut worst_ratio = f64::INFINITY;
    let mut accs = Vec::new();
    for seed in 0..5 {
        let (acc, chance) = synthetic_accuracy(&Settings::default(), seed);
        worst = worst.min(acc);
        worst_ratio = worst_ratio.min(acc / chance);
        accs.push(format!("{acc:.3}"));
    }
    let plain_time = start.elapsed() / 5;
    let start = Instant::now();
    let with_net = Settings {
        net: Some(NetOptions::default()),
        ..Settings::default()
    };
    let (net_acc, chance) = synthetic_accuracy(&with_net, 0);
    let net_time = start.elapsed();
    check(
        worst_ratio >= 2.0 && net_acc >= 2.0 * chance && plain_time < Duration::from_secs(120) && net_time < Duration::from_secs(120),
        format!(
            "12 species / 6 genera / 3 families, 4 folds, 5 datasets: mean accuracy [{}] ({} per run), with network features {net_acc:.3} ({}); chance {chance:.3}, target >= {:.3}, worst {worst:.3}",
            accs.join(", "),
            secs(plain_time),
            secs(net_time),
            2.0 * chance
        ),
    )
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let zsl = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_zsl"))
            .args(args)
            .output()
            .unwrap()
    };
    let data = d.join("data");
    let out = zsl(&["synth", "--out", data.to_str().unwrap()]);
    if !out.status.success() {
        return check(
            false,
            format!("synth failed: {}", String::from_utf8_lossy(&out.stderr)),
        );
    }
    let args = [
        "run",
        "--features",
        data.join("features.csv").to_str().unwrap(),
        "--semantic",
        data.join("semantic.csv").to_str().unwrap(),
        "--hierarchy",
        data.join("hierarchy.csv").to_str().unwrap(),
        "--net",
        "--epochs",
        "10",
        "--seed",
        "3",
        "--out",
        d.join("run").to_str().unwrap(),
    ]
    .map(str::to_string);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let mut reports = Vec::new();
    for _ in 0..2 {
        let out = zsl(&args);
        if !out.status.success() {
            return check(
                false,
                format!("run failed: {}", String::from_utf8_lossy(&out.stderr)),
            );
        }
        reports.push(std::fs::read(d.join("run/report.json")).unwrap());
    }
    check(
        reports[0] == reports[1],
        format!(
            "two `run` invocations with network training, report.json {} bytes, identical: {}",
            reports[0].len(),
            reports[0] == reports[1]
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("propagation oracle equivalence", criterion_1),
        ("stochasticity suite", criterion_2),
        ("alpha = 0 identity", criterion_3),
        ("seeder oracle", criterion_4),
        ("gradient checks", criterion_5),
        ("loss decomposition", criterion_6),
        ("synthetic end-to-end", criterion_7),
        ("determinism", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = run();
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} - {name}: {}",
            i + 1,
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}

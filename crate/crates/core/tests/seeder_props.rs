mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;

use common::*;
use zsl_core::seeder::{
    class_gradient_norm, class_objective, predict_proba, seed_matrix, train_logreg, FeatureDataset,
};

fn classes(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("k{i}")).collect()
}

#[test]
fn matches_grid_search_oracle() {
    for (seed, c) in [(1u64, 0.1), (2, 1.0), (3, 10.0)] {
        let data = toy_dataset(&mut rng(seed), 2, 24, 2);
        let model = train_logreg(&data, &classes(2), c).unwrap();
        for (k, class) in classes(2).iter().enumerate() {
            let solved = logistic_objective(&data, class, c, &model.weights[k]);
            let oracle = grid_search_minimum(&data, class, c);
            assert!(solved <= oracle * (1.0 + 1e-4), "{solved} vs grid {oracle}");
            assert!(
                (solved - oracle).abs() <= 1e-4 * oracle,
                "{solved} vs grid {oracle}"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn objective_is_convex(seed in any::<u64>(), t in 0.0f64..1.0, c in 0.01f64..10.0) {
        let mut r = rng(seed);
        let data = toy_dataset(&mut r, 2, 20, 3);
        let a: Vec<f64> = (0..3).map(|_| 3.0 * normal(&mut r)).collect();
        let b: Vec<f64> = (0..3).map(|_| 3.0 * normal(&mut r)).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let f = |w: &[f64]| class_objective(&data, "k0", c, w);
        prop_assert!(f(&mid) <= t * f(&a) + (1.0 - t) * f(&b) + 1e-9);
        prop_assert!((f(&a) - logistic_objective(&data, "k0", c, &a)).abs() <= 1e-9 * f(&a).max(1.0));
    }

    #[test]
    fn solution_is_stationary_and_probabilities_normalize(seed in any::<u64>(), c in 0.01f64..10.0, k in 2usize..=4) {
        let mut r = rng(seed);
        let data = toy_dataset(&mut r, 3, 30, k);
        let model = train_logreg(&data, &classes(k), c).unwrap();
        for (i, class) in classes(k).iter().enumerate() {
            prop_assert!(class_gradient_norm(&data, class, c, &model.weights[i]) <= 1e-6);
        }
        for i in 0..data.len() {
            let x: Vec<f64> = data.features.row(i).iter().copied().collect();
            let p = predict_proba(&model, &x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn row_order_does_not_matter(seed in any::<u64>()) {
        let mut r = rng(seed);
        let data = toy_dataset(&mut r, 2, 18, 3);
        let rev: Vec<usize> = (0..data.len()).rev().collect();
        let a = train_logreg(&data, &classes(3), 1.0).unwrap();
        let b = train_logreg(&data.select(&rev), &classes(3), 1.0).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            for (x, y) in wa.iter().zip(wb) {
                prop_assert!((x - y).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn seed_rows_put_no_mass_on_unseen(seed in any::<u64>(), q in 1usize..4) {
        let mut r = rng(seed);
        let data = toy_dataset(&mut r, 2, 15, 3);
        let model = train_logreg(&data, &classes(3), 0.5).unwrap();
        let test = FeatureDataset::new(
            vec!["a".into(), "b".into()],
            DMatrix::from_fn(2, 2, |_, _| normal(&mut r)),
            vec![None, None],
        ).unwrap();
        let unseen: Vec<String> = (0..q).map(|i| format!("u{i}")).collect();
        let y = seed_matrix(&test, &model, &unseen).unwrap();
        prop_assert_eq!(y.values.ncols(), 3 + q);
        for row in y.values.row_iter() {
            prop_assert!(row.iter().skip(3).all(|&v| v == 0.0));
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }
}

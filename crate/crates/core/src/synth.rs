//! Synthetic hierarchical Gaussian-cluster data.
//!
//! Family centers are drawn around the origin, genus centers around their
//! family, species prototypes around their genus, and images around their
//! species prototype. Semantic vectors are the prototypes plus noise.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hiernet::Hierarchy;
use crate::io::SemanticVectors;
use crate::seeder::FeatureDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub families: usize,
    pub genera_per_family: usize,
    pub species_per_genus: usize,
    pub dim: usize,
    pub images_per_species: usize,
    pub family_spread: f64,
    pub genus_spread: f64,
    pub species_spread: f64,
    pub image_noise: f64,
    pub semantic_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 12 species in 6 genera in 3 families, 20-D.
    fn default() -> Self {
        SynthConfig {
            families: 3,
            genera_per_family: 2,
            species_per_genus: 2,
            dim: 20,
            images_per_species: 30,
            family_spread: 4.0,
            genus_spread: 2.0,
            species_spread: 1.5,
            image_noise: 1.0,
            semantic_noise: 0.3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub features: FeatureDataset,
    pub semantic: SemanticVectors,
    pub hierarchy: Hierarchy,
}

fn around(rng: &mut ChaCha8Rng, center: &[f64], spread: f64) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let origin = vec![0.0; config.dim];
    let mut rows = Vec::new();
    let mut prototypes = Vec::new();
    for f in 0..config.families {
        let fc = around(&mut rng, &origin, config.family_spread);
        for g in 0..config.genera_per_family {
            let gc = around(&mut rng, &fc, config.genus_spread);
            for s in 0..config.species_per_genus {
                let species = format!("f{f}g{g}s{s}");
                rows.push((species.clone(), format!("f{f}g{g}"), format!("f{f}")));
                prototypes.push((species, around(&mut rng, &gc, config.species_spread)));
            }
        }
    }

    let mut vectors = HashMap::new();
    let mut order = Vec::new();
    for (id, proto) in &prototypes {
        vectors.insert(id.clone(), around(&mut rng, proto, config.semantic_noise));
        order.push(id.clone());
    }

    let n = prototypes.len() * config.images_per_species;
    let mut values = Vec::with_capacity(n * config.dim);
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (id, proto) in &prototypes {
        for k in 0..config.images_per_species {
            values.extend(around(&mut rng, proto, config.image_noise));
            ids.push(format!("{id}_{k:03}"));
            labels.push(Some(id.clone()));
        }
    }
    let features =
        FeatureDataset::new(ids, DMatrix::from_row_slice(n, config.dim, &values), labels)?;
    Ok(SynthData {
        features,
        semantic: SemanticVectors { order, vectors },
        hierarchy: Hierarchy::new(rows)?,
    })
}

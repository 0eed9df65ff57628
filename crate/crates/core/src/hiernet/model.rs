//! Class hierarchy and a trained network bundled with its label maps.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    extract_features, train_epochs, Architecture, Domain, EpochStats, HierLabels, HierNetParams,
    HierSample, TrainConfig,
};
use crate::error::{Error, Result};
use crate::seeder::FeatureDataset;
use crate::semantic::ClassId;

/// Species to genus to family map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hierarchy {
    species: BTreeMap<String, (String, String)>,
    order: Vec<String>,
}

impl Hierarchy {
    /// Rows of `(species, genus, family)`. A genus may belong to one family
    /// only.
    pub fn new(rows: Vec<(String, String, String)>) -> Result<Self> {
        let mut species = BTreeMap::new();
        let mut genus_family: BTreeMap<String, String> = BTreeMap::new();
        let mut order = Vec::new();
        for (s, g, f) in rows {
            if let Some(prev) = genus_family.get(&g) {
                if *prev != f {
                    return Err(Error::invalid(format!(
                        "genus `{g}` listed under families `{prev}` and `{f}`"
                    )));
                }
            }
            genus_family.insert(g.clone(), f.clone());
            if species.insert(s.clone(), (g, f)).is_some() {
                return Err(Error::DuplicateClass(s));
            }
            order.push(s);
        }
        Ok(Hierarchy { species, order })
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.order.iter().map(|s| {
            let (g, f) = &self.species[s];
            (s.as_str(), g.as_str(), f.as_str())
        })
    }

    pub fn genus_of(&self, species: &str) -> Option<&str> {
        self.species.get(species).map(|(g, _)| g.as_str())
    }

    pub fn family_of(&self, species: &str) -> Option<&str> {
        self.species.get(species).map(|(_, f)| f.as_str())
    }

    /// Sorted genus ids over the given species.
    pub fn genera_of(&self, species: &[ClassId]) -> Result<Vec<String>> {
        let mut out = BTreeSet::new();
        for s in species {
            out.insert(
                self.genus_of(s)
                    .ok_or_else(|| Error::UnknownClass(s.clone()))?
                    .to_string(),
            );
        }
        Ok(out.into_iter().collect())
    }

    /// Sorted family ids over the given species.
    pub fn families_of(&self, species: &[ClassId]) -> Result<Vec<String>> {
        let mut out = BTreeSet::new();
        for s in species {
            out.insert(
                self.family_of(s)
                    .ok_or_else(|| Error::UnknownClass(s.clone()))?
                    .to_string(),
            );
        }
        Ok(out.into_iter().collect())
    }
}

/// Network options used by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetOptions {
    pub train: TrainConfig,
    pub epochs: usize,
    pub trunk_widths: Vec<usize>,
    pub head_hidden: [usize; 3],
    pub domain_hidden: [usize; 2],
}

impl Default for NetOptions {
    fn default() -> Self {
        let arch = Architecture::desk_default(1, 1, 1, 1);
        NetOptions {
            train: TrainConfig::default(),
            epochs: 60,
            trunk_widths: arch.trunk_widths,
            head_hidden: arch.head_hidden,
            domain_hidden: arch.domain_hidden,
        }
    }
}

/// Trained parameters plus the label maps and input standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedNet {
    pub species: Vec<ClassId>,
    pub genera: Vec<String>,
    pub families: Vec<String>,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub params: HierNetParams,
    pub history: Vec<EpochStats>,
}

fn column_stats(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
    let scale = x
        .column_iter()
        .zip(&mean)
        .map(|(c, m)| {
            let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

impl TrainedNet {
    /// Trains on the labeled `source` rows (labels from `species`) with the
    /// unlabeled `target` rows as the second domain.
    pub fn train(
        source: &FeatureDataset,
        target: &FeatureDataset,
        hierarchy: &Hierarchy,
        species: &[ClassId],
        options: &NetOptions,
    ) -> Result<Self> {
        if source.dim() != target.dim() && !target.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: source.dim(),
                got: target.dim(),
            });
        }
        let genera = hierarchy.genera_of(species)?;
        let families = hierarchy.families_of(species)?;
        let index = |list: &[String], id: &str| list.iter().position(|x| x == id);
        let (input_mean, input_scale) = column_stats(&source.features);

        let standardize = |row: nalgebra::RowDVector<f64>| -> Vec<f64> {
            row.iter()
                .zip(&input_mean)
                .zip(&input_scale)
                .map(|((x, m), s)| (x - m) / s)
                .collect()
        };
        let mut samples = Vec::with_capacity(source.len() + target.len());
        for i in 0..source.len() {
            let label = source.labels[i].as_deref().ok_or_else(|| {
                Error::invalid(format!("source row `{}` has no label", source.image_ids[i]))
            })?;
            let s = index(species, label).ok_or_else(|| Error::UnknownClass(label.to_string()))?;
            let g = index(&genera, hierarchy.genus_of(label).unwrap()).unwrap();
            let f = index(&families, hierarchy.family_of(label).unwrap()).unwrap();
            samples.push(HierSample {
                x: standardize(source.features.row(i).into_owned()),
                labels: Some(HierLabels {
                    family: f,
                    genus: g,
                    species: s,
                }),
                domain: Domain::Source,
            });
        }
        for i in 0..target.len() {
            samples.push(HierSample {
                x: standardize(target.features.row(i).into_owned()),
                labels: None,
                domain: Domain::Target,
            });
        }

        let mut arch =
            Architecture::desk_default(source.dim(), families.len(), genera.len(), species.len());
        arch.trunk_widths = options.trunk_widths.clone();
        arch.taps = [
            options.trunk_widths.len().saturating_sub(3),
            options.trunk_widths.len().saturating_sub(2),
            options.trunk_widths.len().saturating_sub(1),
        ];
        arch.head_hidden = options.head_hidden;
        arch.domain_hidden = options.domain_hidden;
        let mut params = HierNetParams::init(&arch, options.train.seed)?;
        let history = train_epochs(&mut params, &samples, &options.train, options.epochs)?;
        Ok(TrainedNet {
            species: species.to_vec(),
            genera,
            families,
            input_mean,
            input_scale,
            params,
            history,
        })
    }

    /// Concatenated head features for every row; labels and ids are kept.
    pub fn extract(&self, data: &FeatureDataset) -> Result<FeatureDataset> {
        if data.dim() != self.input_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.input_mean.len(),
                got: data.dim(),
            });
        }
        let width: usize = self.params.penultimate_widths().iter().sum();
        let mut out = DMatrix::zeros(data.len(), width);
        for i in 0..data.len() {
            let x: Vec<f64> = data
                .features
                .row(i)
                .iter()
                .zip(&self.input_mean)
                .zip(&self.input_scale)
                .map(|((x, m), s)| (x - m) / s)
                .collect();
            let f = extract_features(&x, &self.params)?;
            out.row_mut(i).copy_from_slice(&f);
        }
        FeatureDataset::new(data.image_ids.clone(), out, data.labels.clone())
    }
}

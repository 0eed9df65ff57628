//! Fully-connected stand-in for the hierarchical feature learner.
//!
//! A shared trunk feeds three classifier heads (family, genus, species)
//! tapped at increasing depth, plus a domain classifier placed behind a
//! gradient-reversal point. Gradients are computed by hand; see
//! [`backward`].

mod backward;
mod forward;
mod model;
mod train;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{backward, GradientSpec, Gradients};
pub use forward::{
    cross_entropy, domain_loss, extract_features, forward, hierarchical_loss, total_loss,
    ForwardOutput,
};
pub use model::{Hierarchy, NetOptions, TrainedNet};
pub use train::{evaluate, train_epochs, train_step, EpochStats, TrainConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    pub(crate) fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Where the domain classifier reads its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DomainTap {
    /// Penultimate activation of the species head.
    #[default]
    SpeciesFeatures,
    /// Trunk activation at the species tap.
    SpeciesTrunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Layer {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Layer widths of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub trunk_widths: Vec<usize>,
    /// Trunk layer indices feeding the family, genus and species heads.
    pub taps: [usize; 3],
    /// Hidden width of the family, genus and species heads.
    pub head_hidden: [usize; 3],
    pub n_family: usize,
    pub n_genus: usize,
    pub n_species: usize,
    pub domain_hidden: [usize; 2],
    pub activation: Activation,
    pub domain_tap: DomainTap,
}

impl Architecture {
    /// Three trunk layers with one head per layer.
    pub fn desk_default(
        input_dim: usize,
        n_family: usize,
        n_genus: usize,
        n_species: usize,
    ) -> Self {
        Architecture {
            input_dim,
            trunk_widths: vec![32, 32, 32],
            taps: [0, 1, 2],
            head_hidden: [8, 12, 16],
            n_family,
            n_genus,
            n_species,
            domain_hidden: [16, 16],
            activation: Activation::Relu,
            domain_tap: DomainTap::SpeciesFeatures,
        }
    }

    fn validate(&self) -> Result<()> {
        let depth = self.trunk_widths.len();
        let [f, g, s] = self.taps;
        if !(f < g && g < s && s < depth) {
            return Err(Error::invalid(format!(
                "taps {:?} must be strictly increasing and below trunk depth {depth}",
                self.taps
            )));
        }
        let widths = [self.input_dim, self.n_family, self.n_genus, self.n_species];
        if widths.contains(&0)
            || self.trunk_widths.contains(&0)
            || self.head_hidden.contains(&0)
            || self.domain_hidden.contains(&0)
        {
            return Err(Error::invalid("all layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierNetParams {
    pub trunk: Vec<Layer>,
    pub family_head: Vec<Layer>,
    pub genus_head: Vec<Layer>,
    pub species_head: Vec<Layer>,
    pub domain_head: Vec<Layer>,
    pub taps: [usize; 3],
    pub activation: Activation,
    pub domain_tap: DomainTap,
}

impl HierNetParams {
    /// All-zero parameters with the given shapes.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let chain = |input: usize, widths: &[usize]| {
            let mut prev = input;
            widths
                .iter()
                .map(|&w| {
                    let l = Layer::zeros(prev, w);
                    prev = w;
                    l
                })
                .collect::<Vec<_>>()
        };
        let trunk = chain(arch.input_dim, &arch.trunk_widths);
        let tap_width = |t: usize| arch.trunk_widths[t];
        let [hf, hg, hs] = arch.head_hidden;
        let domain_in = match arch.domain_tap {
            DomainTap::SpeciesFeatures => hs,
            DomainTap::SpeciesTrunk => tap_width(arch.taps[2]),
        };
        let [d1, d2] = arch.domain_hidden;
        Ok(HierNetParams {
            trunk,
            family_head: chain(tap_width(arch.taps[0]), &[hf, arch.n_family]),
            genus_head: chain(tap_width(arch.taps[1]), &[hg, arch.n_genus]),
            species_head: chain(tap_width(arch.taps[2]), &[hs, arch.n_species]),
            domain_head: chain(domain_in, &[d1, d2, 2]),
            taps: arch.taps,
            activation: arch.activation,
            domain_tap: arch.domain_tap,
        })
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in params.layers_mut() {
            let bound = 1.0 / (layer.input_dim() as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        self.trunk[0].input_dim()
    }

    /// Widths of the family, genus and species penultimate activations.
    pub fn penultimate_widths(&self) -> [usize; 3] {
        let w = |head: &[Layer]| head.last().map_or(0, Layer::input_dim);
        [
            w(&self.family_head),
            w(&self.genus_head),
            w(&self.species_head),
        ]
    }

    pub fn head_sizes(&self) -> [usize; 3] {
        let w = |head: &[Layer]| head.last().map_or(0, Layer::output_dim);
        [
            w(&self.family_head),
            w(&self.genus_head),
            w(&self.species_head),
        ]
    }

    /// Layers in flattening order: trunk, family, genus, species, domain.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk
            .iter()
            .chain(&self.family_head)
            .chain(&self.genus_head)
            .chain(&self.species_head)
            .chain(&self.domain_head)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk
            .iter_mut()
            .chain(&mut self.family_head)
            .chain(&mut self.genus_head)
            .chain(&mut self.species_head)
            .chain(&mut self.domain_head)
    }

    pub fn n_params(&self) -> usize {
        self.layers().map(Layer::n_params).sum()
    }

    /// Parameters ahead of the domain head in flattening order.
    pub fn n_shared_params(&self) -> usize {
        self.n_params() - self.domain_head.iter().map(Layer::n_params).sum::<usize>()
    }

    /// Each layer's weight (column-major) followed by its bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in self.layers() {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter();
        for layer in self.layers_mut() {
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Domain flag of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HierLabels {
    pub family: usize,
    pub genus: usize,
    pub species: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierSample {
    pub x: Vec<f64>,
    pub labels: Option<HierLabels>,
    pub domain: Domain,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    /// row-major
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    activation: Activation,
    taps: [usize; 3],
    domain_tap: DomainTap,
    trunk: Vec<LayerDoc>,
    family_head: Vec<LayerDoc>,
    genus_head: Vec<LayerDoc>,
    species_head: Vec<LayerDoc>,
    domain_head: Vec<LayerDoc>,
}

fn to_docs(layers: &[Layer]) -> Vec<LayerDoc> {
    layers
        .iter()
        .map(|l| LayerDoc {
            rows: l.weight.nrows(),
            cols: l.weight.ncols(),
            weight: l.weight.transpose().iter().copied().collect(),
            bias: l.bias.iter().copied().collect(),
        })
        .collect()
}

fn from_docs(docs: Vec<LayerDoc>) -> std::result::Result<Vec<Layer>, String> {
    let mut prev: Option<usize> = None;
    docs.into_iter()
        .map(|d| {
            if d.weight.len() != d.rows * d.cols || d.bias.len() != d.rows {
                return Err(format!(
                    "layer {}x{} has inconsistent value counts",
                    d.rows, d.cols
                ));
            }
            if let Some(p) = prev {
                if p != d.cols {
                    return Err(format!(
                        "layer input {} does not match previous output {p}",
                        d.cols
                    ));
                }
            }
            prev = Some(d.rows);
            Ok(Layer {
                weight: DMatrix::from_row_slice(d.rows, d.cols, &d.weight),
                bias: DVector::from_vec(d.bias),
            })
        })
        .collect()
}

impl Serialize for HierNetParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsDoc {
            activation: self.activation,
            taps: self.taps,
            domain_tap: self.domain_tap,
            trunk: to_docs(&self.trunk),
            family_head: to_docs(&self.family_head),
            genus_head: to_docs(&self.genus_head),
            species_head: to_docs(&self.species_head),
            domain_head: to_docs(&self.domain_head),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for HierNetParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = ParamsDoc::deserialize(d)?;
        let params = HierNetParams {
            trunk: from_docs(doc.trunk).map_err(D::Error::custom)?,
            family_head: from_docs(doc.family_head).map_err(D::Error::custom)?,
            genus_head: from_docs(doc.genus_head).map_err(D::Error::custom)?,
            species_head: from_docs(doc.species_head).map_err(D::Error::custom)?,
            domain_head: from_docs(doc.domain_head).map_err(D::Error::custom)?,
            taps: doc.taps,
            activation: doc.activation,
            domain_tap: doc.domain_tap,
        };
        params
            .check_shapes()
            .map_err(|e| D::Error::custom(e.to_string()))?;
        Ok(params)
    }
}

impl HierNetParams {
    /// Consecutive dimensions compose and every head reads a width its tap
    /// provides.
    pub fn check_shapes(&self) -> Result<()> {
        let depth = self.trunk.len();
        let [f, g, s] = self.taps;
        if depth == 0 || !(f < g && g < s && s < depth) {
            return Err(Error::invalid(format!(
                "bad taps {:?} for depth {depth}",
                self.taps
            )));
        }
        for pair in self.trunk.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::invalid("trunk layers do not compose"));
            }
        }
        let heads = [
            (&self.family_head, f, "family"),
            (&self.genus_head, g, "genus"),
            (&self.species_head, s, "species"),
        ];
        for (head, tap, name) in heads {
            let first = head
                .first()
                .ok_or_else(|| Error::invalid(format!("{name} head is empty")))?;
            if first.input_dim() != self.trunk[tap].output_dim() {
                return Err(Error::invalid(format!("{name} head does not fit its tap")));
            }
        }
        let domain_in = match self.domain_tap {
            DomainTap::SpeciesFeatures => self.penultimate_widths()[2],
            DomainTap::SpeciesTrunk => self.trunk[s].output_dim(),
        };
        match (self.domain_head.first(), self.domain_head.last()) {
            (Some(first), Some(last))
                if first.input_dim() == domain_in && last.output_dim() == 2 =>
            {
                Ok(())
            }
            _ => Err(Error::invalid("domain head must map its tap to two logits")),
        }
    }
}

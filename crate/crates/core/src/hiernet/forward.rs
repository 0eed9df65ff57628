use nalgebra::DVector;

use super::{Activation, DomainTap, HierNetParams, HierSample, Layer};
use crate::error::{Error, Result};

/// Input and pre-activation of one layer.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub input: DVector<f64>,
    pub pre: DVector<f64>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub trunk: Vec<LayerCache>,
    /// family, genus, species
    pub heads: [Vec<LayerCache>; 3],
    pub domain: Vec<LayerCache>,
    pub output: ForwardOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub family_logits: DVector<f64>,
    pub genus_logits: DVector<f64>,
    pub species_logits: DVector<f64>,
    pub domain_logits: DVector<f64>,
    /// Inputs of the final linear layer of the family, genus and species
    /// heads.
    pub penultimates: [DVector<f64>; 3],
}

/// Runs `layers` in order; every layer but the last is followed by the
/// activation. Returns the output and the penultimate activation.
fn run_chain(
    layers: &[Layer],
    input: DVector<f64>,
    act: Activation,
    final_activated: bool,
) -> (Vec<LayerCache>, DVector<f64>, DVector<f64>) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut h = input;
    let mut penultimate = h.clone();
    for (i, layer) in layers.iter().enumerate() {
        let pre = &layer.weight * &h + &layer.bias;
        let last = i + 1 == layers.len();
        if last {
            penultimate = h.clone();
        }
        let out = if !last || final_activated {
            pre.map(|v| act.apply(v))
        } else {
            pre.clone()
        };
        caches.push(LayerCache { input: h, pre });
        h = out;
    }
    (caches, h, penultimate)
}

pub(crate) fn trace(x: &[f64], params: &HierNetParams) -> Result<Trace> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            got: x.len(),
        });
    }
    let act = params.activation;
    let (trunk, _, _) = run_chain(&params.trunk, DVector::from_column_slice(x), act, true);
    // activation after trunk layer t
    let tap_out = |t: usize| -> DVector<f64> {
        let next = trunk.get(t + 1).map(|c| c.input.clone());
        next.unwrap_or_else(|| trunk[t].pre.map(|v| act.apply(v)))
    };
    let [tf, tg, ts] = params.taps;
    let (fam, family_logits, fam_pen) = run_chain(&params.family_head, tap_out(tf), act, false);
    let (gen, genus_logits, gen_pen) = run_chain(&params.genus_head, tap_out(tg), act, false);
    let (spe, species_logits, spe_pen) = run_chain(&params.species_head, tap_out(ts), act, false);
    let domain_in = match params.domain_tap {
        DomainTap::SpeciesFeatures => spe_pen.clone(),
        DomainTap::SpeciesTrunk => tap_out(ts),
    };
    let (domain, domain_logits, _) = run_chain(&params.domain_head, domain_in, act, false);
    Ok(Trace {
        trunk,
        heads: [fam, gen, spe],
        domain,
        output: ForwardOutput {
            family_logits,
            genus_logits,
            species_logits,
            domain_logits,
            penultimates: [fam_pen, gen_pen, spe_pen],
        },
    })
}

pub fn forward(x: &[f64], params: &HierNetParams) -> Result<ForwardOutput> {
    trace(x, params).map(|t| t.output)
}

/// Penultimate activations concatenated as species, genus, family.
pub fn extract_features(x: &[f64], params: &HierNetParams) -> Result<Vec<f64>> {
    let out = forward(x, params)?;
    let [fam, gen, spe] = &out.penultimates;
    Ok(spe
        .iter()
        .chain(gen.iter())
        .chain(fam.iter())
        .copied()
        .collect())
}

/// Softmax cross-entropy `logsumexp(z) - z[label]`.
pub fn cross_entropy(logits: &DVector<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let top = logits.max();
    let lse = top + logits.iter().map(|z| (z - top).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `softmax(z) - onehot(label)`, the logit gradient of [`cross_entropy`].
pub(crate) fn cross_entropy_grad(logits: &DVector<f64>, label: usize) -> DVector<f64> {
    let top = logits.max();
    let mut g = logits.map(|z| (z - top).exp());
    let s = g.sum();
    g /= s;
    g[label] -= 1.0;
    g
}

/// `mu_f L_f + mu_g L_g + L_s`.
pub fn hierarchical_loss(
    sample: &HierSample,
    out: &ForwardOutput,
    mu_f: f64,
    mu_g: f64,
) -> Result<f64> {
    let labels = sample.labels.ok_or_else(|| {
        Error::invalid("hierarchical loss needs family, genus and species labels")
    })?;
    Ok(mu_f * cross_entropy(&out.family_logits, labels.family)?
        + mu_g * cross_entropy(&out.genus_logits, labels.genus)?
        + cross_entropy(&out.species_logits, labels.species)?)
}

/// Two-way cross-entropy of the domain logits.
pub fn domain_loss(sample: &HierSample, out: &ForwardOutput) -> Result<f64> {
    cross_entropy(&out.domain_logits, sample.domain.index())
}

/// `L_h - mu_d L_d`; unlabeled samples contribute only the domain term.
pub fn total_loss(
    sample: &HierSample,
    out: &ForwardOutput,
    mu_f: f64,
    mu_g: f64,
    mu_d: f64,
) -> Result<f64> {
    let hier = match sample.labels {
        Some(_) => hierarchical_loss(sample, out, mu_f, mu_g)?,
        None => 0.0,
    };
    Ok(hier - mu_d * domain_loss(sample, out)?)
}

//! Manual backpropagation.
//!
//! The domain head sits behind a gradient-reversal point: the forward pass
//! is the identity there, while the gradient handed back to the shared
//! features is the domain-loss gradient multiplied by `grl_scale`
//! (`-mu_d` in training). The domain head's own parameters always receive
//! the plain gradient of the domain loss.

use nalgebra::DVector;

use super::forward::{cross_entropy, cross_entropy_grad, trace, LayerCache};
use super::{Activation, DomainTap, HierNetParams, HierSample, Layer};
use crate::error::{Error, Result};

/// Weights of the loss terms seen by the shared parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSpec {
    pub mu_f: f64,
    pub mu_g: f64,
    pub mu_s: f64,
    /// Multiplier applied to the domain gradient at the reversal point.
    pub grl_scale: f64,
}

impl GradientSpec {
    /// Shared parameters see `L_h - mu_d L_d`.
    pub fn training(mu_f: f64, mu_g: f64, mu_d: f64) -> Self {
        GradientSpec {
            mu_f,
            mu_g,
            mu_s: 1.0,
            grl_scale: -mu_d,
        }
    }
}

/// Batch-mean gradients, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: HierNetParams,
    /// Batch mean of `mu_f L_f + mu_g L_g + mu_s L_s` (zero for unlabeled rows).
    pub hierarchical_loss: f64,
    /// Batch mean of the domain loss.
    pub domain_loss: f64,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.grads.flatten()
    }
}

fn zeroed(params: &HierNetParams) -> HierNetParams {
    let mut g = params.clone();
    for layer in g.layers_mut() {
        layer.weight.fill(0.0);
        layer.bias.fill(0.0);
    }
    g
}

/// Accumulates one layer's parameter gradient and returns the gradient at
/// its input.
fn back_layer(
    layer: &Layer,
    cache: &LayerCache,
    d_out: DVector<f64>,
    activated: bool,
    act: Activation,
    grad: &mut Layer,
) -> DVector<f64> {
    let d_pre = if activated {
        d_out.zip_map(&cache.pre, |g, z| g * act.derivative(z))
    } else {
        d_out
    };
    grad.weight.ger(1.0, &d_pre, &cache.input, 1.0);
    grad.bias += &d_pre;
    layer.weight.tr_mul(&d_pre)
}

/// Head backward: the last layer is linear, earlier ones activated.
/// `at_penultimate` is added to the gradient reaching the penultimate
/// activation. Returns the gradient at the head input.
fn back_head(
    layers: &[Layer],
    caches: &[LayerCache],
    d_logits: DVector<f64>,
    at_penultimate: Option<&DVector<f64>>,
    act: Activation,
    grads: &mut [Layer],
) -> DVector<f64> {
    let mut d = d_logits;
    for i in (0..layers.len()).rev() {
        let last = i + 1 == layers.len();
        d = back_layer(&layers[i], &caches[i], d, !last, act, &mut grads[i]);
        if last {
            if let Some(extra) = at_penultimate {
                d += extra;
            }
        }
    }
    d
}

/// Mean gradients over `batch`. Shared parameters get the gradient of
/// `mu_f L_f + mu_g L_g + mu_s L_s` plus `grl_scale` times the domain-loss
/// gradient routed through the reversal point; domain-head parameters get
/// the gradient of `L_d`.
pub fn backward(
    params: &HierNetParams,
    batch: &[HierSample],
    spec: GradientSpec,
) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let act = params.activation;
    let scale = 1.0 / batch.len() as f64;
    let mut g = zeroed(params);
    let mut hier_sum = 0.0;
    let mut domain_sum = 0.0;
    let depth = params.trunk.len();

    for sample in batch {
        let t = trace(&sample.x, params)?;
        let out = &t.output;
        let mut d_tap: Vec<DVector<f64>> = params
            .trunk
            .iter()
            .map(|l| DVector::zeros(l.output_dim()))
            .collect();

        // domain classifier; its own parameters descend L_d
        let y_d = sample.domain.index();
        domain_sum += cross_entropy(&out.domain_logits, y_d)?;
        let d_dom = cross_entropy_grad(&out.domain_logits, y_d) * scale;
        let d_dom_in = back_head(
            &params.domain_head,
            &t.domain,
            d_dom,
            None,
            act,
            &mut g.domain_head,
        );
        let reversed = d_dom_in * spec.grl_scale;

        let mut species_extra = None;
        match params.domain_tap {
            DomainTap::SpeciesFeatures => species_extra = Some(reversed),
            DomainTap::SpeciesTrunk => d_tap[params.taps[2]] += reversed,
        }

        let heads_grads = [&mut g.family_head, &mut g.genus_head, &mut g.species_head];
        let heads = [
            &params.family_head,
            &params.genus_head,
            &params.species_head,
        ];
        let labels = sample.labels;
        if let Some(l) = labels {
            hier_sum += spec.mu_f * cross_entropy(&out.family_logits, l.family)?
                + spec.mu_g * cross_entropy(&out.genus_logits, l.genus)?
                + spec.mu_s * cross_entropy(&out.species_logits, l.species)?;
        }
        let logits = [&out.family_logits, &out.genus_logits, &out.species_logits];
        let weights = [spec.mu_f, spec.mu_g, spec.mu_s];
        for (h, grads) in heads_grads.into_iter().enumerate() {
            let d_logits = match labels {
                Some(l) => {
                    let y = [l.family, l.genus, l.species][h];
                    cross_entropy_grad(logits[h], y) * (weights[h] * scale)
                }
                None => DVector::zeros(logits[h].len()),
            };
            let extra = if h == 2 { species_extra.as_ref() } else { None };
            let d_in = back_head(heads[h], &t.heads[h], d_logits, extra, act, grads);
            d_tap[params.taps[h]] += d_in;
        }

        // trunk, top-down
        let mut d = DVector::zeros(params.trunk[depth - 1].output_dim());
        for l in (0..depth).rev() {
            d += &d_tap[l];
            d = back_layer(&params.trunk[l], &t.trunk[l], d, true, act, &mut g.trunk[l]);
        }
    }

    Ok(Gradients {
        grads: g,
        hierarchical_loss: hier_sum * scale,
        domain_loss: domain_sum * scale,
    })
}

#[cfg(test)]
mod tests {
    use super::super::forward::{domain_loss, forward, hierarchical_loss};
    use super::super::{Architecture, Domain, HierLabels};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch(act: Activation, tap: DomainTap) -> Architecture {
        Architecture {
            input_dim: 3,
            trunk_widths: vec![4, 3, 4],
            taps: [0, 1, 2],
            head_hidden: [2, 3, 3],
            n_family: 2,
            n_genus: 3,
            n_species: 4,
            domain_hidden: [3, 2],
            activation: act,
            domain_tap: tap,
        }
    }

    fn batch(rng: &mut ChaCha8Rng) -> Vec<HierSample> {
        (0..4)
            .map(|i| HierSample {
                x: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                labels: (i % 2 == 0).then_some(HierLabels {
                    family: i % 2,
                    genus: i % 3,
                    species: i % 4,
                }),
                domain: if i % 2 == 0 {
                    Domain::Source
                } else {
                    Domain::Target
                },
            })
            .collect()
    }

    fn objective(
        p: &HierNetParams,
        b: &[HierSample],
        mu: (f64, f64, f64),
        domain_only: bool,
    ) -> f64 {
        let mut s = 0.0;
        for x in b {
            let out = forward(&x.x, p).unwrap();
            let ld = domain_loss(x, &out).unwrap();
            s += if domain_only {
                ld
            } else {
                let lh = if x.labels.is_some() {
                    hierarchical_loss(x, &out, mu.0, mu.1).unwrap()
                } else {
                    0.0
                };
                lh - mu.2 * ld
            };
        }
        s / b.len() as f64
    }

    #[test]
    fn tanh_gradients_match_finite_differences() {
        for tap in [DomainTap::SpeciesFeatures, DomainTap::SpeciesTrunk] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut p = HierNetParams::init(&arch(Activation::Tanh, tap), 3).unwrap();
            let mut flat = p.flatten();
            for v in flat.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
            p.assign(&flat).unwrap();
            let b = batch(&mut rng);
            let mu = (0.7, 0.4, 0.3);
            let g = backward(&p, &b, GradientSpec::training(mu.0, mu.1, mu.2))
                .unwrap()
                .flatten();
            let shared = p.n_shared_params();
            let h = 1e-5;
            for i in 0..flat.len() {
                let domain_only = i >= shared;
                let mut plus = flat.clone();
                plus[i] += h;
                let mut minus = flat.clone();
                minus[i] -= h;
                let mut q = p.clone();
                q.assign(&plus).unwrap();
                let fp = objective(&q, &b, mu, domain_only);
                q.assign(&minus).unwrap();
                let fm = objective(&q, &b, mu, domain_only);
                let numeric = (fp - fm) / (2.0 * h);
                let err = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-6);
                assert!(err < 1e-4, "param {i}: analytic {} numeric {numeric}", g[i]);
            }
        }
    }

    #[test]
    fn zero_mu_d_leaves_shared_gradient_hierarchical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p =
            HierNetParams::init(&arch(Activation::Relu, DomainTap::SpeciesFeatures), 5).unwrap();
        let b = batch(&mut rng);
        let with = backward(&p, &b, GradientSpec::training(1.0, 1.0, 0.0)).unwrap();
        let n = p.n_shared_params();
        let spec = GradientSpec {
            grl_scale: 0.0,
            ..GradientSpec::training(1.0, 1.0, 0.0)
        };
        let plain = backward(&p, &b, spec).unwrap();
        assert_eq!(with.flatten()[..n], plain.flatten()[..n]);
    }
}

//! Offspring scoring.
//!
//! Generators are scored by `quality + gamma * diversity`, where quality is
//! the soft-weighted mean discriminator output on generated samples and
//! diversity is the soft-weighted negative log gradient norm of each
//! discriminator's cross-entropy loss. Discriminators are scored by the
//! same negative log gradient norm, unweighted.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::nets::{forward_generator, Head, ParamSet};
use crate::objectives::{discriminator_bce, g_term, score, soft_weights, GMutation, SoftWeights};

/// Gradient norms are floored here before taking the log.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GFitness {
    pub quality: f64,
    pub diversity: f64,
    pub combined: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DFitness {
    pub value: f64,
    pub grad_norm: f64,
}

/// What one discriminator reports about one batch of generated points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    /// `mean D(fake)` through the sigmoid head.
    pub mean_score: f64,
    /// Heuristic generator loss `-1/2 mean log D(fake)`.
    pub heuristic_loss: f64,
    /// Norm of the cross-entropy gradient with respect to the
    /// discriminator's parameters.
    pub grad_norm: f64,
}

/// Runs one forward/backward pass of `disc` on `(real, fake)`.
pub fn probe(disc: &ParamSet, real: &Tensor, fake: &Tensor) -> Result<Probe> {
    let mut g = Graph::new();
    let bound = disc.bind(&mut g);
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let bce = discriminator_bce(&mut g, disc.spec(), &bound, r, f)?;
    let mut grads = g.backward(bce)?;
    let mut with_grads = disc.clone();
    with_grads.load_grads(&mut grads, &bound)?;
    let grad_norm = with_grads.grad_l2_norm()?;

    // Scoring the fake batch again on a constant copy keeps the backward
    // pass above limited to the cross-entropy.
    let mut g2 = Graph::new();
    let frozen = disc.bind_frozen(&mut g2);
    let f2 = g2.constant(fake.clone());
    let p = score(&mut g2, disc.spec(), &frozen, f2, Head::Sigmoid)?;
    let m = g2.mean(p)?;
    let mean_score = g2.scalar(m)?;
    let h = g_term(&mut g2, GMutation::Heuristic, disc.spec(), &frozen, f2)?;
    let heuristic_loss = g2.scalar(h)?;
    Ok(Probe {
        mean_score,
        heuristic_loss,
        grad_norm,
    })
}

/// `-log max(norm, NORM_FLOOR)`.
pub fn neg_log_norm(norm: f64) -> f64 {
    -norm.max(NORM_FLOOR).ln()
}

/// `-sum_i w_i log |grad_i|`.
pub fn diversity_from_norms(weights: &SoftWeights, norms: &[f64]) -> f64 {
    let terms: Vec<f64> = norms.iter().map(|&n| neg_log_norm(n)).collect();
    weights.combine(&terms)
}

pub fn fitness_combined(quality: f64, diversity: f64, gamma: f64) -> f64 {
    quality + gamma * diversity
}

fn probes(discs: &[ParamSet], real: &Tensor, fake: &Tensor) -> Result<Vec<Probe>> {
    if discs.is_empty() {
        return Err(Error::Contract(
            "fitness needs at least one discriminator".into(),
        ));
    }
    discs.iter().map(|d| probe(d, real, fake)).collect()
}

/// `sum_i w_i mean D_i(G(z))`.
pub fn fitness_quality(
    gen: &ParamSet,
    discs: &[ParamSet],
    z: &Tensor,
    weights: &SoftWeights,
) -> Result<f64> {
    if discs.len() != weights.weights().len() {
        return Err(Error::Contract(
            "one weight per discriminator required".into(),
        ));
    }
    let fake = forward_generator(gen, z)?;
    let means = discs
        .iter()
        .map(|d| {
            let mut g = Graph::new();
            let b = d.bind_frozen(&mut g);
            let f = g.constant(fake.clone());
            let p = score(&mut g, d.spec(), &b, f, Head::Sigmoid)?;
            let m = g.mean(p)?;
            g.scalar(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(weights.combine(&means))
}

/// `-sum_i w_i log |grad_phi_i BCE(D_i; real, G(z))|`.
pub fn fitness_diversity(
    gen: &ParamSet,
    discs: &[ParamSet],
    real: &Tensor,
    z: &Tensor,
    weights: &SoftWeights,
) -> Result<f64> {
    if discs.len() != weights.weights().len() {
        return Err(Error::Contract(
            "one weight per discriminator required".into(),
        ));
    }
    let fake = forward_generator(gen, z)?;
    let norms: Vec<f64> = probes(discs, real, &fake)?
        .iter()
        .map(|p| p.grad_norm)
        .collect();
    Ok(diversity_from_norms(weights, &norms))
}

/// Full generator score. The soft weights come from the offspring's
/// per-discriminator heuristic losses and are shared by both terms.
pub fn evaluate_generator(
    gen: &ParamSet,
    discs: &[ParamSet],
    real: &Tensor,
    z: &Tensor,
    gamma: f64,
    delta: f64,
) -> Result<(GFitness, SoftWeights)> {
    let fake = forward_generator(gen, z)?;
    let ps = probes(discs, real, &fake)?;
    let losses: Vec<f64> = ps.iter().map(|p| p.heuristic_loss).collect();
    let weights = soft_weights(&losses, delta)?;
    let means: Vec<f64> = ps.iter().map(|p| p.mean_score).collect();
    let norms: Vec<f64> = ps.iter().map(|p| p.grad_norm).collect();
    let quality = weights.combine(&means);
    let diversity = diversity_from_norms(&weights, &norms);
    let fit = GFitness {
        quality,
        diversity,
        combined: fitness_combined(quality, diversity, gamma),
        gamma,
    };
    if !fit.combined.is_finite() {
        return Err(Error::NonFinite {
            what: "generator fitness".into(),
        });
    }
    Ok((fit, weights))
}

/// `-log |grad_phi BCE(D; real, fake)|` for an already generated batch.
pub fn evaluate_discriminator(disc: &ParamSet, real: &Tensor, fake: &Tensor) -> Result<DFitness> {
    let p = probe(disc, real, fake)?;
    let value = neg_log_norm(p.grad_norm);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "discriminator fitness".into(),
        });
    }
    Ok(DFitness {
        value,
        grad_norm: p.grad_norm,
    })
}

/// Discriminator score against samples from the generator parents.
pub fn fitness_discriminator(
    disc: &ParamSet,
    gens: &[ParamSet],
    real: &Tensor,
    z: &Tensor,
) -> Result<f64> {
    let fake = crate::nets::forward_generators(gens, z)?;
    Ok(evaluate_discriminator(disc, real, &fake)?.value)
}

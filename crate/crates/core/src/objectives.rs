//! Adversarial objectives: the three generator mutations, the two
//! discriminator mutations, the softmax ensemble over discriminators, and
//! the interpolation gradient penalty.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{stable_softmax, Graph, Tensor, Var};
use crate::data::RngStream;
use crate::error::{Error, Result};
use crate::nets::{apply_head, forward, input_gradient, Bound, Head, MlpSpec, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GMutation {
    Minimax,
    Heuristic,
    LeastSquares,
}

impl GMutation {
    pub const ALL: [GMutation; 3] = [
        GMutation::Minimax,
        GMutation::Heuristic,
        GMutation::LeastSquares,
    ];

    pub fn head(self) -> Head {
        match self {
            GMutation::LeastSquares => Head::Raw,
            _ => Head::Sigmoid,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GMutation::Minimax => "minimax",
            GMutation::Heuristic => "heuristic",
            GMutation::LeastSquares => "least-squares",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DMutation {
    Minimax,
    LeastSquares,
}

impl DMutation {
    pub const ALL: [DMutation; 2] = [DMutation::Minimax, DMutation::LeastSquares];

    pub fn head(self) -> Head {
        match self {
            DMutation::Minimax => Head::Sigmoid,
            DMutation::LeastSquares => Head::Raw,
        }
    }

    /// Whether the objective returned by [`d_loss`] is maximized.
    pub fn maximizes(self) -> bool {
        self == DMutation::Minimax
    }

    pub fn name(self) -> &'static str {
        match self {
            DMutation::Minimax => "minimax",
            DMutation::LeastSquares => "least-squares",
        }
    }
}

impl fmt::Display for GMutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for DMutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GMutation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        GMutation::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown generator mutation `{s}`"))
    }
}

impl FromStr for DMutation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        DMutation::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown discriminator mutation `{s}`"))
    }
}

/// Softmax weights `w_i = exp(delta l_i) / sum_t exp(delta l_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftWeights {
    weights: Vec<f64>,
    delta: f64,
}

impl SoftWeights {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Equal weights over `n` discriminators.
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
            delta: 0.0,
        }
    }

    /// `sum_i w_i x_i`.
    pub fn combine(&self, xs: &[f64]) -> f64 {
        self.weights.iter().zip(xs).map(|(w, x)| w * x).sum()
    }
}

pub fn soft_weights(losses: &[f64], delta: f64) -> Result<SoftWeights> {
    if losses.is_empty() {
        return Err(Error::Contract(
            "soft weights need at least one loss".into(),
        ));
    }
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::Contract(format!(
            "delta must be finite and >= 0, got {delta}"
        )));
    }
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("soft-weight input loss {bad}"),
        });
    }
    Ok(SoftWeights {
        weights: stable_softmax(losses, delta),
        delta,
    })
}

/// Discriminator `disc` applied to `x`, through `head`.
pub fn score(g: &mut Graph, disc: &MlpSpec, bound: &Bound, x: Var, head: Head) -> Result<Var> {
    let raw = forward(g, disc, bound, x)?;
    apply_head(g, raw, head)
}

fn mean_log(g: &mut Graph, p: Var) -> Result<Var> {
    let l = g.log(p)?;
    g.mean(l)
}

fn mean_log_one_minus(g: &mut Graph, p: Var) -> Result<Var> {
    let q = g.neg(p)?;
    let q = g.add_scalar(q, 1.0)?;
    mean_log(g, q)
}

fn mean_sq_offset(g: &mut Graph, s: Var, target: f64) -> Result<Var> {
    let d = g.add_scalar(s, -target)?;
    let d = g.square(d)?;
    g.mean(d)
}

/// Single-discriminator generator loss for `kind` on generated points
/// `fake`.
pub fn g_term(
    g: &mut Graph,
    kind: GMutation,
    disc: &MlpSpec,
    bound: &Bound,
    fake: Var,
) -> Result<Var> {
    let s = score(g, disc, bound, fake, kind.head())?;
    match kind {
        GMutation::Minimax => {
            let m = mean_log_one_minus(g, s)?;
            g.scalar_mul(m, 0.5)
        }
        GMutation::Heuristic => {
            let m = mean_log(g, s)?;
            g.scalar_mul(m, -0.5)
        }
        GMutation::LeastSquares => mean_sq_offset(g, s, 1.0),
    }
}

/// Soft-weighted generator loss over every discriminator in `discs`.
///
/// Discriminators enter as constants; the weights are differentiable
/// functions of the per-discriminator losses. Returns the total and the
/// per-discriminator terms.
pub fn g_loss(
    g: &mut Graph,
    kind: GMutation,
    fake: Var,
    discs: &[ParamSet],
    delta: f64,
) -> Result<(Var, Vec<Var>)> {
    if discs.is_empty() {
        return Err(Error::Contract(
            "generator loss needs at least one discriminator".into(),
        ));
    }
    if g.shape(fake).first().copied().unwrap_or(0) == 0 {
        return Err(Error::Contract("empty generated batch".into()));
    }
    let mut terms = Vec::with_capacity(discs.len());
    for d in discs {
        let b = d.bind_frozen(g);
        terms.push(g_term(g, kind, d.spec(), &b, fake)?);
    }
    let total = g.soft_mean(&terms, delta)?;
    Ok((total, terms))
}

/// Discriminator objective for `kind`, in its natural sense: the minimax
/// value is to be maximized, the least-squares value minimized.
pub fn d_loss(
    g: &mut Graph,
    kind: DMutation,
    disc: &MlpSpec,
    bound: &Bound,
    real: Var,
    fake: Var,
) -> Result<Var> {
    for v in [real, fake] {
        if g.shape(v).first().copied().unwrap_or(0) == 0 {
            return Err(Error::Contract("empty discriminator batch".into()));
        }
    }
    let sr = score(g, disc, bound, real, kind.head())?;
    let sf = score(g, disc, bound, fake, kind.head())?;
    match kind {
        DMutation::Minimax => {
            let a = mean_log(g, sr)?;
            let b = mean_log_one_minus(g, sf)?;
            g.add(a, b)
        }
        DMutation::LeastSquares => {
            let a = mean_sq_offset(g, sr, 1.0)?;
            let b = mean_sq_offset(g, sf, 0.0)?;
            let s = g.add(a, b)?;
            g.scalar_mul(s, 0.5)
        }
    }
}

/// The quantity gradient descent minimizes for `kind`.
pub fn d_training_loss(
    g: &mut Graph,
    kind: DMutation,
    disc: &MlpSpec,
    bound: &Bound,
    real: Var,
    fake: Var,
) -> Result<Var> {
    let obj = d_loss(g, kind, disc, bound, real, fake)?;
    if kind.maximizes() {
        g.neg(obj)
    } else {
        Ok(obj)
    }
}

/// Binary cross-entropy `-(mean log D(x) + mean log(1 - D(fake)))`.
pub fn discriminator_bce(
    g: &mut Graph,
    disc: &MlpSpec,
    bound: &Bound,
    real: Var,
    fake: Var,
) -> Result<Var> {
    let obj = d_loss(g, DMutation::Minimax, disc, bound, real, fake)?;
    g.neg(obj)
}

/// `lambda * mean[(|grad_x D(x_hat)| - 1)^2]` on per-row interpolates
/// `x_hat = u real + (1 - u) fake`, `u ~ U[0, 1]`, where `D` is the raw
/// discriminator score.
pub fn gradient_penalty(
    g: &mut Graph,
    disc: &MlpSpec,
    bound: &Bound,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut RngStream,
    lambda: f64,
) -> Result<Var> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Contract(format!(
            "penalty weight must be >= 0, got {lambda}"
        )));
    }
    if real.shape() != fake.shape() {
        return Err(Error::shape(
            "gradient_penalty",
            format!("real {:?} vs fake {:?}", real.shape(), fake.shape()),
        ));
    }
    if lambda == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)?));
    }
    let (rows, cols) = (real.rows(), real.cols());
    let mut mixed = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let u = rng.uniform(0.0, 1.0);
        for (a, b) in real.row(r).iter().zip(fake.row(r)) {
            mixed.push(u * a + (1.0 - u) * b);
        }
    }
    let x_hat = g.constant(Tensor::new(vec![rows, cols], mixed)?);
    let grad = input_gradient(g, disc, bound, x_hat)?;
    let sq = g.square(grad)?;
    let norm2 = g.sum_cols(sq)?;
    let norm = g.sqrt(norm2)?;
    let dev = g.add_scalar(norm, -1.0)?;
    let dev = g.square(dev)?;
    let m = g.mean(dev)?;
    g.scalar_mul(m, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, Architecture, Layer, Role};

    fn zero_disc() -> ParamSet {
        ParamSet::zeros(Architecture::Mlp3.discriminator(2)).unwrap()
    }

    fn points(n: usize) -> Tensor {
        Tensor::new(
            vec![n, 2],
            (0..2 * n).map(|i| (i as f64 * 0.7).sin()).collect(),
        )
        .unwrap()
    }

    fn linear_disc(w: [f64; 2]) -> ParamSet {
        let spec = MlpSpec {
            role: Role::Discriminator,
            layers: vec![Layer {
                input: 2,
                output: 1,
                activation: Activation::Linear,
            }],
        };
        ParamSet::new(
            spec,
            vec![
                Tensor::new(vec![2, 1], w.to_vec()).unwrap(),
                Tensor::zeros(vec![1]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn soft_weight_examples() {
        let w = soft_weights(&[3.0, -1.0, 0.2], 0.0).unwrap();
        assert!(w.weights().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let w = soft_weights(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((w.weights()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.weights()[1] - 1.0 / 3.0).abs() < 1e-15);
        let a = soft_weights(&[0.1, 0.5, -0.2], 1.0).unwrap();
        let b = soft_weights(&[-0.2, 0.1, 0.5], 1.0).unwrap();
        assert_eq!(a.weights()[0], b.weights()[1]);
        assert_eq!(a.weights()[1], b.weights()[2]);
        assert_eq!(a.weights()[2], b.weights()[0]);
    }

    #[test]
    fn soft_weight_errors() {
        assert!(soft_weights(&[], 1.0).is_err());
        assert!(soft_weights(&[f64::NAN], 1.0).is_err());
        assert!(soft_weights(&[1.0], -1.0).is_err());
    }

    #[test]
    fn large_losses_do_not_overflow() {
        let w = soft_weights(&[1000.0, 999.0], 1.0).unwrap();
        let e = (-1f64).exp();
        assert!((w.weights()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
    }

    fn g_loss_value(kind: GMutation, discs: &[ParamSet]) -> f64 {
        let mut g = Graph::new();
        let fake = g.constant(points(6));
        let (l, _) = g_loss(&mut g, kind, fake, discs, 1.0).unwrap();
        g.scalar(l).unwrap()
    }

    #[test]
    fn constant_discriminator_generator_losses() {
        for discs in [
            vec![zero_disc()],
            vec![zero_disc(), zero_disc(), zero_disc()],
        ] {
            let half_ln_half = 0.5 * 0.5f64.ln();
            assert!((g_loss_value(GMutation::Minimax, &discs) - half_ln_half).abs() < 1e-12);
            assert!((g_loss_value(GMutation::Heuristic, &discs) + half_ln_half).abs() < 1e-12);
            assert!((g_loss_value(GMutation::LeastSquares, &discs) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn g_loss_needs_discriminators() {
        let mut g = Graph::new();
        let fake = g.constant(points(2));
        assert!(g_loss(&mut g, GMutation::Minimax, fake, &[], 1.0).is_err());
    }

    fn d_value(kind: DMutation, disc: &ParamSet, real: &Tensor, fake: &Tensor) -> f64 {
        let mut g = Graph::new();
        let b = disc.bind(&mut g);
        let r = g.constant(real.clone());
        let f = g.constant(fake.clone());
        let l = d_loss(&mut g, kind, disc.spec(), &b, r, f).unwrap();
        g.scalar(l).unwrap()
    }

    #[test]
    fn constant_discriminator_objective() {
        let v = d_value(DMutation::Minimax, &zero_disc(), &points(4), &points(7));
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let v = d_value(
            DMutation::LeastSquares,
            &zero_disc(),
            &points(4),
            &points(7),
        );
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_extremes() {
        // D(x) = w.x separates points at x0 = +5 from x0 = -5
        let disc = linear_disc([10.0, 0.0]);
        let real = Tensor::new(vec![2, 2], vec![5.0, 0.0, 5.0, 1.0]).unwrap();
        let fake = Tensor::new(vec![2, 2], vec![-5.0, 0.0, -5.0, 1.0]).unwrap();
        let v = d_value(DMutation::Minimax, &disc, &real, &fake);
        assert!(v <= 0.0 && v > -3e-7, "{v}");

        let disc = linear_disc([1.0, 0.0]);
        let real = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let fake = Tensor::new(vec![1, 2], vec![0.0, -2.0]).unwrap();
        assert_eq!(d_value(DMutation::LeastSquares, &disc, &real, &fake), 0.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut g = Graph::new();
        let d = zero_disc();
        let b = d.bind(&mut g);
        let r = g.constant(points(3));
        let f = g.constant(Tensor::zeros(vec![0, 2]));
        assert!(d_loss(&mut g, DMutation::Minimax, d.spec(), &b, r, f).is_err());
    }

    fn penalty(disc: &ParamSet, lambda: f64) -> f64 {
        let mut g = Graph::new();
        let b = disc.bind(&mut g);
        let p = gradient_penalty(
            &mut g,
            disc.spec(),
            &b,
            &points(5),
            &points(5).slice_rows(0, 5),
            &mut RngStream::new(1),
            lambda,
        )
        .unwrap();
        g.scalar(p).unwrap()
    }

    #[test]
    fn gradient_penalty_linear_cases() {
        assert_eq!(penalty(&zero_disc(), 0.0), 0.0);
        let unit = linear_disc([0.6, 0.8]);
        assert!(penalty(&unit, 10.0).abs() < 1e-9);
        let three = linear_disc([3.0 / 2f64.sqrt(), -3.0 / 2f64.sqrt()]);
        assert!((penalty(&three, 10.0) - 40.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_penalty_batch_mismatch() {
        let d = zero_disc();
        let mut g = Graph::new();
        let b = d.bind(&mut g);
        let r = gradient_penalty(
            &mut g,
            d.spec(),
            &b,
            &points(3),
            &points(4),
            &mut RngStream::new(0),
            1.0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn detached_fake_gives_no_generator_gradient() {
        let gen =
            crate::nets::build_mlp(&Architecture::Mlp3.generator(8, 2), &mut RngStream::new(2))
                .unwrap();
        let disc =
            crate::nets::build_mlp(&Architecture::Mlp3.discriminator(2), &mut RngStream::new(3))
                .unwrap();
        let mut g = Graph::new();
        let gb = gen.bind(&mut g);
        let z = g.constant(
            crate::data::NoiseSpec { dim: 8 }
                .sample(4, &mut RngStream::new(4))
                .unwrap(),
        );
        let fake = forward(&mut g, gen.spec(), &gb, z).unwrap();
        let fake = g.detach(fake);
        let db = disc.bind(&mut g);
        let real = g.constant(points(4));
        for kind in DMutation::ALL {
            let l = d_training_loss(&mut g, kind, disc.spec(), &db, real, fake).unwrap();
            let grads = g.backward(l).unwrap();
            for v in gb.vars() {
                assert!(grads.get(*v).unwrap().iter().all(|&x| x == 0.0));
            }
            assert!(db
                .vars()
                .iter()
                .any(|v| grads.get(*v).unwrap().iter().any(|&x| x != 0.0)));
        }
    }

    #[test]
    fn mutation_names_round_trip() {
        for m in GMutation::ALL {
            assert_eq!(m.name().parse::<GMutation>().unwrap(), m);
        }
        for m in DMutation::ALL {
            assert_eq!(m.to_string().parse::<DMutation>().unwrap(), m);
        }
        assert!("wasserstein".parse::<GMutation>().is_err());
    }
}

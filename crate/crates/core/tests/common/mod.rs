#![allow(dead_code)]

pub mod nsgan;

use cdegan::autodiff::{Graph, Tensor, Var};
use cdegan::data::RngStream;
use cdegan::nets::{Activation, Bound, Layer, MlpSpec, ParamSet, Role};
use cdegan::Result;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Random activation for a hidden layer.
fn activation(rng: &mut RngStream) -> Activation {
    match rng.index(4) {
        0 => Activation::Relu,
        1 => Activation::LeakyRelu { slope: 0.2 },
        2 => Activation::Tanh,
        _ => Activation::Sigmoid,
    }
}

/// A small fully connected net with random widths, activations and
/// weights of unit-ish scale.
pub fn random_net(role: Role, input: usize, output: usize, rng: &mut RngStream) -> ParamSet {
    let hidden = 1 + rng.index(2);
    let mut layers = Vec::new();
    let mut width = input;
    for _ in 0..hidden {
        let next = 3 + rng.index(4);
        layers.push(Layer {
            input: width,
            output: next,
            activation: activation(rng),
        });
        width = next;
    }
    layers.push(Layer {
        input: width,
        output,
        activation: Activation::Linear,
    });
    let spec = MlpSpec { role, layers };
    let mut p = ParamSet::zeros(spec).unwrap();
    for t in p.tensors_mut() {
        for v in t.values_mut() {
            *v = 0.7 * rng.normal();
        }
    }
    p
}

pub fn random_points(n: usize, cols: usize, scale: f64, rng: &mut RngStream) -> Tensor {
    Tensor::new(
        vec![n, cols],
        (0..n * cols)
            .map(|_| scale * rng.uniform(-1.0, 1.0))
            .collect(),
    )
    .unwrap()
}

/// Worst entry-wise relative error between the analytic gradient of
/// `loss` with respect to `params` and central differences.
///
/// The denominator is floored at 1e-6 so entries that are zero on both
/// sides do not divide by zero.
pub fn fd_check<F>(params: &ParamSet, loss: F) -> f64
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let root = loss(&mut g, &bound).unwrap();
    let mut grads = g.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .map(|&v| grads.take(v).unwrap())
        .collect();

    let eval = |p: &ParamSet| {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let r = loss(&mut g, &b).unwrap();
        g.scalar(r).unwrap()
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (ti, a) in analytic.iter().enumerate() {
        for (k, &ga) in a.iter().enumerate() {
            let orig = probe.tensors()[ti].values()[k];
            probe.tensors_mut()[ti].values_mut()[k] = orig + FD_EPS;
            let up = eval(&probe);
            probe.tensors_mut()[ti].values_mut()[k] = orig - FD_EPS;
            let down = eval(&probe);
            probe.tensors_mut()[ti].values_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let rel = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

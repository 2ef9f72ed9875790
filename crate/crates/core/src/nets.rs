//! Multilayer perceptrons used as generators and discriminators, their
//! parameter genomes, and the Adam optimizer that mutates them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var, LEAKY_SLOPE};
use crate::data::{RngState, RngStream};
use crate::error::{Error, Result};

/// Sigmoid outputs are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-7;

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Generator,
    Discriminator,
}

/// Output mode of a discriminator's final unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Probability through a clamped sigmoid.
    Sigmoid,
    /// Unbounded pre-sigmoid score, used by least-squares objectives.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub role: Role,
    pub layers: Vec<Layer>,
}

/// The two fully-connected architectures of the toy benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp3,
    Mlp4,
}

fn dense(input: usize, output: usize, activation: Activation) -> Layer {
    Layer {
        input,
        output,
        activation,
    }
}

impl Architecture {
    pub fn generator(self, noise_dim: usize, data_dim: usize) -> MlpSpec {
        let hidden = match self {
            Architecture::Mlp3 => 2,
            Architecture::Mlp4 => 3,
        };
        let mut layers = vec![dense(noise_dim, 128, Activation::Relu)];
        for _ in 1..hidden {
            layers.push(dense(128, 128, Activation::Relu));
        }
        layers.push(dense(128, data_dim, Activation::Linear));
        MlpSpec {
            role: Role::Generator,
            layers,
        }
    }

    pub fn discriminator(self, data_dim: usize) -> MlpSpec {
        let (hidden, act) = match self {
            Architecture::Mlp3 => (2, Activation::LeakyRelu { slope: LEAKY_SLOPE }),
            Architecture::Mlp4 => (3, Activation::Relu),
        };
        let mut layers = vec![dense(data_dim, 128, act)];
        for _ in 1..hidden {
            layers.push(dense(128, 128, act));
        }
        // the head (sigmoid or raw) is chosen at evaluation time
        layers.push(dense(128, 1, Activation::Linear));
        MlpSpec {
            role: Role::Discriminator,
            layers,
        }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Spec("network has no layers".into()))?;
        if first.input == 0 {
            return Err(Error::Spec("input width must be positive".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output != pair[1].input {
                return Err(Error::Spec(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].output,
                    i + 1,
                    pair[1].input
                )));
            }
        }
        if self.layers.iter().any(|l| l.output == 0) {
            return Err(Error::Spec("layer widths must be positive".into()));
        }
        if self.role == Role::Discriminator && self.output_dim() != 1 {
            return Err(Error::Spec(
                "discriminator must end in a single unit".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.input * l.output + l.output)
            .sum()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [vec![l.input, l.output], vec![l.output]])
            .collect()
    }
}

/// Ordered weights and biases `W1, b1, W2, b2, ...` of one network.
///
/// Weights are stored `input x output` so a batch forward is `x * W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    spec: MlpSpec,
    tensors: Vec<Tensor>,
}

/// Parameters bound into a [`Graph`] as leaves.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new(spec: MlpSpec, tensors: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != tensors.len()
            || shapes
                .iter()
                .zip(&tensors)
                .any(|(s, t)| s.as_slice() != t.shape())
        {
            return Err(Error::Spec(
                "tensor shapes do not match the network spec".into(),
            ));
        }
        Ok(Self { spec, tensors })
    }

    /// Every parameter set to zero.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let tensors = spec.param_shapes().into_iter().map(Tensor::zeros).collect();
        Ok(Self { spec, tensors })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds every tensor to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Adds every tensor to `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Copies gradients for `bound` out of `grads` into the grad slots.
    pub fn load_grads(&mut self, grads: &mut Gradients, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            let g = grads
                .take(v)
                .ok_or_else(|| Error::Contract("parameter was not bound as a leaf".into()))?;
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn grad_l2_norm(&self) -> Result<f64> {
        crate::autodiff::grad_l2_norm(&self.tensors)
    }
}

/// Initializes weights from `N(0, INIT_STD^2)` and biases at zero.
pub fn build_mlp(spec: &MlpSpec, rng: &mut RngStream) -> Result<ParamSet> {
    spec.validate()?;
    let tensors = spec
        .param_shapes()
        .into_iter()
        .map(|shape| {
            if shape.len() == 2 {
                let n = shape[0] * shape[1];
                let values = (0..n).map(|_| INIT_STD * rng.normal()).collect();
                Tensor::new(shape, values)
            } else {
                Ok(Tensor::zeros(shape))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSet {
        spec: spec.clone(),
        tensors,
    })
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => g.relu(x),
        Activation::LeakyRelu { slope } => g.leaky_relu(x, slope),
        Activation::Tanh => g.tanh(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Linear => Ok(x),
    }
}

fn check_input(spec: &MlpSpec, g: &Graph, x: Var) -> Result<()> {
    match g.shape(x) {
        [_, c] if *c == spec.input_dim() => Ok(()),
        s => Err(Error::shape(
            "forward",
            format!(
                "input {s:?} does not match network input width {}",
                spec.input_dim()
            ),
        )),
    }
}

/// Records the network applied to `x` (`B x input`) and returns the
/// `B x output` result of the last layer.
pub fn forward(g: &mut Graph, spec: &MlpSpec, params: &Bound, x: Var) -> Result<Var> {
    check_input(spec, g, x)?;
    let mut h = x;
    for (l, layer) in spec.layers.iter().enumerate() {
        h = g.matmul(h, params.vars[2 * l])?;
        h = g.add_bias(h, params.vars[2 * l + 1])?;
        h = activate(g, h, layer.activation)?;
    }
    Ok(h)
}

/// Applies a discriminator head to raw scores.
pub fn apply_head(g: &mut Graph, raw: Var, head: Head) -> Result<Var> {
    match head {
        Head::Raw => Ok(raw),
        Head::Sigmoid => {
            let p = g.sigmoid(raw)?;
            g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
        }
    }
}

/// Records the gradient of each row's scalar output with respect to that
/// row's input, as a `B x input` node that stays differentiable with
/// respect to the parameters.
///
/// Requires a single-output network. Piecewise-linear activations
/// contribute constant masks, which is exact almost everywhere.
pub fn input_gradient(g: &mut Graph, spec: &MlpSpec, params: &Bound, x: Var) -> Result<Var> {
    check_input(spec, g, x)?;
    if spec.output_dim() != 1 {
        return Err(Error::Spec(
            "input gradient needs a single-output network".into(),
        ));
    }
    let mut pre = Vec::with_capacity(spec.layers.len());
    let mut post = Vec::with_capacity(spec.layers.len());
    let mut h = x;
    for (l, layer) in spec.layers.iter().enumerate() {
        let z = g.matmul(h, params.vars[2 * l])?;
        let z = g.add_bias(z, params.vars[2 * l + 1])?;
        h = activate(g, z, layer.activation)?;
        pre.push(z);
        post.push(h);
    }
    let batch = g.shape(x)[0];
    let mut up = g.constant(Tensor::new(vec![batch, 1], vec![1.0; batch])?);
    for (l, layer) in spec.layers.iter().enumerate().rev() {
        up = match layer.activation {
            Activation::Linear => up,
            Activation::Relu | Activation::LeakyRelu { .. } => {
                let slope = match layer.activation {
                    Activation::LeakyRelu { slope } => slope,
                    _ => 0.0,
                };
                let mask: Vec<f64> = g
                    .value(pre[l])
                    .iter()
                    .map(|&v| if v > 0.0 { 1.0 } else { slope })
                    .collect();
                let mask = g.constant(Tensor::new(g.shape(pre[l]).to_vec(), mask)?);
                g.mul(up, mask)?
            }
            Activation::Tanh => {
                let sq = g.square(post[l])?;
                let d = g.neg(sq)?;
                let d = g.add_scalar(d, 1.0)?;
                g.mul(up, d)?
            }
            Activation::Sigmoid => {
                let one_minus = g.neg(post[l])?;
                let one_minus = g.add_scalar(one_minus, 1.0)?;
                let d = g.mul(post[l], one_minus)?;
                g.mul(up, d)?
            }
        };
        let wt = g.transpose(params.vars[2 * l])?;
        up = g.matmul(up, wt)?;
    }
    Ok(up)
}

fn run_frozen(params: &ParamSet, x: &Tensor, head: Option<Head>) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let mut out = forward(&mut g, &params.spec, &bound, xv)?;
    if let Some(h) = head {
        out = apply_head(&mut g, out, h)?;
    }
    Ok(g.tensor(out))
}

/// Maps a `B x noise_dim` batch to `B x data_dim` generated points.
pub fn forward_generator(params: &ParamSet, z: &Tensor) -> Result<Tensor> {
    if params.spec.role != Role::Generator {
        return Err(Error::Spec("expected a generator".into()));
    }
    run_frozen(params, z, None)
}

/// Routes contiguous, near-equal row blocks of `z` through each generator
/// in turn and stacks the results in row order.
pub fn forward_generators(gens: &[ParamSet], z: &Tensor) -> Result<Tensor> {
    if gens.is_empty() {
        return Err(Error::Contract("no generators to sample from".into()));
    }
    if gens.len() == 1 {
        return forward_generator(&gens[0], z);
    }
    let rows = z.rows();
    let parts = gens
        .iter()
        .enumerate()
        .filter_map(|(j, gen)| {
            let (start, end) = (j * rows / gens.len(), (j + 1) * rows / gens.len());
            (end > start).then(|| forward_generator(gen, &z.slice_rows(start, end)))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::vstack(&parts.iter().collect::<Vec<_>>())
}

/// Scores a `B x data_dim` batch, returning `B x 1`.
pub fn forward_discriminator(params: &ParamSet, x: &Tensor, head: Head) -> Result<Tensor> {
    if params.spec.role != Role::Discriminator {
        return Err(Error::Spec("expected a discriminator".into()));
    }
    run_frozen(params, x, Some(head))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update using the gradients stored in `params`.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.tensors.len() {
        return Err(Error::Contract(
            "optimizer state does not match parameters".into(),
        ));
    }
    for (i, t) in params.tensors.iter().enumerate() {
        match t.grad() {
            None => return Err(Error::Contract(format!("parameter {i} has no gradient"))),
            Some(g) if g.len() != state.m[i].len() => {
                return Err(Error::Contract(format!(
                    "optimizer slot {i} has the wrong size"
                )))
            }
            _ => {}
        }
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, tensor) in params.tensors.iter_mut().enumerate() {
        let grad = tensor.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.values_mut().iter_mut().enumerate() {
            let gj = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.check_finite("adam update")?;
    }
    Ok(())
}

/// On-disk form of one network with its optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub spec: MlpSpec,
    pub tensors: Vec<Tensor>,
    pub adam: AdamState,
    pub rng_state: Option<RngState>,
}

impl NetCheckpoint {
    pub fn new(params: &ParamSet, adam: &AdamState, rng: Option<&RngStream>) -> Self {
        Self {
            spec: params.spec.clone(),
            tensors: params.tensors.clone(),
            adam: adam.clone(),
            rng_state: rng.map(RngStream::state),
        }
    }

    pub fn into_parts(self) -> Result<(ParamSet, AdamState)> {
        for t in &self.tensors {
            // deserialization bypasses the constructor checks
            Tensor::new(t.shape().to_vec(), t.values().to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let params =
            ParamSet::new(self.spec, self.tensors).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if self.adam.m.len() != params.tensors.len()
            || self.adam.v.len() != params.tensors.len()
            || params
                .tensors
                .iter()
                .zip(self.adam.m.iter().zip(&self.adam.v))
                .any(|(t, (m, v))| m.len() != t.len() || v.len() != t.len())
        {
            return Err(Error::Checkpoint(
                "optimizer state does not match parameters".into(),
            ));
        }
        Ok((params, self.adam))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

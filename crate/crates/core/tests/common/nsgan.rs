//! A plain non-saturating GAN trainer with hand-written backprop and
//! Adam, no graph and no populations. Batches come from the same named
//! streams the evolutionary trainer uses.

use cdegan::data::{GaussianRingSpec, NoiseSpec};
use cdegan::evolution::Streams;
use cdegan::nets::{Activation, AdamConfig, ParamSet, PROB_FLOOR};

struct Dense {
    n_in: usize,
    n_out: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    act: Activation,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

pub struct Net {
    layers: Vec<Dense>,
    adam: Adam,
}

/// Per-layer inputs and pre-activations from one forward pass.
struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: Vec<f64>,
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu { slope } => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        Activation::Linear => x,
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
    }
}

fn act_grad(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::LeakyRelu { slope } => {
            if x > 0.0 {
                1.0
            } else {
                slope
            }
        }
        Activation::Linear => 1.0,
        Activation::Tanh => 1.0 - x.tanh().powi(2),
        Activation::Sigmoid => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 - s)
        }
    }
}

impl Net {
    pub fn from_params(p: &ParamSet) -> Self {
        let t = p.tensors();
        let layers: Vec<Dense> = p
            .spec()
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| Dense {
                n_in: l.input,
                n_out: l.output,
                w: t[2 * i].values().to_vec(),
                b: t[2 * i + 1].values().to_vec(),
                act: l.activation,
            })
            .collect();
        let sizes: Vec<usize> = layers.iter().flat_map(|l| [l.w.len(), l.b.len()]).collect();
        Net {
            adam: Adam {
                m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
                v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
                t: 0,
            },
            layers,
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b).copied())
            .collect()
    }

    fn forward(&self, x: &[f64], n: usize) -> Trace {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut h = x.to_vec();
        for l in &self.layers {
            let mut z = vec![0.0; n * l.n_out];
            for r in 0..n {
                for o in 0..l.n_out {
                    let mut s = 0.0;
                    for i in 0..l.n_in {
                        s += h[r * l.n_in + i] * l.w[i * l.n_out + o];
                    }
                    z[r * l.n_out + o] = s + l.b[o];
                }
            }
            let next: Vec<f64> = z.iter().map(|&v| act(l.act, v)).collect();
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        Trace {
            inputs,
            pre,
            out: h,
        }
    }

    /// Backprop `d_out`; returns parameter gradients and the gradient with
    /// respect to the network input.
    fn backward(&self, tr: &Trace, d_out: &[f64], n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut grads = vec![Vec::new(); 2 * self.layers.len()];
        let mut up = d_out.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let dz: Vec<f64> = up
                .iter()
                .zip(&tr.pre[li])
                .map(|(&u, &z)| u * act_grad(l.act, z))
                .collect();
            let x = &tr.inputs[li];
            let mut dw = vec![0.0; l.n_in * l.n_out];
            let mut db = vec![0.0; l.n_out];
            let mut dx = vec![0.0; n * l.n_in];
            for r in 0..n {
                for o in 0..l.n_out {
                    let d = dz[r * l.n_out + o];
                    db[o] += d;
                    for i in 0..l.n_in {
                        dw[i * l.n_out + o] += x[r * l.n_in + i] * d;
                        dx[r * l.n_in + i] += d * l.w[i * l.n_out + o];
                    }
                }
            }
            grads[2 * li] = dw;
            grads[2 * li + 1] = db;
            up = dx;
        }
        (grads, up)
    }

    fn adam(&mut self, grads: &[Vec<f64>], cfg: &AdamConfig) {
        let a = &mut self.adam;
        a.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(a.t);
        let c2 = 1.0 - cfg.beta2.powi(a.t);
        let mut slot = 0;
        for l in &mut self.layers {
            for p in [&mut l.w, &mut l.b] {
                for (j, v) in p.iter_mut().enumerate() {
                    let g = grads[slot][j];
                    a.m[slot][j] = cfg.beta1 * a.m[slot][j] + (1.0 - cfg.beta1) * g;
                    a.v[slot][j] = cfg.beta2 * a.v[slot][j] + (1.0 - cfg.beta2) * g * g;
                    *v -= cfg.lr * (a.m[slot][j] / c1) / ((a.v[slot][j] / c2).sqrt() + cfg.eps);
                }
                slot += 1;
            }
        }
    }
}

fn sigmoid_clamped(x: f64) -> (f64, bool) {
    let s = 1.0 / (1.0 + (-x).exp());
    let c = s.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    (c, s == c)
}

/// Losses from one iteration: the `K` discriminator losses, then the
/// generator loss.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub d: Vec<f64>,
    pub g: f64,
}

pub struct NsGan {
    pub gen: Net,
    pub disc: Net,
    pub streams: Streams,
    pub ring: GaussianRingSpec,
    pub noise: NoiseSpec,
    pub adam: AdamConfig,
    pub batch: usize,
    pub d_steps: usize,
    pub t: usize,
}

impl NsGan {
    pub fn step(&mut self) -> StepLosses {
        self.t += 1;
        let (t, n) = (self.t, self.batch);
        let mut d_losses = Vec::new();
        for k in 0..self.d_steps {
            let real = self
                .ring
                .sample(n, &mut self.streams.d_real(t, k, 0, 0))
                .unwrap();
            let z = self
                .noise
                .sample(n, &mut self.streams.d_noise(t, k, 0, 0))
                .unwrap();
            let fake = self.gen.forward(z.values(), n).out;

            let tr_r = self.disc.forward(real.values(), n);
            let tr_f = self.disc.forward(&fake, n);
            let mut lr_sum = 0.0;
            let mut lf_sum = 0.0;
            let mut d_r = vec![0.0; n];
            let mut d_f = vec![0.0; n];
            for r in 0..n {
                let (p, live) = sigmoid_clamped(tr_r.out[r]);
                lr_sum += p.ln();
                if live {
                    d_r[r] = -(1.0 - p) / n as f64;
                }
                let (q, live) = sigmoid_clamped(tr_f.out[r]);
                lf_sum += (1.0 - q).ln();
                if live {
                    d_f[r] = q / n as f64;
                }
            }
            d_losses.push(-(lr_sum / n as f64 + lf_sum / n as f64));
            let (gr, _) = self.disc.backward(&tr_r, &d_r, n);
            let (gf, _) = self.disc.backward(&tr_f, &d_f, n);
            let grads: Vec<Vec<f64>> = gr
                .iter()
                .zip(&gf)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect();
            self.disc.adam(&grads, &self.adam);
        }

        let z = self
            .noise
            .sample(n, &mut self.streams.g_noise(t, 0, 0))
            .unwrap();
        let tr_g = self.gen.forward(z.values(), n);
        let tr_d = self.disc.forward(&tr_g.out, n);
        let mut sum = 0.0;
        let mut d_logit = vec![0.0; n];
        for (d, &o) in d_logit.iter_mut().zip(&tr_d.out) {
            let (p, live) = sigmoid_clamped(o);
            sum += p.ln();
            if live {
                *d = -0.5 * (1.0 - p) / n as f64;
            }
        }
        let (_, d_fake) = self.disc.backward(&tr_d, &d_logit, n);
        let (gg, _) = self.gen.backward(&tr_g, &d_fake, n);
        self.gen.adam(&gg, &self.adam);
        StepLosses {
            d: d_losses,
            g: -0.5 * sum / n as f64,
        }
    }
}

//! Samplers for the ring-of-Gaussians target and the generator noise prior.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A deterministic random stream that can be split by label.
///
/// Children derived from the same `(seed, label path)` always produce the
/// same sequence, independent of how much the parent has been consumed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    path: String,
    rng: ChaCha8Rng,
}

/// Serializable position of an [`RngStream`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub path: String,
    pub word_pos: u128,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, path: &str) -> [u8; 32] {
    // FNV-1a over the path, then four splitmix rounds
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in path.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut state = mix(seed ^ mix(h));
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = mix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, String::new())
    }

    fn at(seed: u64, path: String) -> Self {
        let rng = ChaCha8Rng::from_seed(derive_key(seed, &path));
        Self { seed, path, rng }
    }

    /// Independent child stream for `label`.
    pub fn child(&self, label: &str) -> Self {
        let path = if self.path.is_empty() {
            label.to_string()
        } else {
            format!("{}/{label}", self.path)
        };
        Self::at(self.seed, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            path: self.path.clone(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut s = Self::at(state.seed, state.path.clone());
        s.rng.set_word_pos(state.word_pos);
        s
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// Mixture of isotropic Gaussians with centers evenly spaced on a circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianRingSpec {
    pub n_modes: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl Default for GaussianRingSpec {
    fn default() -> Self {
        Self {
            n_modes: 8,
            radius: 2.0,
            sigma: 0.02,
        }
    }
}

impl GaussianRingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 {
            return Err(Error::config("dataset.n_modes", "must be at least 1"));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::config("dataset.radius", "must be positive"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config("dataset.sigma", "must be non-negative"));
        }
        Ok(())
    }

    /// Center `k` sits at angle `2πk / n_modes`.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.n_modes)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / self.n_modes as f64;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }

    /// Draws `n` points as an `n x 2` tensor.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Contract("sample count must be positive".into()));
        }
        let centers = self.centers();
        let mut values = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let c = centers[rng.index(centers.len())];
            let dx = rng.normal();
            let dy = rng.normal();
            values.push(c[0] + self.sigma * dx);
            values.push(c[1] + self.sigma * dy);
        }
        Tensor::new(vec![n, 2], values)
    }
}

/// Generator input prior: i.i.d. uniform entries on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub dim: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl NoiseSpec {
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Tensor> {
        if n == 0 || self.dim == 0 {
            return Err(Error::Contract(
                "noise batch needs n > 0 and dim > 0".into(),
            ));
        }
        let values = (0..n * self.dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::new(vec![n, self.dim], values)
    }
}

//! Toy decoder stack with two interchangeable attention backends.
//!
//! Each layer is `x + attn(rmsnorm(x))` followed by `x + swiglu(rmsnorm(x))`,
//! with RoPE on q and k at logical positions. Everything except attention
//! is per token, which is what makes the prompt rows of every replicated
//! sequence identical under standard packing and lets the shared-prompt
//! backend compute them once.

mod model;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{loss, model_bwd, model_bwd_traced, model_fwd, AttentionTrace, Backend, ForwardCache, ModelOutput};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub rope_base: f64,
    /// key tile size handed to both attention kernels
    pub tile_size: usize,
}

impl ModelConfig {
    /// The small configuration used by the equivalence checks.
    pub fn toy(layers: usize) -> Self {
        Self {
            layers,
            d_model: 16,
            heads: 4,
            kv_heads: 2,
            head_dim: 4,
            d_ff: 32,
            vocab: 23,
            rope_base: 10_000.0,
            tile_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.heads, self.kv_heads, self.head_dim, self.d_ff, self.vocab, self.tile_size];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::InvalidArgument("heads must be a multiple of kv_heads".into()));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("RoPE needs an even head_dim".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `[D, H*d]`
    pub w_q: Array2<f64>,
    /// `[D, H_k*d]`
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    /// `[H*d, D]`
    pub w_o: Array2<f64>,
    pub gamma1: Array1<f64>,
    pub gamma2: Array1<f64>,
    /// `[D, d_ff]`
    pub w_gate: Array2<f64>,
    pub w_up: Array2<f64>,
    /// `[d_ff, D]`
    pub w_down: Array2<f64>,
}

/// Gradients share the parameter layout.
pub type LayerGrads = LayerParams;

impl LayerParams {
    fn zeros_like(cfg: &ModelConfig) -> Self {
        let (dm, hd, kd, f) = (cfg.d_model, cfg.heads * cfg.head_dim, cfg.kv_heads * cfg.head_dim, cfg.d_ff);
        Self {
            w_q: Array2::zeros((dm, hd)),
            w_k: Array2::zeros((dm, kd)),
            w_v: Array2::zeros((dm, kd)),
            w_o: Array2::zeros((hd, dm)),
            gamma1: Array1::zeros(dm),
            gamma2: Array1::zeros(dm),
            w_gate: Array2::zeros((dm, f)),
            w_up: Array2::zeros((dm, f)),
            w_down: Array2::zeros((f, dm)),
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![];
        for a in [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o] {
            out.push(a.as_slice_mut().expect("standard layout"));
        }
        for a in [&mut self.gamma1, &mut self.gamma2] {
            out.push(a.as_slice_mut().expect("standard layout"));
        }
        for a in [&mut self.w_gate, &mut self.w_up, &mut self.w_down] {
            out.push(a.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[V, D]`
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_gamma: Array1<f64>,
    /// `[D, V]`
    pub head: Array2<f64>,
}

/// Gradients of every parameter; `embedding` is the embedding-table
/// gradient.
pub type ModelGrads = ModelParams;

impl ModelParams {
    /// Seeded initialisation: normal weights scaled by `1/sqrt(fan_in)`,
    /// gains near 1.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
        };
        let (dm, hd, kd, f) = (cfg.d_model, cfg.heads * cfg.head_dim, cfg.kv_heads * cfg.head_dim, cfg.d_ff);
        let s = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let embedding = mat(cfg.vocab, dm, 1.0);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerParams {
                w_q: mat(dm, hd, s(dm)),
                w_k: mat(dm, kd, s(dm)),
                w_v: mat(dm, kd, s(dm)),
                w_o: mat(hd, dm, s(hd)),
                gamma1: mat(1, dm, 0.1).row(0).mapv(|x| 1.0 + x),
                gamma2: mat(1, dm, 0.1).row(0).mapv(|x| 1.0 + x),
                w_gate: mat(dm, f, s(dm)),
                w_up: mat(dm, f, s(dm)),
                w_down: mat(f, dm, s(f)),
            });
        }
        let final_gamma = mat(1, dm, 0.1).row(0).mapv(|x| 1.0 + x);
        let head = mat(dm, cfg.vocab, s(dm));
        Ok(Self {
            embedding,
            layers,
            final_gamma,
            head,
        })
    }

    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        Self {
            embedding: Array2::zeros((cfg.vocab, cfg.d_model)),
            layers: (0..cfg.layers).map(|_| LayerParams::zeros_like(cfg)).collect(),
            final_gamma: Array1::zeros(cfg.d_model),
            head: Array2::zeros((cfg.d_model, cfg.vocab)),
        }
    }

    /// Every parameter as one mutable slice, in a fixed order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embedding.as_slice_mut().expect("standard layout")];
        for l in &mut self.layers {
            out.extend(l.slices_mut());
        }
        out.push(self.final_gamma.as_slice_mut().expect("standard layout"));
        out.push(self.head.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut copy = self.clone();
        copy.slices_mut().into_iter().flat_map(|s| s.to_vec()).collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        let mut other = other.clone();
        for (a, b) in self.slices_mut().into_iter().zip(other.slices_mut()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

/// `x / sqrt(mean(x^2) + eps) * gamma` per row.
pub fn rmsnorm(x: ArrayView2<f64>, gamma: ArrayView1<f64>, eps: f64) -> Array2<f64> {
    rmsnorm_with_inv(x, gamma, eps).0
}

pub(crate) fn rmsnorm_with_inv(x: ArrayView2<f64>, gamma: ArrayView1<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let inv: Array1<f64> = x.map_axis(Axis(1), |row| 1.0 / (row.dot(&row) / d + eps).sqrt());
    let mut y = x.to_owned();
    for (mut row, r) in y.rows_mut().into_iter().zip(&inv) {
        row.zip_mut_with(&gamma, |v, g| *v *= r * g);
    }
    (y, inv)
}

/// Returns `(dx, dgamma)`.
pub(crate) fn rmsnorm_bwd(x: ArrayView2<f64>, gamma: ArrayView1<f64>, inv: &Array1<f64>, dy: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dgamma = Array1::zeros(gamma.len());
    for t in 0..x.nrows() {
        let (xr, dyr, r) = (x.row(t), dy.row(t), inv[t]);
        let gdy = &dyr * &gamma;
        dgamma.zip_mut_with(&(&dyr * &xr), |a, b| *a += b * r);
        let proj = gdy.dot(&xr) * r * r * r / d;
        let mut out = dx.row_mut(t);
        for j in 0..xr.len() {
            out[j] = r * gdy[j] - xr[j] * proj;
        }
    }
    (dx, dgamma)
}

/// Rotary embedding: pair `(2k, 2k+1)` rotated by `pos * base^(-2k/d)`.
pub fn rope(x: ArrayView3<f64>, positions: &[usize], base: f64) -> Array3<f64> {
    rope_signed(x, positions, base, 1.0)
}

/// Inverse rotation, which is also the backward of [`rope`].
pub(crate) fn rope_inverse(x: ArrayView3<f64>, positions: &[usize], base: f64) -> Array3<f64> {
    rope_signed(x, positions, base, -1.0)
}

fn rope_signed(x: ArrayView3<f64>, positions: &[usize], base: f64, sign: f64) -> Array3<f64> {
    let (t, h, d) = x.dim();
    assert_eq!(positions.len(), t, "one position per token");
    let mut out = x.to_owned();
    for (ti, &pos) in positions.iter().enumerate() {
        for k in 0..d / 2 {
            let theta = sign * pos as f64 * base.powf(-2.0 * k as f64 / d as f64);
            let (sin, cos) = theta.sin_cos();
            for hh in 0..h {
                let (a, b) = (x[[ti, hh, 2 * k]], x[[ti, hh, 2 * k + 1]]);
                out[[ti, hh, 2 * k]] = a * cos - b * sin;
                out[[ti, hh, 2 * k + 1]] = a * sin + b * cos;
            }
        }
    }
    out
}

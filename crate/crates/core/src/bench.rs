//! Wall-clock comparison of the baseline packing against the two-call
//! shared-prompt path.
//!
//! One prompt group of `N` responses is timed both ways. The baseline runs
//! [`fa2_varlen_fwd`]/[`fa2_varlen_bwd`] over `N` sequences of `P + R`
//! tokens. The shared path runs Call 1 (prompt self-attention through the
//! varlen kernel) and Call 2 ([`dualkv_fwd`]/[`dualkv_bwd`] over the
//! responses). Each phase reports the median of the measured repetitions;
//! warmup repetitions are discarded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::costmodel::attention_pair_ratio;
use crate::dualkv::{dualkv_bwd, dualkv_fwd, DualKVInput};
use crate::error::{Error, Result};
use crate::fa2::{fa2_varlen_bwd, fa2_varlen_fwd, VarlenBatch, DEFAULT_TILE};
use crate::packing::compute_rho;
use crate::tensor::{seeded_unit, Precision, Tensor};

/// Default ceiling on the estimated working set.
pub const DEFAULT_MEMORY_LIMIT: u64 = 8 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n: usize,
    pub p: usize,
    pub r: usize,
    pub tile: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub reps: usize,
    pub warmup: usize,
    pub precision: Precision,
    pub seed: u64,
    pub memory_limit: u64,
}

impl BenchConfig {
    pub fn new(n: usize, p: usize, r: usize) -> Self {
        Self {
            n,
            p,
            r,
            tile: DEFAULT_TILE,
            heads: 8,
            kv_heads: 2,
            head_dim: 64,
            reps: 5,
            warmup: 2,
            precision: Precision::F32,
            seed: 0,
            memory_limit: DEFAULT_MEMORY_LIMIT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n, self.r, self.tile, self.heads, self.kv_heads, self.head_dim, self.reps].contains(&0) {
            return Err(Error::InvalidArgument("n, r, tile, heads, kv_heads, head_dim and reps must be positive".into()));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::InvalidArgument("heads must be a multiple of kv_heads".into()));
        }
        Ok(())
    }

    /// Rough peak bytes for the larger of the two runs: stored tensors
    /// (inputs, outputs, upstream and gradients, all `f64`-backed) plus the
    /// kernels' compute-type copies.
    pub fn estimated_bytes(&self) -> u64 {
        let tokens = (self.n as u64).saturating_mul((self.p + self.r) as u64);
        let q_row = (self.heads * self.head_dim) as u64;
        let kv_row = (self.kv_heads * self.head_dim) as u64;
        let per_token = 4 * q_row + 4 * kv_row + self.heads as u64;
        tokens.saturating_mul(per_token).saturating_mul(8 + 4)
    }
}

/// Median seconds per phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub fwd: f64,
    pub bwd: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.fwd + self.bwd
    }

    pub fn bwd_fwd_ratio(&self) -> f64 {
        self.bwd / self.fwd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub fa2: PhaseTimes,
    pub dualkv: PhaseTimes,
    pub speedup_fwd: f64,
    pub speedup_bwd: f64,
    pub speedup_total: f64,
    /// token-count prediction, `rho`
    pub predicted_tokens: f64,
    /// exact attention pair-count prediction
    pub predicted_pairs: f64,
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    }
}

/// Runs `f` `warmup + reps` times and returns the median of the last `reps`.
fn time_median(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut samples))
}

struct Inputs {
    standard: VarlenBatch,
    d_out_std: Tensor,
    call1: Option<VarlenBatch>,
    call2: DualKVInput,
    d_out_dk: Tensor,
}

/// One prompt group in both layouts; the baseline replicates the same
/// prompt rows into every sequence.
fn build_inputs(cfg: &BenchConfig) -> Result<Inputs> {
    let (n, p, r, h, hk, d) = (cfg.n, cfg.p, cfg.r, cfg.heads, cfg.kv_heads, cfg.head_dim);
    let prec = cfg.precision;
    let unit = |shape: &[usize], salt: u64| seeded_unit(shape, cfg.seed.wrapping_mul(16).wrapping_add(salt)).cast(prec);
    let q_ctx = unit(&[p, h, d], 1);
    let k_ctx = unit(&[p, hk, d], 2);
    let v_ctx = unit(&[p, hk, d], 3);
    let q_dec = unit(&[n * r, h, d], 4);
    let k_dec = unit(&[n * r, hk, d], 5);
    let v_dec = unit(&[n * r, hk, d], 6);
    let do_ctx = unit(&[p, h, d], 7);
    let do_dec = unit(&[n * r, h, d], 8);

    let interleave = |ctx: &Tensor, dec: &Tensor| -> Result<Tensor> {
        let mut parts = Vec::with_capacity(2 * n);
        for i in 0..n {
            parts.push(ctx.clone());
            parts.push(dec.slice_rows(i * r..(i + 1) * r));
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    };
    let cu_std: Vec<usize> = (0..=n).map(|i| i * (p + r)).collect();
    let standard = VarlenBatch::new(
        interleave(&q_ctx, &q_dec)?,
        interleave(&k_ctx, &k_dec)?,
        interleave(&v_ctx, &v_dec)?,
        cu_std,
    )
    .with_tile(cfg.tile);
    let d_out_std = interleave(&do_ctx, &do_dec)?;

    let call1 = (p > 0).then(|| VarlenBatch::new(q_ctx, k_ctx.clone(), v_ctx.clone(), vec![0, p]).with_tile(cfg.tile));
    let cu_dec: Vec<usize> = (0..=n).map(|i| i * r).collect();
    let call2 = DualKVInput::new(q_dec, k_ctx, v_ctx, k_dec, v_dec, cu_dec).with_tile(cfg.tile);
    Ok(Inputs {
        standard,
        d_out_std,
        call1,
        call2,
        d_out_dk: do_dec,
    })
}

/// Times both paths. The configuration is checked against
/// `memory_limit` before any tensor is allocated.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let needed = cfg.estimated_bytes();
    if needed > cfg.memory_limit {
        return Err(Error::TooLarge {
            needed,
            limit: cfg.memory_limit,
        });
    }
    let rs = vec![cfg.r; cfg.n];
    let predicted_tokens = compute_rho(cfg.n as u64, cfg.p as u64, cfg.r as u64)?;
    let predicted_pairs = attention_pair_ratio(cfg.p, &rs)?;
    let inputs = build_inputs(cfg)?;

    let fa2 = {
        let b = &inputs.standard;
        let fwd = time_median(cfg.warmup, cfg.reps, || fa2_varlen_fwd(b).map(drop))?;
        let (o, lse) = fa2_varlen_fwd(b)?;
        let bwd = time_median(cfg.warmup, cfg.reps, || fa2_varlen_bwd(b, &o, &lse, &inputs.d_out_std).map(drop))?;
        PhaseTimes { fwd, bwd }
    };

    let dualkv = {
        let (c1, c2) = (inputs.call1.as_ref(), &inputs.call2);
        let d_ctx = c1.map(|b| seeded_unit(b.q.shape(), cfg.seed ^ 0x5eed).cast(cfg.precision));
        let fwd = time_median(cfg.warmup, cfg.reps, || {
            if let Some(b) = c1 {
                fa2_varlen_fwd(b)?;
            }
            dualkv_fwd(c2).map(drop)
        })?;
        let saved1 = c1.map(fa2_varlen_fwd).transpose()?;
        let (o2, lse2) = dualkv_fwd(c2)?;
        let bwd = time_median(cfg.warmup, cfg.reps, || {
            dualkv_bwd(c2, &o2, &lse2, &inputs.d_out_dk, false)?;
            if let (Some(b), Some((o1, l1)), Some(d)) = (c1, saved1.as_ref(), d_ctx.as_ref()) {
                fa2_varlen_bwd(b, o1, l1, d)?;
            }
            Ok(())
        })?;
        PhaseTimes { fwd, bwd }
    };

    Ok(BenchReport {
        config: *cfg,
        speedup_fwd: fa2.fwd / dualkv.fwd,
        speedup_bwd: fa2.bwd / dualkv.bwd,
        speedup_total: fa2.total() / dualkv.total(),
        fa2,
        dualkv,
        predicted_tokens,
        predicted_pairs,
    })
}

//! Two-region attention for a prompt group: decoded queries attend to one
//! shared copy of the prompt KV plus their own causal decoded KV.
//!
//! Context tiles are visited first in physical order (logical base
//! `n * B_N`), decoded tiles after them (logical base `P + m * B_N`), and
//! the forward walks the combined list in reverse. The backward accumulates
//! every sequence's context-tile gradients into a [`ContextGradScratch`]
//! and casts it once with [`convert_dkv_context`].

use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::fa2::{self, check_cu_seqlens, check_precisions, lse_precision, to_tensor};
use crate::kernel::{self, BackwardInputs, Compute, Geometry, Region, Segment};
use crate::tensor::{bf16_round, Precision, Tensor};

#[derive(Debug, Clone)]
pub struct DualKVInput {
    /// decoded queries `[ΣR_i, H, d]`
    pub q: Tensor,
    /// shared prompt keys `[P, H_k, d]`
    pub k_context: Tensor,
    pub v_context: Tensor,
    /// `[ΣR_i, H_k, d]`, same offsets as `q`
    pub k_decoded: Tensor,
    pub v_decoded: Tensor,
    pub cu_seqlens_q: Vec<usize>,
    pub context_seqlen: usize,
    pub max_seqlen_q: usize,
    /// `None` means `1/sqrt(d)`
    pub softmax_scale: Option<f64>,
    /// Only causal attention is supported; `false` is rejected.
    pub causal: bool,
    pub tile_size: usize,
}

impl DualKVInput {
    pub fn new(q: Tensor, k_context: Tensor, v_context: Tensor, k_decoded: Tensor, v_decoded: Tensor, cu_seqlens_q: Vec<usize>) -> Self {
        let context_seqlen = k_context.shape().first().copied().unwrap_or(0);
        let max_seqlen_q = cu_seqlens_q.windows(2).map(|w| w[1].saturating_sub(w[0])).max().unwrap_or(0);
        Self {
            q,
            k_context,
            v_context,
            k_decoded,
            v_decoded,
            cu_seqlens_q,
            context_seqlen,
            max_seqlen_q,
            softmax_scale: None,
            causal: true,
            tile_size: fa2::DEFAULT_TILE,
        }
    }

    pub fn with_tile(mut self, tile_size: usize) -> Self {
        self.tile_size = tile_size;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.softmax_scale = Some(scale);
        self
    }

    pub fn num_sequences(&self) -> usize {
        self.cu_seqlens_q.len().saturating_sub(1)
    }

    fn geometry(&self) -> Result<Geometry> {
        if !self.causal {
            return Err(Error::InvalidArgument("only causal attention is supported".into()));
        }
        let (qs, ks) = (self.q.shape(), self.k_decoded.shape());
        if qs.len() != 3 || ks.len() != 3 {
            return Err(Error::InvalidArgument("q and decoded kv must be [tokens, heads, dim]".into()));
        }
        self.v_decoded.check_shape(ks)?;
        if ks[0] != qs[0] || ks[2] != qs[2] {
            return Err(Error::ShapeMismatch {
                expected: vec![qs[0], ks[1], qs[2]],
                actual: ks.to_vec(),
            });
        }
        let ctx_shape = [self.context_seqlen, ks[1], ks[2]];
        self.k_context.check_shape(&ctx_shape)?;
        self.v_context.check_shape(&ctx_shape)?;
        check_precisions(&[&self.q, &self.k_context, &self.v_context, &self.k_decoded, &self.v_decoded])?;
        check_cu_seqlens(&self.cu_seqlens_q, qs[0], self.max_seqlen_q)?;
        fa2::geometry(qs[1], ks[1], qs[2], self.tile_size, self.softmax_scale, self.q.precision())
    }

    fn segments<'a, T: Compute>(&self, kc: &'a [T], vc: &'a [T], kd: &'a [T], vd: &'a [T], geo: &Geometry) -> Vec<Segment<'a, T>> {
        let row = geo.hk * geo.d;
        let p = self.context_seqlen;
        self.cu_seqlens_q
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| Segment {
                q_start: w[0],
                q_rows: w[1] - w[0],
                pos0: p,
                regions: vec![
                    Region {
                        k: kc,
                        v: vc,
                        rows: p,
                        logical_base: 0,
                        shared: true,
                    },
                    Region {
                        k: &kd[w[0] * row..w[1] * row],
                        v: &vd[w[0] * row..w[1] * row],
                        rows: w[1] - w[0],
                        logical_base: p,
                        shared: false,
                    },
                ],
            })
            .collect()
    }
}

/// Gradients of one two-region call.
#[derive(Debug, Clone, PartialEq)]
pub struct DualKVGrads {
    pub dq: Tensor,
    pub dk_context: Tensor,
    pub dv_context: Tensor,
    pub dk_decoded: Tensor,
    pub dv_decoded: Tensor,
}

/// Shared accumulator for context-tile dK/dV.
///
/// One lock per (context tile, kv head) cell, so every contribution is
/// added exactly once no matter how workers interleave. The element type is
/// the kernel's compute type: `f32` for `F32`/`Bf16Emu` storage, `f64` for
/// `F64` reference runs.
#[derive(Debug)]
pub struct ContextGradScratch<T = f32> {
    context_len: usize,
    kv_heads: usize,
    head_dim: usize,
    tile: usize,
    /// `[n_tiles * H_k]` cells of `(dk, dv)`, each `[tile_len, d]`
    cells: Vec<Mutex<(Vec<T>, Vec<T>)>>,
}

impl<T: Compute> ContextGradScratch<T> {
    pub fn new(context_len: usize, kv_heads: usize, head_dim: usize, tile: usize) -> Self {
        let tile = tile.max(1);
        let n_tiles = context_len.div_ceil(tile);
        let cells = (0..n_tiles * kv_heads)
            .map(|c| {
                let n = c / kv_heads;
                let len = tile.min(context_len - n * tile) * head_dim;
                Mutex::new((vec![T::ZERO; len], vec![T::ZERO; len]))
            })
            .collect();
        Self {
            context_len,
            kv_heads,
            head_dim,
            tile,
            cells,
        }
    }

    /// Scratch preloaded with `[P, H_k, d]` values (rounded into `T`).
    pub fn from_tensors(dk: &Tensor, dv: &Tensor, tile: usize) -> Result<Self> {
        dk.check_same_shape(dv)?;
        if dk.rank() != 3 {
            return Err(Error::InvalidArgument("scratch tensors must be [P, H_k, d]".into()));
        }
        let s = dk.shape();
        let scratch = Self::new(s[0], s[1], s[2], tile);
        for (c, cell) in scratch.cells.iter().enumerate() {
            let (n, g) = (c / s[1], c % s[1]);
            let mut cell = cell.lock().expect("scratch lock");
            let rows = cell.0.len() / s[2].max(1);
            for j in 0..rows {
                for e in 0..s[2] {
                    let idx = [n * scratch.tile + j, g, e];
                    cell.0[j * s[2] + e] = T::from_f64(dk.get(&idx));
                    cell.1[j * s[2] + e] = T::from_f64(dv.get(&idx));
                }
            }
        }
        Ok(scratch)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.context_len, self.kv_heads, self.head_dim]
    }

    /// Adds one tile's `[tile_len, d]` contribution for kv head `g`.
    pub fn accumulate(&self, tile_index: usize, kv_head: usize, dk: &[T], dv: &[T]) {
        let mut cell = self.cells[tile_index * self.kv_heads + kv_head].lock().expect("scratch lock");
        for (a, b) in cell.0.iter_mut().zip(dk) {
            *a += *b;
        }
        for (a, b) in cell.1.iter_mut().zip(dv) {
            *a += *b;
        }
    }

    fn gather(self, out: Precision) -> (Tensor, Tensor) {
        let [p, hk, d] = self.shape();
        let mut dk = vec![0.0; p * hk * d];
        let mut dv = vec![0.0; p * hk * d];
        for (c, cell) in self.cells.into_iter().enumerate() {
            let (n, g) = (c / hk, c % hk);
            let (ck, cv) = cell.into_inner().expect("scratch lock");
            for j in 0..ck.len() / d.max(1) {
                let dst = ((n * self.tile + j) * hk + g) * d;
                for e in 0..d {
                    dk[dst + e] = out.round(ck[j * d + e].to_f64());
                    dv[dst + e] = out.round(cv[j * d + e].to_f64());
                }
            }
        }
        let shape = [p, hk, d];
        (
            Tensor::new(shape, dk, out).expect("scratch shape"),
            Tensor::new(shape, dv, out).expect("scratch shape"),
        )
    }
}

/// Casts the accumulated context gradients once into `out`.
///
/// Taking the scratch by value means no accumulation can still be in
/// flight.
pub fn convert_dkv_context<T: Compute>(scratch: ContextGradScratch<T>, out: Precision) -> (Tensor, Tensor) {
    scratch.gather(out)
}

/// Repeated-bf16 fold `acc = bf16(acc + bf16(c))`, kept only as a precision
/// foil for the scratch accumulator.
pub fn bf16_naive_accumulate(contributions: &[Tensor]) -> Result<Tensor> {
    let first = contributions
        .first()
        .ok_or_else(|| Error::InvalidArgument("no contributions".into()))?;
    let mut acc = vec![0f32; first.len()];
    for c in contributions {
        c.check_same_shape(first)?;
        for (a, &x) in acc.iter_mut().zip(c.data()) {
            *a = bf16_round(*a + bf16_round(x as f32));
        }
    }
    Tensor::from_f32(first.shape(), &acc, Precision::Bf16Emu)
}

/// f32 sum of the contributions followed by one bf16 cast: the scratch
/// accumulator's arithmetic on plain tensors.
pub fn f32_accumulate_then_cast(contributions: &[Tensor]) -> Result<Tensor> {
    let first = contributions
        .first()
        .ok_or_else(|| Error::InvalidArgument("no contributions".into()))?;
    let mut acc = vec![0f32; first.len()];
    for c in contributions {
        c.check_same_shape(first)?;
        for (a, &x) in acc.iter_mut().zip(c.data()) {
            *a += x as f32;
        }
    }
    Tensor::from_f32(first.shape(), &acc, Precision::Bf16Emu)
}

/// Forward: `(O_d [ΣR_i, H, d], lse [H, ΣR_i])`.
pub fn dualkv_fwd(input: &DualKVInput) -> Result<(Tensor, Tensor)> {
    let geo = input.geometry()?;
    if geo.out.computes_in_f64() {
        fwd_impl::<f64>(input, &geo)
    } else {
        fwd_impl::<f32>(input, &geo)
    }
}

fn fwd_impl<T: Compute>(input: &DualKVInput, geo: &Geometry) -> Result<(Tensor, Tensor)> {
    let q = kernel::load::<T>(&input.q);
    let (kc, vc) = (kernel::load::<T>(&input.k_context), kernel::load::<T>(&input.v_context));
    let (kd, vd) = (kernel::load::<T>(&input.k_decoded), kernel::load::<T>(&input.v_decoded));
    let total = input.q.rows();
    let segments = input.segments(&kc, &vc, &kd, &vd, geo);
    let (out, lse) = kernel::forward(geo, &q, &segments, total);
    Ok((
        to_tensor(input.q.shape(), out, geo.out),
        to_tensor(&[geo.h, total], lse, lse_precision(geo.out)),
    ))
}

/// Backward over all five inputs.
///
/// Decoded dK/dV are private to their sequence and cast at each tile
/// epilogue. Context tiles from every sequence are added into one scratch
/// and cast once at the end. With `deterministic` the scratch is folded
/// sequence-major then tile-major on one thread, so results are
/// bit-reproducible; otherwise the fold order follows thread scheduling and
/// may differ at accumulator rounding scale.
pub fn dualkv_bwd(input: &DualKVInput, out: &Tensor, lse: &Tensor, d_out: &Tensor, deterministic: bool) -> Result<DualKVGrads> {
    let geo = input.geometry()?;
    out.check_shape(input.q.shape())?;
    d_out.check_shape(input.q.shape())?;
    lse.check_shape(&[geo.h, input.q.rows()])?;
    if geo.out.computes_in_f64() {
        bwd_impl::<f64>(input, &geo, out, lse, d_out, deterministic)
    } else {
        bwd_impl::<f32>(input, &geo, out, lse, d_out, deterministic)
    }
}

fn bwd_impl<T: Compute>(
    input: &DualKVInput,
    geo: &Geometry,
    out: &Tensor,
    lse: &Tensor,
    d_out: &Tensor,
    deterministic: bool,
) -> Result<DualKVGrads> {
    let q = kernel::load::<T>(&input.q);
    let (kc, vc) = (kernel::load::<T>(&input.k_context), kernel::load::<T>(&input.v_context));
    let (kd, vd) = (kernel::load::<T>(&input.k_decoded), kernel::load::<T>(&input.v_decoded));
    let (o, d_o, l) = (kernel::load::<T>(out), kernel::load::<T>(d_out), kernel::load::<T>(lse));
    let total = input.q.rows();
    let delta = kernel::row_delta(geo, &o, &d_o, total);
    let segments = input.segments(&kc, &vc, &kd, &vd, geo);
    let inputs = BackwardInputs {
        q: &q,
        d_out: &d_o,
        lse: &l,
        delta: &delta,
        total_rows: total,
    };

    let scratch = ContextGradScratch::<T>::new(input.context_seqlen, geo.hk, geo.d, geo.tile);
    let grads = kernel::backward(geo, &inputs, &segments, deterministic, |_, g, tile, dk, dv| {
        scratch.accumulate(tile.index, g, dk, dv)
    });

    let mut dq = vec![T::ZERO; q.len()];
    let mut dk = vec![T::ZERO; kd.len()];
    let mut dv = vec![T::ZERO; vd.len()];
    for g in &grads {
        let seg = &segments[g.segment];
        kernel::scatter_dq(geo, seg, g, &mut dq);
        kernel::scatter_kv(geo, g, seg.q_start, &mut dk, &mut dv);
    }
    let (dk_context, dv_context) = convert_dkv_context(scratch, geo.out);
    Ok(DualKVGrads {
        dq: to_tensor(input.q.shape(), dq, geo.out),
        dk_context,
        dv_context,
        dk_decoded: to_tensor(input.k_decoded.shape(), dk, geo.out),
        dv_decoded: to_tensor(input.v_decoded.shape(), dv, geo.out),
    })
}

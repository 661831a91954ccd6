//! Baseline varlen causal attention: each packed sequence attends to its own
//! keys with the usual self-causal mask, using tiled online softmax.
//!
//! Storage precision picks the compute type: `F64` storage computes in
//! `f64`; `F32` and `Bf16Emu` storage compute and accumulate in `f32` and
//! cast once on output. The backward's workers own disjoint (sequence,
//! kv head) slices, so dQ and dK/dV never race and results do not depend on
//! thread scheduling.

use crate::error::{Error, Result};
use crate::kernel::{self, BackwardInputs, Compute, Geometry, Region, Segment};
use crate::tensor::{Precision, Tensor};

pub const DEFAULT_TILE: usize = 64;

#[derive(Debug, Clone)]
pub struct VarlenBatch {
    /// `[T_total, H, d]`
    pub q: Tensor,
    /// `[T_total, H_k, d]`
    pub k: Tensor,
    pub v: Tensor,
    /// `N + 1` offsets, `cu_seqlens[0] = 0`, last = `T_total`
    pub cu_seqlens: Vec<usize>,
    pub max_seqlen: usize,
    /// `None` means `1/sqrt(d)`
    pub softmax_scale: Option<f64>,
    /// key tile size `B_N`
    pub tile_size: usize,
}

impl VarlenBatch {
    /// Batch with `max_seqlen` derived from the offsets and the default tile.
    pub fn new(q: Tensor, k: Tensor, v: Tensor, cu_seqlens: Vec<usize>) -> Self {
        let max_seqlen = cu_seqlens.windows(2).map(|w| w[1].saturating_sub(w[0])).max().unwrap_or(0);
        Self {
            q,
            k,
            v,
            cu_seqlens,
            max_seqlen,
            softmax_scale: None,
            tile_size: DEFAULT_TILE,
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
        self.cu_seqlens.len().saturating_sub(1)
    }

    pub(crate) fn geometry(&self) -> Result<Geometry> {
        let (qs, ks) = (self.q.shape(), self.k.shape());
        if qs.len() != 3 || ks.len() != 3 {
            return Err(Error::InvalidArgument("q, k, v must be [tokens, heads, dim]".into()));
        }
        self.v.check_shape(ks)?;
        if ks[0] != qs[0] || ks[2] != qs[2] {
            return Err(Error::ShapeMismatch {
                expected: vec![qs[0], ks[1], qs[2]],
                actual: ks.to_vec(),
            });
        }
        check_precisions(&[&self.q, &self.k, &self.v])?;
        check_cu_seqlens(&self.cu_seqlens, qs[0], self.max_seqlen)?;
        geometry(qs[1], ks[1], qs[2], self.tile_size, self.softmax_scale, self.q.precision())
    }

    fn segments<'a, T: Compute>(&self, k: &'a [T], v: &'a [T], geo: &Geometry) -> Vec<Segment<'a, T>> {
        let row = geo.hk * geo.d;
        self.cu_seqlens
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| Segment {
                q_start: w[0],
                q_rows: w[1] - w[0],
                pos0: 0,
                regions: vec![Region {
                    k: &k[w[0] * row..w[1] * row],
                    v: &v[w[0] * row..w[1] * row],
                    rows: w[1] - w[0],
                    logical_base: 0,
                    shared: false,
                }],
            })
            .collect()
    }
}

pub(crate) fn geometry(h: usize, hk: usize, d: usize, tile: usize, scale: Option<f64>, out: Precision) -> Result<Geometry> {
    if d == 0 || h == 0 {
        return Err(Error::InvalidArgument("heads and head dim must be positive".into()));
    }
    if hk == 0 || !h.is_multiple_of(hk) {
        return Err(Error::InvalidArgument(format!("query heads {h} not a multiple of kv heads {hk}")));
    }
    if tile == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    Ok(Geometry {
        h,
        hk,
        d,
        tile,
        scale: scale.unwrap_or(1.0 / (d as f64).sqrt()),
        out,
    })
}

pub(crate) fn check_precisions(ts: &[&Tensor]) -> Result<()> {
    let p = ts[0].precision();
    if let Some(bad) = ts.iter().find(|t| t.precision() != p) {
        return Err(Error::PrecisionMismatch(format!("{p} vs {}", bad.precision())));
    }
    Ok(())
}

pub(crate) fn check_cu_seqlens(cu: &[usize], total: usize, max_seqlen: usize) -> Result<()> {
    match (cu.first(), cu.last()) {
        (Some(0), Some(&last)) if last == total => {}
        _ => {
            return Err(Error::InvalidSeqlens(format!(
                "offsets {cu:?} must start at 0 and end at {total}"
            )))
        }
    }
    for w in cu.windows(2) {
        if w[1] < w[0] {
            return Err(Error::InvalidSeqlens(format!("offsets {cu:?} decrease")));
        }
        if w[1] - w[0] > max_seqlen {
            return Err(Error::InvalidSeqlens(format!(
                "sequence of length {} exceeds max_seqlen {max_seqlen}",
                w[1] - w[0]
            )));
        }
    }
    Ok(())
}

pub(crate) fn lse_precision(p: Precision) -> Precision {
    if p.computes_in_f64() {
        Precision::F64
    } else {
        Precision::F32
    }
}

pub(crate) fn to_tensor<T: Compute>(shape: &[usize], data: Vec<T>, precision: Precision) -> Tensor {
    Tensor::new(shape.to_vec(), data.into_iter().map(T::to_f64).collect(), precision).expect("kernel output shape")
}

/// Forward: `(O [T_total, H, d], lse [H, T_total])`.
///
/// Rows of zero-length sequences do not exist; malformed offsets are an
/// error.
pub fn fa2_varlen_fwd(batch: &VarlenBatch) -> Result<(Tensor, Tensor)> {
    let geo = batch.geometry()?;
    if geo.out.computes_in_f64() {
        fwd_impl::<f64>(batch, &geo)
    } else {
        fwd_impl::<f32>(batch, &geo)
    }
}

fn fwd_impl<T: Compute>(batch: &VarlenBatch, geo: &Geometry) -> Result<(Tensor, Tensor)> {
    let (q, k, v) = (kernel::load::<T>(&batch.q), kernel::load::<T>(&batch.k), kernel::load::<T>(&batch.v));
    let total = batch.q.rows();
    let segments = batch.segments(&k, &v, geo);
    let (out, lse) = kernel::forward(geo, &q, &segments, total);
    Ok((
        to_tensor(batch.q.shape(), out, geo.out),
        to_tensor(&[geo.h, total], lse, lse_precision(geo.out)),
    ))
}

/// Backward: `(dQ, dK, dV)` in the batch's storage precision.
///
/// dQ is accumulated across key tiles in the compute type and cast once;
/// dK/dV are accumulated per key tile (summing the G query heads of each kv
/// head) and cast once at the tile epilogue.
pub fn fa2_varlen_bwd(batch: &VarlenBatch, out: &Tensor, lse: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let geo = batch.geometry()?;
    out.check_shape(batch.q.shape())?;
    d_out.check_shape(batch.q.shape())?;
    lse.check_shape(&[geo.h, batch.q.rows()])?;
    if geo.out.computes_in_f64() {
        bwd_impl::<f64>(batch, &geo, out, lse, d_out)
    } else {
        bwd_impl::<f32>(batch, &geo, out, lse, d_out)
    }
}

fn bwd_impl<T: Compute>(batch: &VarlenBatch, geo: &Geometry, out: &Tensor, lse: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (q, k, v) = (kernel::load::<T>(&batch.q), kernel::load::<T>(&batch.k), kernel::load::<T>(&batch.v));
    let (o, d_o, l) = (kernel::load::<T>(out), kernel::load::<T>(d_out), kernel::load::<T>(lse));
    let total = batch.q.rows();
    let delta = kernel::row_delta(geo, &o, &d_o, total);
    let segments = batch.segments(&k, &v, geo);
    let inputs = BackwardInputs {
        q: &q,
        d_out: &d_o,
        lse: &l,
        delta: &delta,
        total_rows: total,
    };
    let grads = kernel::backward(geo, &inputs, &segments, false, |_, _, _, _, _| {
        unreachable!("self-attention has no shared region")
    });

    let mut dq = vec![T::ZERO; q.len()];
    let mut dk = vec![T::ZERO; k.len()];
    let mut dv = vec![T::ZERO; v.len()];
    for g in &grads {
        let seg = &segments[g.segment];
        kernel::scatter_dq(geo, seg, g, &mut dq);
        kernel::scatter_kv(geo, g, seg.q_start, &mut dk, &mut dv);
    }
    Ok((
        to_tensor(batch.q.shape(), dq, geo.out),
        to_tensor(batch.k.shape(), dk, geo.out),
        to_tensor(batch.v.shape(), dv, geo.out),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refattn::varlen_reference;
    use crate::tensor::{allclose, seeded_unit};

    fn random_batch(lens: &[usize], h: usize, hk: usize, d: usize, seed: u64) -> VarlenBatch {
        let total: usize = lens.iter().sum();
        let mut cu = vec![0];
        for l in lens {
            cu.push(cu.last().unwrap() + l);
        }
        VarlenBatch::new(
            seeded_unit(&[total, h, d], seed),
            seeded_unit(&[total, hk, d], seed + 1),
            seeded_unit(&[total, hk, d], seed + 2),
            cu,
        )
    }

    fn oracle(batch: &VarlenBatch, d_out: &Tensor, saved: Option<(&Tensor, &Tensor)>) -> [Tensor; 5] {
        let r = varlen_reference(batch, d_out, saved).unwrap();
        [r.out, r.lse, r.dq, r.dk, r.dv]
    }

    #[test]
    fn single_tile_equals_dense_pass() {
        let batch = random_batch(&[5], 2, 1, 3, 1).with_tile(8);
        let (o, _) = fa2_varlen_fwd(&batch).unwrap();
        let [ro, ..] = oracle(&batch, &Tensor::zeros([5, 2, 3], Precision::F64), None);
        assert!(o.max_abs_diff(&ro).unwrap() < 1e-14);
    }

    #[test]
    fn two_tiles_match_oracle_in_f64() {
        let batch = random_batch(&[8], 2, 2, 4, 3).with_tile(4);
        let (o, lse) = fa2_varlen_fwd(&batch).unwrap();
        let [ro, rl, ..] = oracle(&batch, &Tensor::zeros([8, 2, 4], Precision::F64), None);
        assert!(o.max_abs_diff(&ro).unwrap() < 1e-12);
        assert!(lse.max_abs_diff(&rl).unwrap() < 1e-12);
    }

    #[test]
    fn empty_sequence_contributes_nothing() {
        let batch = random_batch(&[5, 0, 7], 1, 1, 4, 8).with_tile(3);
        assert_eq!(batch.cu_seqlens, vec![0, 5, 5, 12]);
        let (o, _) = fa2_varlen_fwd(&batch).unwrap();
        let [ro, ..] = oracle(&batch, &Tensor::zeros([12, 1, 4], Precision::F64), None);
        assert!(o.max_abs_diff(&ro).unwrap() < 1e-12);
    }

    #[test]
    fn malformed_offsets_are_rejected() {
        let mut batch = random_batch(&[4, 4], 1, 1, 2, 0);
        batch.cu_seqlens = vec![0, 5, 3, 8];
        assert!(matches!(fa2_varlen_fwd(&batch), Err(Error::InvalidSeqlens(_))));
        batch.cu_seqlens = vec![0, 4, 7];
        assert!(matches!(fa2_varlen_fwd(&batch), Err(Error::InvalidSeqlens(_))));
        batch.cu_seqlens = vec![0, 4, 8];
        batch.max_seqlen = 3;
        assert!(matches!(fa2_varlen_fwd(&batch), Err(Error::InvalidSeqlens(_))));
    }

    #[test]
    fn backward_matches_oracle_in_f64() {
        let batch = random_batch(&[6, 9], 4, 2, 8, 17).with_tile(4);
        let d_out = seeded_unit(&[15, 4, 8], 99);
        let (o, lse) = fa2_varlen_fwd(&batch).unwrap();
        let (dq, dk, dv) = fa2_varlen_bwd(&batch, &o, &lse, &d_out).unwrap();
        let [_, _, rdq, rdk, rdv] = oracle(&batch, &d_out, None);
        assert!(dq.max_abs_diff(&rdq).unwrap() < 1e-10);
        assert!(dk.max_abs_diff(&rdk).unwrap() < 1e-10);
        assert!(dv.max_abs_diff(&rdv).unwrap() < 1e-10);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let batch = random_batch(&[3, 4], 2, 1, 2, 5).with_tile(2);
        let (o, lse) = fa2_varlen_fwd(&batch).unwrap();
        let (dq, dk, dv) = fa2_varlen_bwd(&batch, &o, &lse, &Tensor::zeros([7, 2, 2], Precision::F64)).unwrap();
        assert_eq!(dq.max_abs() + dk.max_abs() + dv.max_abs(), 0.0);
    }

    #[test]
    fn bf16_storage_within_half_precision_tolerance() {
        let batch64 = random_batch(&[6, 9], 4, 2, 8, 17).with_tile(4);
        let cast = |t: &Tensor| t.cast(Precision::Bf16Emu);
        let batch = VarlenBatch {
            q: cast(&batch64.q),
            k: cast(&batch64.k),
            v: cast(&batch64.v),
            ..batch64.clone()
        };
        let d_out = cast(&seeded_unit(&[15, 4, 8], 99));
        let (o, lse) = fa2_varlen_fwd(&batch).unwrap();
        assert_eq!(o.precision(), Precision::Bf16Emu);
        let (dq, dk, dv) = fa2_varlen_bwd(&batch, &o, &lse, &d_out).unwrap();
        let [ro, _, rdq, rdk, rdv] = oracle(&batch, &d_out, Some((&o, &lse)));
        for (got, want) in [(&o, ro), (&dq, rdq), (&dk, rdk), (&dv, rdv)] {
            assert!(allclose(got, &want.cast(Precision::Bf16Emu), 1e-3, 1e-3).unwrap());
        }
    }

    #[test]
    fn tile_size_independence_in_f32() {
        let base = random_batch(&[7, 11], 2, 1, 4, 40);
        let f32_batch = VarlenBatch {
            q: base.q.cast(Precision::F32),
            k: base.k.cast(Precision::F32),
            v: base.v.cast(Precision::F32),
            ..base.clone()
        };
        let reference = fa2_varlen_fwd(&f32_batch.clone().with_tile(11)).unwrap().0;
        for bn in [1, 2, 4, 8] {
            let o = fa2_varlen_fwd(&f32_batch.clone().with_tile(bn)).unwrap().0;
            assert!(o.max_abs_diff(&reference).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn concatenated_batches_concatenate_outputs() {
        let a = random_batch(&[3, 5], 2, 1, 2, 70).with_tile(2);
        let b = random_batch(&[4], 2, 1, 2, 80).with_tile(2);
        let joined = VarlenBatch::new(
            Tensor::concat_rows(&[&a.q, &b.q]).unwrap(),
            Tensor::concat_rows(&[&a.k, &b.k]).unwrap(),
            Tensor::concat_rows(&[&a.v, &b.v]).unwrap(),
            vec![0, 3, 8, 12],
        )
        .with_tile(2);
        let (oa, _) = fa2_varlen_fwd(&a).unwrap();
        let (ob, _) = fa2_varlen_fwd(&b).unwrap();
        let (oj, _) = fa2_varlen_fwd(&joined).unwrap();
        assert_eq!(oj, Tensor::concat_rows(&[&oa, &ob]).unwrap());
    }
}

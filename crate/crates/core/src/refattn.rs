//! Dense causal attention in `f64`: the ground truth every kernel is tested
//! against.
//!
//! The full score matrix is materialized; nothing is tiled. Query row `r` has
//! logical position `causal_offset + r` and sees key `j` iff
//! `j <= causal_offset + r`. GQA maps query head `h` to kv head
//! `h / (H / H_k)`.

use std::ops::Range;

use crate::dualkv::{DualKVGrads, DualKVInput};
use crate::error::{Error, Result};
use crate::fa2::VarlenBatch;
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone)]
pub struct DenseAttentionCase {
    /// `[S_q, H, d]`
    pub q: Tensor,
    /// `[S_k, H_k, d]`
    pub k: Tensor,
    /// `[S_k, H_k, d]`
    pub v: Tensor,
    pub softmax_scale: f64,
    pub causal_offset: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    s_q: usize,
    s_k: usize,
    h: usize,
    hk: usize,
    d: usize,
}

impl Dims {
    fn group(&self) -> usize {
        self.h / self.hk
    }
    fn q_at(&self, r: usize, h: usize) -> usize {
        (r * self.h + h) * self.d
    }
    fn kv_at(&self, j: usize, g: usize) -> usize {
        (j * self.hk + g) * self.d
    }
}

impl DenseAttentionCase {
    /// Case with the default `1/sqrt(d)` scale.
    pub fn new(q: Tensor, k: Tensor, v: Tensor, causal_offset: usize) -> Self {
        let d = q.shape().get(2).copied().unwrap_or(1).max(1);
        Self {
            q,
            k,
            v,
            softmax_scale: 1.0 / (d as f64).sqrt(),
            causal_offset,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.softmax_scale = scale;
        self
    }

    fn dims(&self) -> Result<Dims> {
        let qs = self.q.shape();
        let ks = self.k.shape();
        if qs.len() != 3 || ks.len() != 3 {
            return Err(Error::InvalidArgument("q, k, v must be rank 3".into()));
        }
        self.v.check_shape(ks)?;
        let dims = Dims {
            s_q: qs[0],
            s_k: ks[0],
            h: qs[1],
            hk: ks[1],
            d: qs[2],
        };
        if ks[2] != dims.d {
            return Err(Error::ShapeMismatch {
                expected: vec![dims.s_k, dims.hk, dims.d],
                actual: ks.to_vec(),
            });
        }
        if dims.hk == 0 || !dims.h.is_multiple_of(dims.hk) {
            return Err(Error::InvalidArgument(format!(
                "query heads {} not a multiple of kv heads {}",
                dims.h, dims.hk
            )));
        }
        Ok(dims)
    }

    /// Number of keys visible to query row `r`.
    fn visible(&self, dims: &Dims, r: usize) -> usize {
        (self.causal_offset + r + 1).min(dims.s_k)
    }

    fn scores(&self, dims: &Dims, r: usize, h: usize) -> Vec<f64> {
        let q = self.q.data();
        let k = self.k.data();
        let g = h / dims.group();
        let qr = &q[dims.q_at(r, h)..][..dims.d];
        (0..self.visible(dims, r))
            .map(|j| {
                let kj = &k[dims.kv_at(j, g)..][..dims.d];
                self.softmax_scale * qr.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

/// Dense forward: returns `(O [S_q, H, d], lse [H, S_q])`.
pub fn ref_attention_fwd(case: &DenseAttentionCase) -> Result<(Tensor, Tensor)> {
    let dims = case.dims()?;
    let v = case.v.data();
    let mut out = vec![0.0; dims.s_q * dims.h * dims.d];
    let mut lse = vec![0.0; dims.h * dims.s_q];
    for r in 0..dims.s_q {
        if case.visible(&dims, r) == 0 {
            return Err(Error::NoVisibleKeys { row: r });
        }
        for h in 0..dims.h {
            let g = h / dims.group();
            let s = case.scores(&dims, r, h);
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = s.iter().map(|x| (x - m).exp()).sum();
            let l = m + sum.ln();
            lse[h * dims.s_q + r] = l;
            let o = &mut out[dims.q_at(r, h)..][..dims.d];
            for (j, sj) in s.iter().enumerate() {
                let p = (sj - l).exp();
                let vj = &v[dims.kv_at(j, g)..][..dims.d];
                for (oc, vc) in o.iter_mut().zip(vj) {
                    *oc += p * vc;
                }
            }
        }
    }
    Ok((
        Tensor::new([dims.s_q, dims.h, dims.d], out, Precision::F64)?,
        Tensor::new([dims.h, dims.s_q], lse, Precision::F64)?,
    ))
}

/// Dense analytic backward: returns `(dQ, dK, dV)`.
///
/// `D = rowsum(dO * O)`, `dV = P^T dO`, `dP = dO V^T`, `dS = P * (dP - D)`,
/// `dK = scale * dS^T Q`, `dQ = scale * dS K`; GQA sums dK/dV over the query
/// heads of each kv head.
pub fn ref_attention_bwd(
    case: &DenseAttentionCase,
    out: &Tensor,
    lse: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dims = case.dims()?;
    out.check_shape(case.q.shape())?;
    d_out.check_shape(case.q.shape())?;
    lse.check_shape(&[dims.h, dims.s_q])?;
    let (q, k, v) = (case.q.data(), case.k.data(), case.v.data());
    let (o, d_o, l) = (out.data(), d_out.data(), lse.data());
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let scale = case.softmax_scale;
    for r in 0..dims.s_q {
        for h in 0..dims.h {
            let g = h / dims.group();
            let qo = dims.q_at(r, h);
            let d_row: f64 = (0..dims.d).map(|c| d_o[qo + c] * o[qo + c]).sum();
            let s = case.scores(&dims, r, h);
            for (j, sj) in s.iter().enumerate() {
                let p = (sj - l[h * dims.s_q + r]).exp();
                let ko = dims.kv_at(j, g);
                let dp: f64 = (0..dims.d).map(|c| d_o[qo + c] * v[ko + c]).sum();
                let ds = p * (dp - d_row);
                for c in 0..dims.d {
                    dv[ko + c] += p * d_o[qo + c];
                    dk[ko + c] += scale * ds * q[qo + c];
                    dq[qo + c] += scale * ds * k[ko + c];
                }
            }
        }
    }
    Ok((
        Tensor::new(case.q.shape().to_vec(), dq, Precision::F64)?,
        Tensor::new(case.k.shape().to_vec(), dk, Precision::F64)?,
        Tensor::new(case.v.shape().to_vec(), dv, Precision::F64)?,
    ))
}

/// Central finite-difference gradient of a scalar function, in `f64`.
pub fn finite_diff_grad(loss_fn: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let x = x.cast(Precision::F64);
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        probe.set_flat(i, x0 + step);
        let up = loss_fn(&probe);
        probe.set_flat(i, x0 - step);
        let down = loss_fn(&probe);
        probe.set_flat(i, x0);
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad, Precision::F64).expect("same shape as x")
}

/// Frobenius inner product of two same-shaped tensors.
pub fn frobenius(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Columns `range` of an `[H, T]` lse tensor, as `f64`.
pub(crate) fn lse_cols(lse: &Tensor, range: Range<usize>) -> Tensor {
    let (h, t) = (lse.shape()[0], lse.shape()[1]);
    let mut data = Vec::with_capacity(h * range.len());
    for hh in 0..h {
        data.extend_from_slice(&lse.data()[hh * t + range.start..hh * t + range.end]);
    }
    Tensor::new([h, range.len()], data, Precision::F64).expect("h * len values")
}

/// Concatenates `[H, S_i]` tensors along the second axis.
pub(crate) fn concat_cols(parts: &[Tensor], h: usize) -> Tensor {
    let total: usize = parts.iter().map(|t| t.shape()[1]).sum();
    let mut data = vec![0.0; h * total];
    let mut off = 0;
    for t in parts {
        let s = t.shape()[1];
        for hh in 0..h {
            data[hh * total + off..][..s].copy_from_slice(&t.data()[hh * s..][..s]);
        }
        off += s;
    }
    Tensor::new([h, total], data, Precision::F64).expect("h * total values")
}

/// Row concatenation that yields zeros of shape `like` for no parts.
pub(crate) fn concat(parts: &[Tensor], like: &[usize]) -> Tensor {
    if parts.is_empty() {
        Tensor::zeros(like, Precision::F64)
    } else {
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>()).expect("same trailing shape")
    }
}

fn as_f64(t: &Tensor) -> Tensor {
    t.cast(Precision::F64)
}

/// Dense results for a packed batch, re-packed to the kernel layout.
#[derive(Debug, Clone)]
pub struct VarlenReference {
    pub out: Tensor,
    pub lse: Tensor,
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
}

/// Runs the dense oracle on each sequence of `batch` independently.
///
/// With `saved`, the backward uses that `(O, lse)` instead of the oracle's
/// own, so a low-precision kernel's stored forward is not charged to its
/// backward.
pub fn varlen_reference(batch: &VarlenBatch, d_out: &Tensor, saved: Option<(&Tensor, &Tensor)>) -> Result<VarlenReference> {
    let h = batch.q.shape().get(1).copied().unwrap_or(0);
    let mut parts: [Vec<Tensor>; 5] = Default::default();
    for w in batch.cu_seqlens.windows(2).filter(|w| w[1] > w[0]) {
        let rows = w[0]..w[1];
        let mut case = DenseAttentionCase::new(
            as_f64(&batch.q.slice_rows(rows.clone())),
            as_f64(&batch.k.slice_rows(rows.clone())),
            as_f64(&batch.v.slice_rows(rows.clone())),
            0,
        );
        if let Some(s) = batch.softmax_scale {
            case = case.with_scale(s);
        }
        let (o, l) = ref_attention_fwd(&case)?;
        let (bo, bl) = match saved {
            Some((so, sl)) => (as_f64(&so.slice_rows(rows.clone())), lse_cols(sl, rows.clone())),
            None => (o.clone(), l.clone()),
        };
        let (dq, dk, dv) = ref_attention_bwd(&case, &bo, &bl, &as_f64(&d_out.slice_rows(rows)))?;
        for (slot, t) in parts.iter_mut().zip([o, l, dq, dk, dv]) {
            slot.push(t);
        }
    }
    let [o, l, dq, dk, dv] = parts;
    Ok(VarlenReference {
        out: concat(&o, batch.q.shape()),
        lse: concat_cols(&l, h),
        dq: concat(&dq, batch.q.shape()),
        dk: concat(&dk, batch.k.shape()),
        dv: concat(&dv, batch.v.shape()),
    })
}

#[derive(Debug, Clone)]
pub struct SharedPromptReference {
    pub out: Tensor,
    pub lse: Tensor,
    pub grads: DualKVGrads,
}

/// Dense oracle for the two-region layout: each sequence attends to the
/// explicit concatenation `[K_c ; K_d^(i)]` at causal offset `P`, and the
/// context gradients are the explicit sum over sequences.
pub fn shared_prompt_reference(
    input: &DualKVInput,
    d_out: &Tensor,
    saved: Option<(&Tensor, &Tensor)>,
) -> Result<SharedPromptReference> {
    let p = input.context_seqlen;
    let h = input.q.shape().get(1).copied().unwrap_or(0);
    let (mut outs, mut lses) = (Vec::new(), Vec::new());
    let (mut dqs, mut dkd, mut dvd) = (Vec::new(), Vec::new(), Vec::new());
    let mut dkc = vec![0.0; input.k_context.len()];
    let mut dvc = vec![0.0; input.v_context.len()];
    let (kc, vc) = (as_f64(&input.k_context), as_f64(&input.v_context));
    for w in input.cu_seqlens_q.windows(2).filter(|w| w[1] > w[0]) {
        let rows = w[0]..w[1];
        let kcat = Tensor::concat_rows(&[&kc, &as_f64(&input.k_decoded.slice_rows(rows.clone()))])?;
        let vcat = Tensor::concat_rows(&[&vc, &as_f64(&input.v_decoded.slice_rows(rows.clone()))])?;
        let mut case = DenseAttentionCase::new(as_f64(&input.q.slice_rows(rows.clone())), kcat, vcat, p);
        if let Some(s) = input.softmax_scale {
            case = case.with_scale(s);
        }
        let (o, l) = ref_attention_fwd(&case)?;
        let (bo, bl) = match saved {
            Some((so, sl)) => (as_f64(&so.slice_rows(rows.clone())), lse_cols(sl, rows.clone())),
            None => (o.clone(), l.clone()),
        };
        let (dq, dk, dv) = ref_attention_bwd(&case, &bo, &bl, &as_f64(&d_out.slice_rows(rows.clone())))?;
        for (acc, g) in [(&mut dkc, &dk), (&mut dvc, &dv)] {
            for (a, x) in acc.iter_mut().zip(g.data()) {
                *a += x;
            }
        }
        outs.push(o);
        lses.push(l);
        dqs.push(dq);
        dkd.push(dk.slice_rows(p..p + rows.len()));
        dvd.push(dv.slice_rows(p..p + rows.len()));
    }
    Ok(SharedPromptReference {
        out: concat(&outs, input.q.shape()),
        lse: concat_cols(&lses, h),
        grads: DualKVGrads {
            dq: concat(&dqs, input.q.shape()),
            dk_context: Tensor::new(input.k_context.shape().to_vec(), dkc, Precision::F64)?,
            dv_context: Tensor::new(input.v_context.shape().to_vec(), dvc, Precision::F64)?,
            dk_decoded: concat(&dkd, input.k_decoded.shape()),
            dv_decoded: concat(&dvd, input.v_decoded.shape()),
        },
    })
}

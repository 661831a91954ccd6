use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, Axis};

use super::{rmsnorm_bwd, rmsnorm_with_inv, rope, rope_inverse, ModelConfig, ModelGrads, ModelParams, RMS_EPS};
use crate::dualkv::{dualkv_bwd, dualkv_fwd, DualKVInput};
use crate::error::{Error, Result};
use crate::fa2::{fa2_varlen_bwd, fa2_varlen_fwd, VarlenBatch};
use crate::packing::{PackedBatch, PackingMode, TokenId};
use crate::tensor::{Precision, Tensor};

/// Attention backend; must match the batch's packing mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// baseline varlen kernel over the replicated layout
    Standard,
    /// prompt self-attention (Call 1) plus two-region attention (Call 2)
    DualKV,
}

impl Backend {
    pub fn for_mode(mode: PackingMode) -> Self {
        match mode {
            PackingMode::Standard => Backend::Standard,
            PackingMode::DualKV => Backend::DualKV,
        }
    }

    fn mode(self) -> PackingMode {
        match self {
            Backend::Standard => PackingMode::Standard,
            Backend::DualKV => PackingMode::DualKV,
        }
    }
}

/// Context-gradient contributions of the two calls for one group in one
/// layer. Their sum is the prompt rows' dK/dV.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub layer: usize,
    pub prompt_id: String,
    pub dk_call1: Tensor,
    pub dk_call2: Tensor,
    pub dv_call1: Tensor,
    pub dv_call2: Tensor,
    /// prompt rows of the total dK fed to the projection backward
    pub dk_total: Tensor,
}

/// Token rows, logical positions and loss targets of a batch.
struct Plan {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    /// `(logit row, target token, advantage)`
    targets: Vec<(usize, TokenId, f64)>,
    /// Standard: global varlen offsets. Shared-prompt: per-group calls.
    cu_seqlens: Vec<usize>,
    calls: Vec<GroupCall>,
}

struct GroupCall {
    prompt_id: String,
    prompt: Range<usize>,
    responses: Range<usize>,
    cu_seqlens: Vec<usize>,
}

fn plan(cfg: &ModelConfig, batch: &PackedBatch, backend: Backend) -> Result<Plan> {
    if batch.mode != backend.mode() {
        return Err(Error::ModeMismatch {
            batch: batch.mode.to_string(),
            backend: format!("{backend:?}"),
        });
    }
    if batch.total_tokens != batch.token_ids.len() {
        return Err(Error::InvalidArgument("total_tokens disagrees with the token stream".into()));
    }
    if let Some(bad) = batch.token_ids.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary of {}", cfg.vocab)));
    }
    let mut positions = vec![0; batch.total_tokens];
    let mut targets = Vec::new();
    let mut calls = Vec::new();
    let mut cursor = 0;
    for g in &batch.groups {
        if g.token_offset != cursor || g.cu_seqlens.first() != Some(&0) || g.advantages.len() != g.n() {
            return Err(Error::InvalidArgument(format!("malformed layout for group `{}`", g.prompt_id)));
        }
        let p = g.prompt_len;
        let tok = |row: usize| batch.token_ids[row];
        match g.context_span {
            None => {
                for (w, &adv) in g.cu_seqlens.windows(2).zip(&g.advantages) {
                    let start = cursor + w[0];
                    for j in 0..w[1] - w[0] {
                        positions[start + j] = j;
                        // next-token targets over the response part only
                        if j >= p && j > 0 {
                            targets.push((start + j - 1, tok(start + j), adv));
                        }
                    }
                }
            }
            Some(span) => {
                let base = cursor + span;
                for (j, pos) in positions[cursor..base].iter_mut().enumerate() {
                    *pos = j;
                }
                for (w, &adv) in g.cu_seqlens.windows(2).zip(&g.advantages) {
                    for k in 0..w[1] - w[0] {
                        let row = base + w[0] + k;
                        positions[row] = p + k;
                        // the first response token is predicted by the shared last prompt row
                        let prev = if k == 0 { (p > 0).then(|| cursor + p - 1) } else { Some(row - 1) };
                        if let Some(prev) = prev {
                            targets.push((prev, tok(row), adv));
                        }
                    }
                }
                calls.push(GroupCall {
                    prompt_id: g.prompt_id.clone(),
                    prompt: cursor..base,
                    responses: base..base + g.cu_seqlens.last().copied().unwrap_or(0),
                    cu_seqlens: g.cu_seqlens.clone(),
                });
            }
        }
        cursor += g.token_len();
    }
    if cursor != batch.total_tokens {
        return Err(Error::InvalidArgument("group layouts do not cover the token stream".into()));
    }
    Ok(Plan {
        tokens: batch.token_ids.clone(),
        positions,
        targets,
        cu_seqlens: batch.global_cu_seqlens(),
        calls,
    })
}

struct LayerCache {
    x: Array2<f64>,
    a: Array2<f64>,
    inv1: Array1<f64>,
    /// rotated q, k and plain v, `[T, heads, d]`
    q: Tensor,
    k: Tensor,
    v: Tensor,
    o: Tensor,
    /// one lse per attention call, in call order
    lse: Vec<Tensor>,
    x1: Array2<f64>,
    b: Array2<f64>,
    inv2: Array1<f64>,
    u: Array2<f64>,
    w: Array2<f64>,
    s: Array2<f64>,
}

pub struct ForwardCache {
    plan: Plan,
    layers: Vec<LayerCache>,
    x_final: Array2<f64>,
    inv_final: Array1<f64>,
    f: Array2<f64>,
}

impl ForwardCache {
    /// Residual stream after each layer, `[T, D]`.
    pub fn hidden_states(&self) -> Vec<&Array2<f64>> {
        self.layers
            .iter()
            .skip(1)
            .map(|c| &c.x)
            .chain(std::iter::once(&self.x_final))
            .collect()
    }

    pub fn positions(&self) -> &[usize] {
        &self.plan.positions
    }
}

pub struct ModelOutput {
    /// `[T, V]`
    pub logits: Array2<f64>,
    pub cache: ForwardCache,
}

fn tensor3(a: &Array2<f64>, heads: usize, d: usize) -> Tensor {
    Tensor::new([a.nrows(), heads, d], a.iter().copied().collect(), Precision::F64).expect("projection shape")
}

fn tensor3_from(a: Array3<f64>) -> Tensor {
    let (t, h, d) = a.dim();
    Tensor::new([t, h, d], a.iter().copied().collect(), Precision::F64).expect("projection shape")
}

fn array3(t: &Tensor) -> Array3<f64> {
    let s = t.shape();
    Array3::from_shape_vec((s[0], s[1], s[2]), t.data().to_vec()).expect("rank-3 tensor")
}

fn flat(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_vec((t.rows(), t.row_len()), t.data().to_vec()).expect("rank-3 tensor")
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

fn attention_fwd(cfg: &ModelConfig, plan: &Plan, backend: Backend, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    match backend {
        Backend::Standard => {
            let batch = VarlenBatch::new(q.clone(), k.clone(), v.clone(), plan.cu_seqlens.clone()).with_tile(cfg.tile_size);
            let (o, lse) = fa2_varlen_fwd(&batch)?;
            Ok((o, vec![lse]))
        }
        Backend::DualKV => {
            let mut parts = Vec::new();
            let mut lses = Vec::new();
            for call in &plan.calls {
                let (c1, c2) = group_inputs(cfg, call, q, k, v);
                let (o_c, lse_c) = fa2_varlen_fwd(&c1)?;
                let (o_d, lse_d) = dualkv_fwd(&c2)?;
                parts.push(o_c);
                parts.push(o_d);
                lses.push(lse_c);
                lses.push(lse_d);
            }
            let o = if parts.is_empty() {
                Tensor::zeros(q.shape(), Precision::F64)
            } else {
                Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?
            };
            Ok((o, lses))
        }
    }
}

/// Zero-copy split at `P` in spirit: Call 1 sees the prompt rows, Call 2 the
/// response queries plus prompt KV and response KV.
fn group_inputs(cfg: &ModelConfig, call: &GroupCall, q: &Tensor, k: &Tensor, v: &Tensor) -> (VarlenBatch, DualKVInput) {
    let (pr, rr) = (call.prompt.clone(), call.responses.clone());
    let c1 = VarlenBatch::new(q.slice_rows(pr.clone()), k.slice_rows(pr.clone()), v.slice_rows(pr.clone()), vec![0, pr.len()]).with_tile(cfg.tile_size);
    let c2 = DualKVInput::new(
        q.slice_rows(rr.clone()),
        k.slice_rows(pr.clone()),
        v.slice_rows(pr),
        k.slice_rows(rr.clone()),
        v.slice_rows(rr),
        call.cu_seqlens.clone(),
    )
    .with_tile(cfg.tile_size);
    (c1, c2)
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(), Precision::F64).expect("same shape")
}

/// Returns `(dq, dk, dv)` with respect to the rotated q, k.
fn attention_bwd(
    cfg: &ModelConfig,
    plan: &Plan,
    backend: Backend,
    c: &LayerCache,
    d_o: &Tensor,
    layer: usize,
    traces: &mut Vec<AttentionTrace>,
) -> Result<(Tensor, Tensor, Tensor)> {
    match backend {
        Backend::Standard => {
            let batch = VarlenBatch::new(c.q.clone(), c.k.clone(), c.v.clone(), plan.cu_seqlens.clone()).with_tile(cfg.tile_size);
            fa2_varlen_bwd(&batch, &c.o, &c.lse[0], d_o)
        }
        Backend::DualKV => {
            let (mut dq, mut dk, mut dv) = (Vec::new(), Vec::new(), Vec::new());
            for (gi, call) in plan.calls.iter().enumerate() {
                let (c1, c2) = group_inputs(cfg, call, &c.q, &c.k, &c.v);
                let (pr, rr) = (call.prompt.clone(), call.responses.clone());
                // Call 2 first, then Call 1; the prompt-row gradients are the sum of both
                let g2 = dualkv_bwd(&c2, &c.o.slice_rows(rr.clone()), &c.lse[2 * gi + 1], &d_o.slice_rows(rr), true)?;
                let (dq_c, dk_c1, dv_c1) = fa2_varlen_bwd(&c1, &c.o.slice_rows(pr.clone()), &c.lse[2 * gi], &d_o.slice_rows(pr))?;
                let dk_c = add(&dk_c1, &g2.dk_context);
                let dv_c = add(&dv_c1, &g2.dv_context);
                traces.push(AttentionTrace {
                    layer,
                    prompt_id: call.prompt_id.clone(),
                    dk_call1: dk_c1,
                    dk_call2: g2.dk_context,
                    dv_call1: dv_c1,
                    dv_call2: g2.dv_context,
                    dk_total: dk_c.clone(),
                });
                dq.extend([dq_c, g2.dq]);
                dk.extend([dk_c, g2.dk_decoded]);
                dv.extend([dv_c, g2.dv_decoded]);
            }
            let cat = |parts: Vec<Tensor>, like: &Tensor| -> Result<Tensor> {
                if parts.is_empty() {
                    Ok(Tensor::zeros(like.shape(), Precision::F64))
                } else {
                    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
                }
            };
            Ok((cat(dq, &c.q)?, cat(dk, &c.k)?, cat(dv, &c.v)?))
        }
    }
}

pub fn model_fwd(cfg: &ModelConfig, params: &ModelParams, batch: &PackedBatch, backend: Backend) -> Result<ModelOutput> {
    cfg.validate()?;
    let plan = plan(cfg, batch, backend)?;
    let (h, hk, d) = (cfg.heads, cfg.kv_heads, cfg.head_dim);
    let mut x = Array2::zeros((plan.tokens.len(), cfg.d_model));
    for (mut row, &t) in x.rows_mut().into_iter().zip(&plan.tokens) {
        row.assign(&params.embedding.row(t as usize));
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for p in &params.layers {
        let (a, inv1) = rmsnorm_with_inv(x.view(), p.gamma1.view(), RMS_EPS);
        let q = tensor3_from(rope(array3(&tensor3(&a.dot(&p.w_q), h, d)).view(), &plan.positions, cfg.rope_base));
        let k = tensor3_from(rope(array3(&tensor3(&a.dot(&p.w_k), hk, d)).view(), &plan.positions, cfg.rope_base));
        let v = tensor3(&a.dot(&p.w_v), hk, d);
        let (o, lse) = attention_fwd(cfg, &plan, backend, &q, &k, &v)?;
        let x1 = &x + &flat(&o).dot(&p.w_o);
        let (b, inv2) = rmsnorm_with_inv(x1.view(), p.gamma2.view(), RMS_EPS);
        let u = b.dot(&p.w_gate);
        let w = b.dot(&p.w_up);
        let s = u.mapv(silu) * &w;
        let x2 = &x1 + &s.dot(&p.w_down);
        layers.push(LayerCache {
            x: std::mem::replace(&mut x, x2),
            a,
            inv1,
            q,
            k,
            v,
            o,
            lse,
            x1,
            b,
            inv2,
            u,
            w,
            s,
        });
    }
    let (f, inv_final) = rmsnorm_with_inv(x.view(), params.final_gamma.view(), RMS_EPS);
    let logits = f.dot(&params.head);
    Ok(ModelOutput {
        logits,
        cache: ForwardCache {
            plan,
            layers,
            x_final: x,
            inv_final,
            f,
        },
    })
}

/// `-Σ A · log softmax(logits[row])[token]` over response tokens, and its
/// gradient with respect to the logits.
fn loss_and_grad(logits: &Array2<f64>, targets: &[(usize, TokenId, f64)]) -> (f64, Array2<f64>) {
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for &(row, tok, adv) in targets {
        let l = logits.row(row);
        let m = l.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = l.iter().map(|x| (x - m).exp()).sum();
        let log_z = m + z.ln();
        total -= adv * (l[tok as usize] - log_z);
        let mut g = dlogits.row_mut(row);
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += adv * (l[j] - log_z).exp();
        }
        g[tok as usize] -= adv;
    }
    (total, dlogits)
}

pub fn loss(cfg: &ModelConfig, params: &ModelParams, batch: &PackedBatch, backend: Backend) -> Result<f64> {
    let out = model_fwd(cfg, params, batch, backend)?;
    Ok(loss_and_grad(&out.logits, &out.cache.plan.targets).0)
}

/// Loss and gradients of every parameter.
pub fn model_bwd(cfg: &ModelConfig, params: &ModelParams, batch: &PackedBatch, backend: Backend) -> Result<(f64, ModelGrads)> {
    model_bwd_traced(cfg, params, batch, backend).map(|(l, g, _)| (l, g))
}

/// As [`model_bwd`], also returning the per-call context gradients of the
/// shared-prompt backend (empty for the standard backend).
pub fn model_bwd_traced(cfg: &ModelConfig, params: &ModelParams, batch: &PackedBatch, backend: Backend) -> Result<(f64, ModelGrads, Vec<AttentionTrace>)> {
    let ModelOutput { logits, cache } = model_fwd(cfg, params, batch, backend)?;
    let (loss, dlogits) = loss_and_grad(&logits, &cache.plan.targets);
    let mut grads = ModelParams::zeros_like(cfg);
    let mut traces = Vec::new();

    grads.head = cache.f.t().dot(&dlogits);
    let df = dlogits.dot(&params.head.t());
    let (mut dx, dgf) = rmsnorm_bwd(cache.x_final.view(), params.final_gamma.view(), &cache.inv_final, df.view());
    grads.final_gamma = dgf;

    let (h, hk, d) = (cfg.heads, cfg.kv_heads, cfg.head_dim);
    for (li, (p, c)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grads.layers[li];
        // MLP branch
        g.w_down = c.s.t().dot(&dx);
        let ds = dx.dot(&p.w_down.t());
        let du = &ds * &c.w * &c.u.mapv(silu_grad);
        let dw = &ds * &c.u.mapv(silu);
        g.w_gate = c.b.t().dot(&du);
        g.w_up = c.b.t().dot(&dw);
        let db = du.dot(&p.w_gate.t()) + dw.dot(&p.w_up.t());
        let (dx1_norm, dg2) = rmsnorm_bwd(c.x1.view(), p.gamma2.view(), &c.inv2, db.view());
        g.gamma2 = dg2;
        let dx1 = &dx + &dx1_norm;

        // attention branch
        g.w_o = flat(&c.o).t().dot(&dx1);
        let d_o = tensor3(&dx1.dot(&p.w_o.t()), h, d);
        let (dq_r, dk_r, dv) = attention_bwd(cfg, &cache.plan, backend, c, &d_o, li, &mut traces)?;
        let dq = rope_inverse(array3(&dq_r).view(), &cache.plan.positions, cfg.rope_base);
        let dk = rope_inverse(array3(&dk_r).view(), &cache.plan.positions, cfg.rope_base);
        let t = dq.len_of(Axis(0));
        let dq = dq.into_shape_with_order((t, h * d)).expect("contiguous");
        let dk = dk.into_shape_with_order((t, hk * d)).expect("contiguous");
        let dv = flat(&dv);
        g.w_q = c.a.t().dot(&dq);
        g.w_k = c.a.t().dot(&dk);
        g.w_v = c.a.t().dot(&dv);
        let da = dq.dot(&p.w_q.t()) + dk.dot(&p.w_k.t()) + dv.dot(&p.w_v.t());
        let (dx_norm, dg1) = rmsnorm_bwd(c.x.view(), p.gamma1.view(), &c.inv1, da.view());
        g.gamma1 = dg1;
        dx = dx1 + dx_norm;
    }

    for (row, &tok) in dx.rows().into_iter().zip(&cache.plan.tokens) {
        let mut e = grads.embedding.slice_mut(s![tok as usize, ..]);
        e += &row;
    }
    Ok((loss, grads, traces))
}

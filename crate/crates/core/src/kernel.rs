//! Tiled online-softmax engine shared by the `fa2` and `dualkv` kernels.
//!
//! A [`Segment`] is one packed sequence's query rows together with the KV
//! regions those rows attend to. Regions are tiled to `B_N` independently;
//! tile `n` of a region has logical key base `region.logical_base + n * B_N`,
//! so two physically disjoint buffers look like one causal key sequence.
//! Every tile is bounds-checked (partial tiles are clipped, there is no
//! unmasked fast path).
//!
//! The baseline kernel is the single-region case; with an empty context the
//! two-region kernel runs exactly the same instruction sequence.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Sub};

use rayon::prelude::*;

use crate::tensor::{Precision, Tensor};

/// Accumulation scalar (`f32` or `f64`).
pub trait Compute:
    Copy
    + Send
    + Sync
    + PartialOrd
    + Default
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + AddAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const NEG_INFINITY: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn max(self, other: Self) -> Self;

    /// Round into a storage precision (the single output cast).
    fn cast_to(self, precision: Precision) -> Self {
        Self::from_f64(precision.round(self.to_f64()))
    }
}

macro_rules! impl_compute {
    ($t:ty) => {
        impl Compute for $t {
            const ZERO: Self = 0.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
        }
    };
}

impl_compute!(f32);
impl_compute!(f64);

pub(crate) fn load<T: Compute>(t: &Tensor) -> Vec<T> {
    t.data().iter().map(|&x| T::from_f64(x)).collect()
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    /// query heads
    pub h: usize,
    /// kv heads
    pub hk: usize,
    pub d: usize,
    pub tile: usize,
    pub scale: f64,
    /// storage precision of kernel outputs
    pub out: Precision,
}

impl Geometry {
    pub fn group(&self) -> usize {
        self.h / self.hk
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Region<'a, T> {
    /// `[rows, H_k, d]`
    pub k: &'a [T],
    pub v: &'a [T],
    pub rows: usize,
    pub logical_base: usize,
    /// Shared regions route their dK/dV tiles to a callback instead of the
    /// segment's own output buffer.
    pub shared: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Tile {
    pub region: usize,
    /// index of this tile within its region
    pub index: usize,
    /// first row inside the region
    pub start: usize,
    pub len: usize,
    pub j_base: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Segment<'a, T> {
    /// first packed query row
    pub q_start: usize,
    pub q_rows: usize,
    /// logical position of query row 0
    pub pos0: usize,
    pub regions: Vec<Region<'a, T>>,
}

impl<T> Segment<'_, T> {
    /// Tiles in physical block order: all tiles of region 0, then region 1.
    pub fn tiles(&self, tile: usize) -> Vec<Tile> {
        let mut out = Vec::new();
        for (ri, reg) in self.regions.iter().enumerate() {
            let n_tiles = reg.rows.div_ceil(tile);
            for n in 0..n_tiles {
                let start = n * tile;
                out.push(Tile {
                    region: ri,
                    index: n,
                    start,
                    len: tile.min(reg.rows - start),
                    j_base: reg.logical_base + start,
                });
            }
        }
        out
    }

    /// Rows of the single non-shared region (0 if none).
    fn own_rows(&self) -> usize {
        self.regions.iter().filter(|r| !r.shared).map(|r| r.rows).sum()
    }
}

#[inline]
fn dot<T: Compute>(a: &[T], b: &[T]) -> T {
    let mut s = T::ZERO;
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

#[inline]
fn axpy<T: Compute>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Forward over all segments. Returns `(out [rows, H, d], lse [H, rows])`
/// in the compute type, with `out` already cast to the storage precision.
pub(crate) fn forward<T: Compute>(
    geo: &Geometry,
    q: &[T],
    segments: &[Segment<'_, T>],
    total_rows: usize,
) -> (Vec<T>, Vec<T>) {
    let jobs: Vec<(usize, usize)> = (0..segments.len())
        .flat_map(|s| (0..geo.h).map(move |h| (s, h)))
        .collect();
    let results: Vec<(Vec<T>, Vec<T>)> = jobs
        .par_iter()
        .map(|&(s, h)| forward_head(geo, q, &segments[s], h))
        .collect();

    let (h_count, d) = (geo.h, geo.d);
    let mut out = vec![T::ZERO; total_rows * h_count * d];
    let mut lse = vec![T::ZERO; h_count * total_rows];
    for (&(s, h), (o, l)) in jobs.iter().zip(results) {
        let seg = &segments[s];
        for r in 0..seg.q_rows {
            let row = seg.q_start + r;
            out[(row * h_count + h) * d..][..d].copy_from_slice(&o[r * d..][..d]);
            lse[h * total_rows + row] = l[r];
        }
    }
    (out, lse)
}

/// One (segment, head) block: online softmax over tiles in reverse order.
fn forward_head<T: Compute>(geo: &Geometry, q: &[T], seg: &Segment<'_, T>, h: usize) -> (Vec<T>, Vec<T>) {
    let d = geo.d;
    let g = h / geo.group();
    let scale = T::from_f64(geo.scale);
    let tiles = seg.tiles(geo.tile);
    let mut out = vec![T::ZERO; seg.q_rows * d];
    let mut lse = vec![T::ZERO; seg.q_rows];
    let mut scores = vec![T::ZERO; geo.tile];
    let mut acc = vec![T::ZERO; d];

    for r in 0..seg.q_rows {
        let pos = seg.pos0 + r;
        let q_row = &q[((seg.q_start + r) * geo.h + h) * d..][..d];
        // causal pruning: skip tiles that start past this row's horizon
        let n_max = tiles.partition_point(|t| t.j_base <= pos);
        let mut m = T::NEG_INFINITY;
        let mut l = T::ZERO;
        acc.iter_mut().for_each(|x| *x = T::ZERO);

        for t in tiles[..n_max].iter().rev() {
            let reg = &seg.regions[t.region];
            // out-of-bounds lanes are clipped by t.len, causal lanes by pos
            let valid = t.len.min(pos + 1 - t.j_base);
            let mut tile_max = T::NEG_INFINITY;
            for (jj, s) in scores[..valid].iter_mut().enumerate() {
                let k_row = &reg.k[((t.start + jj) * geo.hk + g) * d..][..d];
                *s = scale * dot(q_row, k_row);
                tile_max = tile_max.max(*s);
            }
            let m_new = m.max(tile_max);
            let alpha = (m - m_new).exp();
            let mut row_sum = T::ZERO;
            acc.iter_mut().for_each(|x| *x *= alpha);
            for (jj, s) in scores[..valid].iter().enumerate() {
                let p = (*s - m_new).exp();
                row_sum += p;
                let v_row = &reg.v[((t.start + jj) * geo.hk + g) * d..][..d];
                axpy(p, v_row, &mut acc);
            }
            l = alpha * l + row_sum;
            m = m_new;
        }

        for (o, a) in out[r * d..][..d].iter_mut().zip(&acc) {
            *o = (*a / l).cast_to(geo.out);
        }
        lse[r] = m + l.ln();
    }
    (out, lse)
}

pub(crate) struct BackwardInputs<'a, T> {
    pub q: &'a [T],
    pub d_out: &'a [T],
    /// `[H, rows]`
    pub lse: &'a [T],
    /// `D = rowsum(dO * O)`, `[H, rows]`
    pub delta: &'a [T],
    pub total_rows: usize,
}

/// `D = rowsum(dO * O)` per (head, row), computed once per backward.
pub(crate) fn row_delta<T: Compute>(geo: &Geometry, out: &[T], d_out: &[T], total_rows: usize) -> Vec<T> {
    let mut delta = vec![T::ZERO; geo.h * total_rows];
    for row in 0..total_rows {
        for h in 0..geo.h {
            let o = (row * geo.h + h) * geo.d;
            delta[h * total_rows + row] = dot(&out[o..][..geo.d], &d_out[o..][..geo.d]);
        }
    }
    delta
}

/// Gradients produced by one (segment, kv head) worker.
pub(crate) struct SegmentGrads<T> {
    pub segment: usize,
    pub kv_head: usize,
    /// `[q_rows, G, d]`, cast to storage precision
    pub dq: Vec<T>,
    /// `[own_rows, d]`, cast to storage precision at each tile epilogue
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

/// Backward over all (segment, kv head) pairs.
///
/// Each worker iterates its tiles in ascending physical order and, per tile,
/// every query row in the tile's causal support, accumulating dK/dV for the
/// tile and dQ for the rows in the compute type. Tiles of non-shared regions
/// are cast and stored in the worker's own buffers; tiles of shared regions
/// are handed to `on_shared(segment, kv_head, tile, dk, dv)` uncast.
///
/// With `deterministic` the workers run sequentially in (segment, kv head)
/// order, which fixes the order of `on_shared` calls; otherwise they run on
/// the rayon pool and `on_shared` must be safe under concurrent calls.
pub(crate) fn backward<T, F>(
    geo: &Geometry,
    inputs: &BackwardInputs<'_, T>,
    segments: &[Segment<'_, T>],
    deterministic: bool,
    on_shared: F,
) -> Vec<SegmentGrads<T>>
where
    T: Compute,
    F: Fn(usize, usize, &Tile, &[T], &[T]) + Sync,
{
    let jobs: Vec<(usize, usize)> = (0..segments.len())
        .flat_map(|s| (0..geo.hk).map(move |g| (s, g)))
        .collect();
    let work = |&(s, g): &(usize, usize)| backward_segment(geo, inputs, &segments[s], s, g, &on_shared);
    if deterministic {
        jobs.iter().map(work).collect()
    } else {
        jobs.par_iter().map(work).collect()
    }
}

fn backward_segment<T, F>(
    geo: &Geometry,
    inputs: &BackwardInputs<'_, T>,
    seg: &Segment<'_, T>,
    s: usize,
    g: usize,
    on_shared: &F,
) -> SegmentGrads<T>
where
    T: Compute,
    F: Fn(usize, usize, &Tile, &[T], &[T]),
{
    let (d, group) = (geo.d, geo.group());
    let scale = T::from_f64(geo.scale);
    let rows = inputs.total_rows;
    let tiles = seg.tiles(geo.tile);
    let own_rows = seg.own_rows();

    // dQ accumulator for this worker's G query heads, in the compute type
    let mut dq_acc = vec![T::ZERO; seg.q_rows * group * d];
    let mut dk_own = vec![T::ZERO; own_rows * d];
    let mut dv_own = vec![T::ZERO; own_rows * d];
    let mut acc_dk = vec![T::ZERO; geo.tile * d];
    let mut acc_dv = vec![T::ZERO; geo.tile * d];

    for t in &tiles {
        let reg = &seg.regions[t.region];
        acc_dk.iter_mut().for_each(|x| *x = T::ZERO);
        acc_dv.iter_mut().for_each(|x| *x = T::ZERO);
        // first query row whose logical position reaches this tile
        let r_min = t.j_base.saturating_sub(seg.pos0);

        for hh in 0..group {
            let h = g * group + hh;
            for r in r_min..seg.q_rows {
                let pos = seg.pos0 + r;
                let row = seg.q_start + r;
                let qo = (row * geo.h + h) * d;
                let q_row = &inputs.q[qo..][..d];
                let do_row = &inputs.d_out[qo..][..d];
                let lse = inputs.lse[h * rows + row];
                let delta = inputs.delta[h * rows + row];
                let dq_row = &mut dq_acc[(r * group + hh) * d..][..d];
                let valid = t.len.min(pos + 1 - t.j_base);
                for jj in 0..valid {
                    let ko = ((t.start + jj) * geo.hk + g) * d;
                    let k_row = &reg.k[ko..][..d];
                    let v_row = &reg.v[ko..][..d];
                    let p = (scale * dot(q_row, k_row) - lse).exp();
                    axpy(p, do_row, &mut acc_dv[jj * d..][..d]);
                    let dp = dot(do_row, v_row);
                    let ds = p * (dp - delta) * scale;
                    axpy(ds, q_row, &mut acc_dk[jj * d..][..d]);
                    axpy(ds, k_row, dq_row);
                }
            }
        }

        let n = t.len * d;
        if reg.shared {
            on_shared(s, g, t, &acc_dk[..n], &acc_dv[..n]);
        } else {
            // tile epilogue: one cast per element
            let base = t.start * d;
            for i in 0..n {
                dk_own[base + i] = acc_dk[i].cast_to(geo.out);
                dv_own[base + i] = acc_dv[i].cast_to(geo.out);
            }
        }
    }

    for x in &mut dq_acc {
        *x = x.cast_to(geo.out);
    }
    SegmentGrads {
        segment: s,
        kv_head: g,
        dq: dq_acc,
        dk: dk_own,
        dv: dv_own,
    }
}

/// Writes a worker's dQ block back into a packed `[rows, H, d]` buffer.
pub(crate) fn scatter_dq<T: Compute>(geo: &Geometry, seg: &Segment<'_, T>, grads: &SegmentGrads<T>, dq: &mut [T]) {
    let (d, group) = (geo.d, geo.group());
    for r in 0..seg.q_rows {
        for hh in 0..group {
            let h = grads.kv_head * group + hh;
            let dst = ((seg.q_start + r) * geo.h + h) * d;
            dq[dst..dst + d].copy_from_slice(&grads.dq[(r * group + hh) * d..][..d]);
        }
    }
}

/// Writes a worker's own-region dK/dV into packed `[rows, H_k, d]` buffers
/// starting at packed row `kv_start`.
pub(crate) fn scatter_kv<T: Compute>(geo: &Geometry, grads: &SegmentGrads<T>, kv_start: usize, dk: &mut [T], dv: &mut [T]) {
    let d = geo.d;
    let rows = grads.dk.len() / d.max(1);
    for j in 0..rows {
        let dst = ((kv_start + j) * geo.hk + grads.kv_head) * d;
        dk[dst..dst + d].copy_from_slice(&grads.dk[j * d..][..d]);
        dv[dst..dst + d].copy_from_slice(&grads.dv[j * d..][..d]);
    }
}

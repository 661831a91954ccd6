//! Training-step gradient aggregation over a rollout multiset.
//!
//! A [`StepPlan`] is a permutation of the samples plus a partition into
//! (rank, micro-batch) cells. The default pipeline length-balances and
//! shuffles, which scatters prompt groups; the shared-prompt pipeline keeps
//! generation order and places whole groups in one cell. Both are
//! permutations of the same multiset, so the summed gradient is the same.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layer::{model_bwd, Backend, ModelConfig, ModelParams};
use crate::packing::{pack, validate_assignment, GroupingReport, PackingMode};
use crate::rollout::{group_runs, group_samples, RolloutSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// balanced and shuffled, standard packing
    Default,
    /// generation order, whole groups per cell, shared-prompt packing
    DualKV,
}

impl StepMode {
    pub fn packing(self) -> PackingMode {
        match self {
            StepMode::Default => PackingMode::Standard,
            StepMode::DualKV => PackingMode::DualKV,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub rank: usize,
    pub micro_batch: usize,
    /// indices into the sample list, in packing order
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    /// permutation of sample indices
    pub ordering: Vec<usize>,
    pub cells: Vec<Cell>,
    pub mode: StepMode,
}

impl StepPlan {
    /// The cells must cover `0..n` exactly once.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.cells.iter().flat_map(|c| &c.samples) {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                _ => return Err(Error::InvalidArgument(format!("sample {i} is missing or assigned twice"))),
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("sample {missing} is not assigned")));
        }
        Ok(())
    }

    /// Co-location report for the plan's cells.
    pub fn grouping_report(&self, samples: &[RolloutSample]) -> GroupingReport {
        validate_assignment(
            self.cells
                .iter()
                .map(|c| c.samples.iter().map(|&i| samples[i].prompt_id.as_str()).collect()),
        )
    }
}

/// Representative balancing policy: stable sort by total length (ties keep
/// input order), deal round-robin to ranks, shuffle each rank's list with
/// `seed`, then cut each rank into micro-batches of `mb` samples.
pub fn simulate_balance_batch(samples: &[RolloutSample], n_ranks: usize, mb: usize, seed: u64) -> Result<StepPlan> {
    if n_ranks == 0 || mb == 0 {
        return Err(Error::InvalidArgument("ranks and micro-batch size must be positive".into()));
    }
    let mut ordering: Vec<usize> = (0..samples.len()).collect();
    ordering.sort_by_key(|&i| samples[i].seq_len());
    let mut per_rank = vec![Vec::new(); n_ranks];
    for (k, &i) in ordering.iter().enumerate() {
        per_rank[k % n_ranks].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::new();
    for (rank, list) in per_rank.iter_mut().enumerate() {
        list.shuffle(&mut rng);
        for (m, chunk) in list.chunks(mb).enumerate() {
            cells.push(Cell {
                rank,
                micro_batch: m,
                samples: chunk.to_vec(),
            });
        }
    }
    Ok(StepPlan {
        ordering: per_rank.concat(),
        cells,
        mode: StepMode::Default,
    })
}

/// Generation-order plan: samples grouped by prompt (first appearance),
/// whole groups packed greedily into cells of at most `mb` samples, cells
/// dealt round-robin to ranks.
pub fn dualkv_plan(samples: &[RolloutSample], n_ranks: usize, mb: usize) -> Result<StepPlan> {
    if n_ranks == 0 || mb == 0 {
        return Err(Error::InvalidArgument("ranks and micro-batch size must be positive".into()));
    }
    // validates prompt consistency per id
    group_samples(samples)?;
    let mut order_ids: Vec<&str> = Vec::new();
    for s in samples {
        if !order_ids.contains(&s.prompt_id.as_str()) {
            order_ids.push(&s.prompt_id);
        }
    }
    let mut cells: Vec<Vec<usize>> = Vec::new();
    let mut fill = mb;
    for id in order_ids {
        let members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].prompt_id == id).collect();
        if members.len() > mb {
            return Err(Error::GroupTooLarge {
                prompt_id: id.to_string(),
                size: members.len(),
                capacity: mb,
            });
        }
        if fill + members.len() > mb {
            cells.push(Vec::new());
            fill = 0;
        }
        fill += members.len();
        cells.last_mut().unwrap().extend(members);
    }
    Ok(StepPlan {
        ordering: cells.concat(),
        cells: cells
            .into_iter()
            .enumerate()
            .map(|(c, samples)| Cell {
                rank: c % n_ranks,
                micro_batch: c / n_ranks,
                samples,
            })
            .collect(),
        mode: StepMode::DualKV,
    })
}

/// `Σ_cells ∇ loss(cell)` as one flat f64 vector.
///
/// Cells are evaluated in parallel and summed in cell order, so the result
/// does not depend on scheduling. Shared-prompt plans must keep every group
/// in one contiguous run of one cell.
pub fn aggregate_step_gradient(samples: &[RolloutSample], plan: &StepPlan, cfg: &ModelConfig, params: &ModelParams) -> Result<Vec<f64>> {
    plan.check_partition(samples.len())?;
    if plan.mode == StepMode::DualKV {
        plan.grouping_report(samples).into_result()?;
    }
    let backend = Backend::for_mode(plan.mode.packing());
    let per_cell: Vec<Option<Vec<f64>>> = plan
        .cells
        .par_iter()
        .map(|cell| -> Result<Option<Vec<f64>>> {
            if cell.samples.is_empty() {
                return Ok(None);
            }
            let cell_samples: Vec<RolloutSample> = cell.samples.iter().map(|&i| samples[i].clone()).collect();
            let batch = pack(&group_runs(&cell_samples), plan.mode.packing())?;
            let (_, grads) = model_bwd(cfg, params, &batch, backend)?;
            Ok(Some(grads.flatten()))
        })
        .collect::<Result<_>>()?;

    let mut total = vec![0.0; ModelParams::zeros_like(cfg).flatten().len()];
    for g in per_cell.into_iter().flatten() {
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    Ok(total)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

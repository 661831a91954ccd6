//! Micro-batch token layouts for rollout groups.
//!
//! Standard packing replicates each prompt in front of every response:
//! `[p ; r_1] [p ; r_2] ...`, `T_std = Σ (P + R_i)`. Shared-prompt packing
//! stores the prompt once: `[p ; r_1 ; r_2 ; ...]`, `T_dk = P + Σ R_i`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub prompt_tokens: Vec<TokenId>,
    pub responses: Vec<Response>,
}

impl RolloutGroup {
    pub fn new(prompt_id: impl Into<String>, prompt_tokens: Vec<TokenId>, responses: Vec<Response>) -> Result<Self> {
        let prompt_id = prompt_id.into();
        if responses.is_empty() {
            return Err(Error::InvalidArgument(format!("group `{prompt_id}` has no responses")));
        }
        Ok(Self {
            prompt_id,
            prompt_tokens,
            responses,
        })
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_tokens.len()
    }

    pub fn response_lens(&self) -> Vec<usize> {
        self.responses.iter().map(|r| r.tokens.len()).collect()
    }

    pub fn t_std(&self) -> usize {
        self.responses.iter().map(|r| self.prompt_len() + r.tokens.len()).sum()
    }

    pub fn t_dk(&self) -> usize {
        self.prompt_len() + self.responses.iter().map(|r| r.tokens.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackingMode {
    Standard,
    #[serde(rename = "dualkv")]
    DualKV,
}

impl fmt::Display for PackingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PackingMode::Standard => "standard",
            PackingMode::DualKV => "dualkv",
        })
    }
}

impl FromStr for PackingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(PackingMode::Standard),
            "dualkv" => Ok(PackingMode::DualKV),
            other => Err(Error::InvalidArgument(format!("unknown packing mode `{other}`"))),
        }
    }
}

/// Where one group lives inside a packed token stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub prompt_id: String,
    pub prompt_len: usize,
    /// first token of the group in `token_ids`
    pub token_offset: usize,
    /// Local offsets from `token_offset`. Standard: one entry per
    /// `[prompt ; response]` sequence. Shared-prompt: one entry per
    /// response, relative to the first response token (`token_offset + P`).
    pub cu_seqlens: Vec<usize>,
    /// `Some(P)` for shared-prompt layouts
    pub context_span: Option<usize>,
    pub advantages: Vec<f64>,
}

impl GroupLayout {
    pub fn n(&self) -> usize {
        self.cu_seqlens.len() - 1
    }

    pub fn response_lens(&self) -> Vec<usize> {
        let replicated = if self.context_span.is_some() { 0 } else { self.prompt_len };
        self.cu_seqlens.windows(2).map(|w| w[1] - w[0] - replicated).collect()
    }

    /// Tokens this group occupies in the stream.
    pub fn token_len(&self) -> usize {
        self.context_span.unwrap_or(0) + self.cu_seqlens.last().copied().unwrap_or(0)
    }

    pub fn t_std(&self) -> usize {
        self.response_lens().iter().map(|r| self.prompt_len + r).sum()
    }

    pub fn t_dk(&self) -> usize {
        self.prompt_len + self.response_lens().iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub mode: PackingMode,
    pub token_ids: Vec<TokenId>,
    pub groups: Vec<GroupLayout>,
    pub total_tokens: usize,
}

impl PackedBatch {
    /// Exact `T_std / T_dk` for the groups in this batch (1 for an empty
    /// batch).
    pub fn rho(&self) -> f64 {
        let (s, d) = self
            .groups
            .iter()
            .fold((0usize, 0usize), |(s, d), g| (s + g.t_std(), d + g.t_dk()));
        if d == 0 {
            1.0
        } else {
            s as f64 / d as f64
        }
    }

    /// Global varlen offsets over the whole stream (Standard layout).
    pub fn global_cu_seqlens(&self) -> Vec<usize> {
        let mut cu = vec![0];
        for g in &self.groups {
            let base = g.token_offset + g.context_span.unwrap_or(0);
            cu.extend(g.cu_seqlens[1..].iter().map(|c| base + c));
        }
        cu
    }

    /// Reconstructs the groups. Replicated prompts must agree.
    pub fn unpack(&self) -> Result<Vec<RolloutGroup>> {
        self.groups.iter().map(|g| self.unpack_group(g)).collect()
    }

    fn unpack_group(&self, g: &GroupLayout) -> Result<RolloutGroup> {
        let slice = |a: usize, b: usize| -> Result<&[TokenId]> {
            self.token_ids
                .get(a..b)
                .ok_or_else(|| Error::InvalidArgument(format!("group `{}` runs past the token stream", g.prompt_id)))
        };
        let p = g.prompt_len;
        let mut responses = Vec::with_capacity(g.n());
        let prompt: Vec<TokenId> = match g.context_span {
            Some(span) => {
                let prompt = slice(g.token_offset, g.token_offset + span)?.to_vec();
                let base = g.token_offset + span;
                for (w, &a) in g.cu_seqlens.windows(2).zip(&g.advantages) {
                    responses.push(Response {
                        tokens: slice(base + w[0], base + w[1])?.to_vec(),
                        advantage: a,
                    });
                }
                prompt
            }
            None => {
                let mut prompt = None;
                for (w, &a) in g.cu_seqlens.windows(2).zip(&g.advantages) {
                    let seq = slice(g.token_offset + w[0], g.token_offset + w[1])?;
                    if seq.len() < p {
                        return Err(Error::InvalidArgument(format!("sequence in `{}` shorter than its prompt", g.prompt_id)));
                    }
                    match &prompt {
                        None => prompt = Some(seq[..p].to_vec()),
                        Some(first) if first[..] != seq[..p] => return Err(Error::InconsistentPrompt(g.prompt_id.clone())),
                        Some(_) => {}
                    }
                    responses.push(Response {
                        tokens: seq[p..].to_vec(),
                        advantage: a,
                    });
                }
                prompt.unwrap_or_default()
            }
        };
        RolloutGroup::new(g.prompt_id.clone(), prompt, responses)
    }
}

/// `[prompt ; response_i]` per response, groups in input order.
pub fn pack_standard(groups: &[RolloutGroup]) -> Result<PackedBatch> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no groups to pack".into()));
    }
    let mut token_ids = Vec::new();
    let mut layouts = Vec::with_capacity(groups.len());
    for g in groups {
        let token_offset = token_ids.len();
        let mut cu = vec![0];
        for r in &g.responses {
            token_ids.extend_from_slice(&g.prompt_tokens);
            token_ids.extend_from_slice(&r.tokens);
            cu.push(token_ids.len() - token_offset);
        }
        layouts.push(GroupLayout {
            prompt_id: g.prompt_id.clone(),
            prompt_len: g.prompt_len(),
            token_offset,
            cu_seqlens: cu,
            context_span: None,
            advantages: g.responses.iter().map(|r| r.advantage).collect(),
        });
    }
    Ok(PackedBatch {
        mode: PackingMode::Standard,
        total_tokens: token_ids.len(),
        token_ids,
        groups: layouts,
    })
}

/// `[prompt ; r_1 ; ... ; r_N]` per group. A prompt id that appears in two
/// input groups is a split group.
pub fn pack_dualkv(groups: &[RolloutGroup]) -> Result<PackedBatch> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no groups to pack".into()));
    }
    let mut seen = HashSet::new();
    let mut token_ids = Vec::new();
    let mut layouts = Vec::with_capacity(groups.len());
    for g in groups {
        if !seen.insert(g.prompt_id.as_str()) {
            return Err(Error::SplitGroup(g.prompt_id.clone()));
        }
        let token_offset = token_ids.len();
        token_ids.extend_from_slice(&g.prompt_tokens);
        let mut cu = vec![0];
        for r in &g.responses {
            token_ids.extend_from_slice(&r.tokens);
            cu.push(cu.last().unwrap() + r.tokens.len());
        }
        layouts.push(GroupLayout {
            prompt_id: g.prompt_id.clone(),
            prompt_len: g.prompt_len(),
            token_offset,
            cu_seqlens: cu,
            context_span: Some(g.prompt_len()),
            advantages: g.responses.iter().map(|r| r.advantage).collect(),
        });
    }
    Ok(PackedBatch {
        mode: PackingMode::DualKV,
        total_tokens: token_ids.len(),
        token_ids,
        groups: layouts,
    })
}

pub fn pack(groups: &[RolloutGroup], mode: PackingMode) -> Result<PackedBatch> {
    match mode {
        PackingMode::Standard => pack_standard(groups),
        PackingMode::DualKV => pack_dualkv(groups),
    }
}

/// `N(P+R) / (P+NR)`, from exact integer numerator and denominator.
pub fn compute_rho(n: u64, p: u64, r: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let (n, p, r) = (n as u128, p as u128, r as u128);
    let den = p + n * r;
    if den == 0 {
        return Err(Error::ZeroDenominator("rho"));
    }
    Ok((n * (p + r)) as f64 / den as f64)
}

/// `(T_std, T_dk)` for real groups with heterogeneous response lengths.
pub fn token_counts(groups: &[RolloutGroup]) -> (usize, usize) {
    groups.iter().fold((0, 0), |(s, d), g| (s + g.t_std(), d + g.t_dk()))
}

pub fn rho_of_groups(groups: &[RolloutGroup]) -> Result<f64> {
    let (s, d) = token_counts(groups);
    if d == 0 {
        return Err(Error::ZeroDenominator("rho"));
    }
    Ok(s as f64 / d as f64)
}

/// Splits groups into micro-batches of at most `mb` responses.
///
/// Standard mode has no co-location contract, so a group may be cut across
/// batches. Shared-prompt mode packs whole groups greedily in input order
/// and refuses a group larger than `mb`.
pub fn plan_micro_batches(groups: &[RolloutGroup], mode: PackingMode, mb: usize) -> Result<Vec<Vec<RolloutGroup>>> {
    if mb == 0 {
        return Err(Error::InvalidArgument("micro-batch capacity must be positive".into()));
    }
    let mut batches: Vec<Vec<RolloutGroup>> = Vec::new();
    let mut fill = mb;
    match mode {
        PackingMode::Standard => {
            for g in groups {
                for r in &g.responses {
                    if fill == mb {
                        batches.push(Vec::new());
                        fill = 0;
                    }
                    let batch = batches.last_mut().unwrap();
                    match batch.last_mut() {
                        Some(last) if last.prompt_id == g.prompt_id => last.responses.push(r.clone()),
                        _ => batch.push(RolloutGroup {
                            prompt_id: g.prompt_id.clone(),
                            prompt_tokens: g.prompt_tokens.clone(),
                            responses: vec![r.clone()],
                        }),
                    }
                    fill += 1;
                }
            }
        }
        PackingMode::DualKV => {
            for g in groups {
                if g.n() > mb {
                    return Err(Error::GroupTooLarge {
                        prompt_id: g.prompt_id.clone(),
                        size: g.n(),
                        capacity: mb,
                    });
                }
                if fill + g.n() > mb {
                    batches.push(Vec::new());
                    fill = 0;
                }
                batches.last_mut().unwrap().push(g.clone());
                fill += g.n();
            }
        }
    }
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    /// responses of one prompt appear in more than one batch
    SplitAcrossBatches { batches: Vec<usize> },
    /// responses of one prompt are interleaved with another prompt's
    NotContiguous { batch: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub prompt_id: String,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroupingReport {
    pub violations: Vec<Violation>,
}

impl GroupingReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        match self.violations.into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::SplitGroup(v.prompt_id)),
        }
    }
}

/// Checks the co-location contract on shared-prompt batches. Standard
/// batches carry no contract and are skipped.
pub fn validate_grouping(batches: &[PackedBatch]) -> GroupingReport {
    validate_assignment(batches.iter().map(|b| match b.mode {
        PackingMode::DualKV => b.groups.iter().map(|g| g.prompt_id.as_str()).collect(),
        PackingMode::Standard => Vec::new(),
    }))
}

/// Checks that every prompt id lands in exactly one cell and occupies a
/// contiguous run there. Each cell is the prompt id of every sample, in
/// order.
pub fn validate_assignment<'a, I>(cells: I) -> GroupingReport
where
    I: IntoIterator<Item = Vec<&'a str>>,
{
    let mut cells_of: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    let mut violations = Vec::new();
    for (c, ids) in cells.into_iter().enumerate() {
        let mut closed: HashSet<&str> = HashSet::new();
        let mut prev: Option<&str> = None;
        for id in ids {
            if prev != Some(id) {
                if let Some(p) = prev {
                    closed.insert(p);
                }
                if closed.contains(id) {
                    violations.push(Violation {
                        prompt_id: id.to_string(),
                        kind: ViolationKind::NotContiguous { batch: c },
                    });
                }
                let seen = cells_of.entry(id).or_default();
                if seen.is_empty() {
                    order.push(id);
                }
                if seen.last() != Some(&c) {
                    seen.push(c);
                }
            }
            prev = Some(id);
        }
    }
    for id in order {
        let batches = &cells_of[id];
        if batches.len() > 1 {
            violations.push(Violation {
                prompt_id: id.to_string(),
                kind: ViolationKind::SplitAcrossBatches { batches: batches.clone() },
            });
        }
    }
    GroupingReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn group(id: &str, p: usize, lens: &[usize]) -> RolloutGroup {
        let prompt = (0..p as u32).map(|t| 1000 + t).collect();
        let responses = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| Response {
                tokens: (0..l as u32).map(|t| 10 * i as u32 + t).collect(),
                advantage: i as f64 - 0.5,
            })
            .collect();
        RolloutGroup::new(id, prompt, responses).unwrap()
    }

    #[test]
    fn standard_single_group_layout() {
        let b = pack_standard(&[group("a", 3, &[2, 4])]).unwrap();
        assert_eq!(b.total_tokens, 12);
        assert_eq!(b.groups[0].cu_seqlens, vec![0, 5, 12]);
        assert_eq!(b.global_cu_seqlens(), vec![0, 5, 12]);
    }

    #[test]
    fn dualkv_single_group_layout() {
        let b = pack_dualkv(&[group("a", 3, &[2, 4])]).unwrap();
        assert_eq!(b.total_tokens, 9);
        assert_eq!(b.groups[0].context_span, Some(3));
        assert_eq!(b.groups[0].cu_seqlens, vec![0, 2, 6]);
        assert_eq!(&b.token_ids[..3], &[1000, 1001, 1002]);
    }

    #[test]
    fn single_response_streams_coincide() {
        let g = [group("a", 4, &[3])];
        assert_eq!(pack_standard(&g).unwrap().token_ids, pack_dualkv(&g).unwrap().token_ids);
    }

    #[test]
    fn two_group_totals() {
        let gs = [group("a", 2, &[1, 1]), group("b", 1, &[2, 2, 2])];
        assert_eq!(pack_standard(&gs).unwrap().total_tokens, 15);
        assert_eq!(pack_dualkv(&gs).unwrap().total_tokens, 11);
        assert_eq!(token_counts(&gs), (15, 11));
    }

    #[test]
    fn empty_prompt_and_empty_response_are_allowed() {
        let gs = [group("a", 0, &[2, 0]), group("b", 3, &[0])];
        for b in [pack_standard(&gs).unwrap(), pack_dualkv(&gs).unwrap()] {
            assert_eq!(b.unpack().unwrap(), gs.to_vec());
        }
        assert!(pack_standard(&[]).is_err());
        assert!(RolloutGroup::new("x", vec![1], vec![]).is_err());
    }

    #[test]
    fn repeated_prompt_is_a_split_group() {
        let gs = [group("a", 2, &[1]), group("b", 1, &[1]), group("a", 2, &[3])];
        assert_eq!(pack_dualkv(&gs), Err(Error::SplitGroup("a".into())));
        assert!(pack_standard(&gs).is_ok());
    }

    #[test]
    fn paper_rho_rows() {
        // one-decimal rounding of N(P+R)/(P+NR)
        let rows = [
            (8, 2048, 2048, "1.8"),
            (8, 16384, 2048, "4.5"),
            (8, 65536, 512, "7.6"),
            (16, 16384, 2048, "6.0"),
            (32, 4096, 2048, "2.8"),
            (32, 16384, 2048, "7.2"),
            (16, 32768, 2048, "8.5"),
            (16, 65536, 512, "14.3"),
        ];
        for (n, p, r, want) in rows {
            assert_eq!(format!("{:.1}", compute_rho(n, p, r).unwrap()), want, "{n} {p} {r}");
        }
        assert!((compute_rho(8, 2048, 2048).unwrap() - 16.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn rho_edges() {
        assert_eq!(compute_rho(1, 0, 0), Err(Error::ZeroDenominator("rho")));
        assert!(compute_rho(0, 1, 1).is_err());
        assert_eq!(compute_rho(1, 123, 45).unwrap(), 1.0);
        assert_eq!(compute_rho(17, 0, 45).unwrap(), 1.0);
        let (p, r) = (4096.0, 1024.0);
        let big_n = compute_rho(1_000_000, 4096, 1024).unwrap();
        assert!((big_n - (p + r) / r).abs() / ((p + r) / r) < 1e-3);
        let big_p = compute_rho(12, 1_000_000_000, 100).unwrap();
        assert!((big_p - 12.0).abs() / 12.0 < 1e-3);
    }

    #[test]
    fn grouping_reports() {
        let ok = pack_dualkv(&[group("a", 2, &[1, 2]), group("b", 2, &[1])]).unwrap();
        assert!(validate_grouping(std::slice::from_ref(&ok)).passed());

        let half1 = pack_dualkv(&[group("a", 2, &[1])]).unwrap();
        let half2 = pack_dualkv(&[group("b", 1, &[1]), group("a", 2, &[2])]).unwrap();
        let report = validate_grouping(&[half1, half2]);
        assert_eq!(
            report.violations,
            vec![Violation {
                prompt_id: "a".into(),
                kind: ViolationKind::SplitAcrossBatches { batches: vec![0, 1] },
            }]
        );
        assert_eq!(report.into_result(), Err(Error::SplitGroup("a".into())));

        let std_split = pack_standard(&[group("a", 2, &[1]), group("b", 1, &[1]), group("a", 2, &[2])]).unwrap();
        assert!(validate_grouping(&[std_split.clone(), std_split]).passed());

        let interleaved = validate_assignment([vec!["a", "b", "a"]]);
        assert_eq!(interleaved.violations[0].kind, ViolationKind::NotContiguous { batch: 0 });
    }

    #[test]
    fn micro_batch_planning() {
        let gs = [group("a", 3, &[1, 1, 1, 1]), group("b", 2, &[2, 2, 2, 2])];
        let dk = plan_micro_batches(&gs, PackingMode::DualKV, 4).unwrap();
        assert_eq!(dk.len(), 2);
        assert!(dk.iter().all(|b| b.len() == 1));
        let dk = plan_micro_batches(&gs, PackingMode::DualKV, 8).unwrap();
        assert_eq!(dk.len(), 1);
        assert!(matches!(
            plan_micro_batches(&gs, PackingMode::DualKV, 3),
            Err(Error::GroupTooLarge { size: 4, capacity: 3, .. })
        ));
        let st = plan_micro_batches(&gs, PackingMode::Standard, 3).unwrap();
        assert_eq!(st.iter().map(|b| b.iter().map(RolloutGroup::n).sum::<usize>()).collect::<Vec<_>>(), vec![3, 3, 2]);
        assert_eq!(st[1].iter().map(|g| g.prompt_id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
    }

    fn arb_groups() -> impl Strategy<Value = Vec<RolloutGroup>> {
        prop::collection::vec((0usize..6, prop::collection::vec((0usize..5, -2.0f64..2.0), 1..5), any::<u32>()), 1..5).prop_map(|specs| {
            specs
                .into_iter()
                .enumerate()
                .map(|(gi, (p, resps, salt))| {
                    let prompt = (0..p as u32).map(|t| salt.wrapping_add(t)).collect();
                    let responses = resps
                        .into_iter()
                        .map(|(l, a)| Response {
                            tokens: (0..l as u32).map(|t| salt ^ (t + 7)).collect(),
                            advantage: a,
                        })
                        .collect();
                    RolloutGroup::new(format!("g{gi}"), prompt, responses).unwrap()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn round_trip_and_token_saving(gs in arb_groups()) {
            let st = pack_standard(&gs).unwrap();
            let dk = pack_dualkv(&gs).unwrap();
            prop_assert_eq!(st.unpack().unwrap(), gs.clone());
            prop_assert_eq!(dk.unpack().unwrap(), gs.clone());
            let saving: usize = gs.iter().map(|g| (g.n() - 1) * g.prompt_len()).sum();
            prop_assert_eq!(st.total_tokens - dk.total_tokens, saving);
            prop_assert_eq!(st.total_tokens, st.token_ids.len());
            prop_assert_eq!(dk.total_tokens, gs.iter().map(|g| g.prompt_len() + g.response_lens().iter().sum::<usize>()).sum::<usize>());
            prop_assert!(validate_grouping(&[dk]).passed());
        }

        #[test]
        fn rho_matches_token_counts(n in 1u64..64, p in 0u64..5000, r in 1u64..5000) {
            let g = RolloutGroup::new(
                "x",
                vec![0; p as usize],
                (0..n).map(|_| Response { tokens: vec![1; r as usize], advantage: 0.0 }).collect(),
            ).unwrap();
            prop_assert_eq!(compute_rho(n, p, r).unwrap(), rho_of_groups(&[g]).unwrap());
        }
    }
}

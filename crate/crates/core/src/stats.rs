//! Sufficient statistics, marginal likelihood and leaf posteriors for one
//! soft tree, plus the incremental updates used by structure moves.
//!
//! For a tree with `d` leaves and residuals `R`, everything the sampler needs
//! is carried by
//!
//! ```text
//! Lambda = sum_i phi_i phi_i^T     (d x d, symmetric)
//! b      = sum_i R_i phi_i         (d)
//! rss    = sum_i R_i^2
//! ```
//!
//! stored unscaled; the noise variance is applied when the statistics are
//! consumed, so a new sigma never invalidates them.
//!
//! Every per-sample contribution is rounded to a fixed-point grid of 2^-60 and
//! accumulated in `i128`. Integer addition is associative, so the statistics
//! of a dataset are bitwise independent of how its rows are split across
//! workers or in which order partial results are merged.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::DataShard;
use crate::error::{invalid, Result, SbartError};
use crate::tree::{route, Node, SoftTree};
use crate::wire::{put_i128s, put_u32, put_u64, Reader};

const SCALE: f64 = (1u64 << 60) as f64;
const INV_SCALE: f64 = 1.0 / SCALE;

/// Rounds toward zero onto the 2^-60 grid.
#[inline]
pub(crate) fn to_fixed(x: f64) -> i128 {
    let y = x * SCALE;
    if y.abs() < 9.0e18 {
        y as i64 as i128
    } else {
        y as i128
    }
}

#[inline]
pub(crate) fn from_fixed(v: i128) -> f64 {
    v as f64 * INV_SCALE
}

#[inline]
fn tri(i: usize, j: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    r * (r + 1) / 2 + c
}

fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// The response-dependent half of the statistics: `b`, `rss` and `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResponseStats {
    pub b: Vec<i128>,
    pub resid_ss: i128,
    pub n: u64,
}

impl ResponseStats {
    pub fn zeros(d: usize) -> Self {
        Self {
            b: vec![0; d],
            resid_ss: 0,
            n: 0,
        }
    }

    fn add(&mut self, other: &ResponseStats) {
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
        self.resid_ss += other.resid_ss;
        self.n += other.n;
    }
}

/// Exact sufficient statistics of one tree over a set of samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuffStats {
    dim: usize,
    lambda: Vec<i128>,
    response: ResponseStats,
}

impl SuffStats {
    pub fn zeros(d: usize) -> Self {
        Self {
            dim: d,
            lambda: vec![0; tri_len(d)],
            response: ResponseStats::zeros(d),
        }
    }

    pub(crate) fn from_parts(dim: usize, lambda: Vec<i128>, response: ResponseStats) -> Result<Self> {
        if lambda.len() != tri_len(dim) || response.b.len() != dim {
            return invalid(format!(
                "statistics parts do not match dimension {dim} ({} lambda, {} b entries)",
                lambda.len(),
                response.b.len()
            ));
        }
        Ok(Self {
            dim,
            lambda,
            response,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> u64 {
        self.response.n
    }

    /// Unscaled `Lambda[i][j]`.
    pub fn lambda(&self, i: usize, j: usize) -> f64 {
        from_fixed(self.lambda[tri(i, j)])
    }

    pub fn b(&self, i: usize) -> f64 {
        from_fixed(self.response.b[i])
    }

    pub fn resid_ss(&self) -> f64 {
        from_fixed(self.response.resid_ss)
    }

    #[cfg(test)]
    pub(crate) fn raw_entry(&self, i: usize, j: usize) -> i128 {
        self.lambda[tri(i, j)]
    }

    pub fn response(&self) -> &ResponseStats {
        &self.response
    }

    pub(crate) fn into_lambda(self) -> Vec<i128> {
        self.lambda
    }

    /// Dense unscaled `Lambda`, row-major.
    pub fn lambda_dense(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = self.lambda(i, j);
            }
        }
        out
    }

    /// `1^T Lambda 1`, which equals `n` because every `phi_i` sums to one.
    pub fn total_mass(&self) -> f64 {
        let d = self.dim;
        let mut acc: i128 = 0;
        for i in 0..d {
            for j in 0..=i {
                let v = self.lambda[tri(i, j)];
                acc += if i == j { v } else { 2 * v };
            }
        }
        from_fixed(acc)
    }

    /// Checks `1^T Lambda 1 = n` to a relative 1e-10.
    pub fn check_mass(&self) -> Result<()> {
        let n = self.n() as f64;
        let mass = self.total_mass();
        if (mass - n).abs() > 1e-10 * n.max(1.0) {
            return Err(SbartError::Consistency(format!(
                "statistics mass {mass} does not match sample count {n}"
            )));
        }
        Ok(())
    }

    #[inline]
    fn add_sample(&mut self, phi: &[f64], r: f64) {
        accumulate_lambda(&mut self.lambda, phi);
        accumulate_response(&mut self.response, phi, r);
    }

    /// Relative Frobenius distance between the two `Lambda` matrices plus the
    /// two `b` vectors; used by tests and drift checks.
    pub fn relative_difference(&self, other: &SuffStats) -> f64 {
        if self.dim != other.dim {
            return f64::INFINITY;
        }
        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let a = self.lambda(i, j);
                diff += (a - other.lambda(i, j)).powi(2);
                norm += a * a;
            }
            let a = self.b(i);
            diff += (a - other.b(i)).powi(2);
            norm += a * a;
        }
        (diff / norm.max(f64::MIN_POSITIVE)).sqrt()
    }

    /// Wire size of [`SuffStats::encode`] for `d` leaves.
    pub fn encoded_len(d: usize) -> usize {
        4 + 8 + 16 * (tri_len(d) + d + 1)
    }

    /// Header `{d: u32, n: u64}`, lower triangle of `Lambda`, `b`, `rss`; all
    /// accumulators as little-endian `i128` fixed point.
    pub fn encode(&self, buf: &mut Vec<u8>) {
        put_u32(buf, self.dim as u32);
        put_u64(buf, self.response.n);
        put_i128s(buf, &self.lambda);
        put_i128s(buf, &self.response.b);
        put_i128s(buf, &[self.response.resid_ss]);
    }

    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader::new(bytes);
        let s = Self::read(&mut r)?;
        Ok((s, r.position()))
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let d = r.u32()? as usize;
        let n = r.u64()?;
        let lambda = r.i128_vec(tri_len(d))?;
        let b = r.i128_vec(d)?;
        let resid_ss = r.i128()?;
        Self::from_parts(d, lambda, ResponseStats { b, resid_ss, n })
    }
}

#[inline]
fn accumulate_lambda(lambda: &mut [i128], phi: &[f64]) {
    let mut k = 0;
    for i in 0..phi.len() {
        let pi = phi[i];
        for &pj in &phi[..=i] {
            lambda[k] += to_fixed(pi * pj);
            k += 1;
        }
    }
}

#[inline]
fn accumulate_response(resp: &mut ResponseStats, phi: &[f64], r: f64) {
    for (b, &p) in resp.b.iter_mut().zip(phi) {
        *b += to_fixed(r * p);
    }
    resp.resid_ss += to_fixed(r * r);
    resp.n += 1;
}

fn check_shard(shard: &DataShard, residuals: &[f64], tree: &SoftTree) -> Result<()> {
    if residuals.len() != shard.n() {
        return invalid(format!(
            "{} residuals for a shard of {} rows",
            residuals.len(),
            shard.n()
        ));
    }
    tree.validate(shard.p())
}

/// Accumulates the statistics of `tree` over every row of the shard.
pub fn compute_suff_stats(shard: &DataShard, residuals: &[f64], tree: &SoftTree) -> Result<SuffStats> {
    check_shard(shard, residuals, tree)?;
    Ok(scan_full(shard, residuals, tree))
}

pub(crate) fn scan_full(shard: &DataShard, residuals: &[f64], tree: &SoftTree) -> SuffStats {
    let mut stats = SuffStats::zeros(tree.leaf_count());
    let mut stack = Vec::with_capacity(8);
    let mut phi = Vec::with_capacity(stats.dim);
    for (i, &r) in residuals.iter().enumerate() {
        tree.fill_leaf_probs(shard.row(i), &mut stack, &mut phi);
        stats.add_sample(&phi, r);
    }
    stats
}

/// Sums statistics over disjoint sample sets.
pub fn merge_suff_stats(parts: &[SuffStats]) -> Result<SuffStats> {
    let first = parts
        .first()
        .ok_or_else(|| SbartError::InvalidArgument("nothing to merge".into()))?;
    let mut out = first.clone();
    for (rank, part) in parts.iter().enumerate().skip(1) {
        out.merge_from(part, rank)?;
    }
    Ok(out)
}

impl SuffStats {
    pub(crate) fn merge_from(&mut self, part: &SuffStats, rank: usize) -> Result<()> {
        if part.dim != self.dim {
            return Err(SbartError::Protocol {
                rank,
                msg: format!("statistics of dimension {} where {} was expected", part.dim, self.dim),
            });
        }
        for (a, b) in self.lambda.iter_mut().zip(&part.lambda) {
            *a += b;
        }
        self.response.add(&part.response);
        Ok(())
    }
}

/// How a candidate tree differs from the incumbent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructureChange {
    /// Incumbent leaf `leaf` became candidate leaves `leaf` and `leaf + 1`.
    Grow { leaf: usize },
    /// Incumbent leaves `left_leaf` and `left_leaf + 1` merged into one.
    Prune { left_leaf: usize },
    /// The rule at internal node `node` changed.
    Change { node: usize },
}

/// Fresh rows of `Lambda` and entries of `b` for the candidate leaves whose
/// routing probabilities differ from the incumbent's.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatsDelta {
    pub candidate_dim: usize,
    /// Candidate leaf indices, ascending.
    pub affected: Vec<usize>,
    /// `affected.len() x candidate_dim`, row-major.
    pub rows: Vec<i128>,
    pub b: Vec<i128>,
}

impl StatsDelta {
    fn zeros(candidate_dim: usize, affected: Vec<usize>) -> Self {
        let k = affected.len();
        Self {
            candidate_dim,
            affected,
            rows: vec![0; k * candidate_dim],
            b: vec![0; k],
        }
    }

    pub(crate) fn merge_from(&mut self, part: &StatsDelta, rank: usize) -> Result<()> {
        if part.candidate_dim != self.candidate_dim || part.affected != self.affected {
            return Err(SbartError::Protocol {
                rank,
                msg: "delta statistics cover a different set of leaves".into(),
            });
        }
        for (a, b) in self.rows.iter_mut().zip(&part.rows) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&part.b) {
            *a += b;
        }
        Ok(())
    }

    pub fn encode(&self, buf: &mut Vec<u8>) {
        put_u32(buf, self.candidate_dim as u32);
        put_u32(buf, self.affected.len() as u32);
        for &a in &self.affected {
            put_u32(buf, a as u32);
        }
        put_i128s(buf, &self.rows);
        put_i128s(buf, &self.b);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let dim = r.u32()? as usize;
        let k = r.u32()? as usize;
        let affected = (0..k).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if affected.iter().any(|&a| a >= dim) {
            return invalid("affected leaf index out of range");
        }
        let rows = r.i128_vec(k * dim)?;
        let b = r.i128_vec(k)?;
        Ok(Self {
            candidate_dim: dim,
            affected,
            rows,
            b,
        })
    }

    pub fn encoded_len(&self) -> usize {
        8 + 4 * self.affected.len() + 16 * (self.rows.len() + self.b.len())
    }
}

/// Candidate leaf indices whose probabilities differ from the incumbent's,
/// and for every other candidate leaf the incumbent leaf it copies.
fn change_layout(change: StructureChange, incumbent: &SoftTree, candidate: &SoftTree) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let dc = candidate.leaf_count();
    match change {
        StructureChange::Grow { leaf } => {
            if leaf >= incumbent.leaf_count() || dc != incumbent.leaf_count() + 1 {
                return invalid("grow does not match the tree shapes");
            }
            let map = (0..dc)
                .map(|k| match k {
                    k if k < leaf => Some(k),
                    k if k == leaf || k == leaf + 1 => None,
                    k => Some(k - 1),
                })
                .collect();
            Ok((vec![leaf, leaf + 1], map))
        }
        StructureChange::Change { node } => {
            if dc != incumbent.leaf_count() || candidate.nodes().get(node).is_none_or(Node::is_leaf) {
                return invalid("change does not match the tree shapes");
            }
            let range = candidate.leaf_range(node);
            let map = (0..dc).map(|k| (!range.contains(&k)).then_some(k)).collect();
            Ok((range.collect(), map))
        }
        StructureChange::Prune { .. } => Ok((Vec::new(), (0..dc).map(Some).collect())),
    }
}

/// Result of one pass over a shard for a structure proposal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructurePartial {
    /// Incumbent `b`, `rss` and `n` for the current residuals.
    pub incumbent: ResponseStats,
    /// Incumbent `Lambda` (lower triangle), when a full refresh was requested.
    pub incumbent_lambda: Option<Vec<i128>>,
    /// Candidate rows, absent for prunes (derived algebraically instead).
    pub delta: Option<StatsDelta>,
}

impl StructurePartial {
    pub(crate) fn merge_from(&mut self, part: &StructurePartial, rank: usize) -> Result<()> {
        if part.incumbent.b.len() != self.incumbent.b.len() {
            return Err(SbartError::Protocol {
                rank,
                msg: format!(
                    "incumbent statistics of dimension {} where {} was expected",
                    part.incumbent.b.len(),
                    self.incumbent.b.len()
                ),
            });
        }
        self.incumbent.add(&part.incumbent);
        match (&mut self.incumbent_lambda, &part.incumbent_lambda) {
            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (None, None) => {}
            _ => {
                return Err(SbartError::Protocol {
                    rank,
                    msg: "mismatched full-refresh flag".into(),
                })
            }
        }
        match (&mut self.delta, &part.delta) {
            (Some(a), Some(b)) => a.merge_from(b, rank)?,
            (None, None) => {}
            _ => {
                return Err(SbartError::Protocol {
                    rank,
                    msg: "mismatched delta presence".into(),
                })
            }
        }
        Ok(())
    }

    pub fn encode(&self, buf: &mut Vec<u8>) {
        let d = self.incumbent.b.len();
        put_u32(buf, d as u32);
        put_u64(buf, self.incumbent.n);
        put_i128s(buf, &[self.incumbent.resid_ss]);
        put_i128s(buf, &self.incumbent.b);
        match &self.incumbent_lambda {
            Some(l) => {
                buf.push(1);
                put_i128s(buf, l);
            }
            None => buf.push(0),
        }
        match &self.delta {
            Some(delta) => {
                buf.push(1);
                delta.encode(buf);
            }
            None => buf.push(0),
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let d = r.u32()? as usize;
        let n = r.u64()?;
        let resid_ss = r.i128()?;
        let b = r.i128_vec(d)?;
        let incumbent_lambda = match r.u8()? {
            0 => None,
            1 => Some(r.i128_vec(tri_len(d))?),
            f => return invalid(format!("bad flag {f}")),
        };
        let delta = match r.u8()? {
            0 => None,
            1 => Some(StatsDelta::read(r)?),
            f => return invalid(format!("bad flag {f}")),
        };
        Ok(Self {
            incumbent: ResponseStats { b, resid_ss, n },
            incumbent_lambda,
            delta,
        })
    }
}

/// One pass over the shard for a structure proposal.
///
/// `residual(i, phi)` returns the residual of row `i` given the incumbent's
/// leaf probabilities for that row; the engine uses it to rebuild the partial
/// residual on the fly.
pub(crate) fn scan_structure<F>(
    shard: &DataShard,
    incumbent: &SoftTree,
    full_refresh: bool,
    candidate: Option<(&SoftTree, StructureChange)>,
    mut residual: F,
) -> Result<StructurePartial>
where
    F: FnMut(usize, &[f64]) -> f64,
{
    let d = incumbent.leaf_count();
    let mut resp = ResponseStats::zeros(d);
    let mut lambda = full_refresh.then(|| vec![0i128; tri_len(d)]);
    let layout = match candidate {
        Some((cand, change)) if !matches!(change, StructureChange::Prune { .. }) => {
            let (affected, _) = change_layout(change, incumbent, cand)?;
            Some((cand, change, affected))
        }
        _ => None,
    };
    let mut delta = layout
        .as_ref()
        .map(|(cand, _, affected)| StatsDelta::zeros(cand.leaf_count(), affected.clone()));
    let grow_rule = match &layout {
        Some((cand, StructureChange::Grow { leaf }, _)) => {
            let node = cand.leaf_node_index(*leaf).expect("grown leaf exists") - 1;
            match cand.nodes()[node] {
                Node::Split { rule } => Some((*leaf, rule, cand.bandwidth())),
                Node::Leaf { .. } => return invalid("grown leaf has no parent split"),
            }
        }
        _ => None,
    };

    let mut stack = Vec::with_capacity(8);
    let mut phi = Vec::with_capacity(d);
    let mut phi_c = Vec::with_capacity(d + 1);
    for i in 0..shard.n() {
        let x = shard.row(i);
        incumbent.fill_leaf_probs(x, &mut stack, &mut phi);
        let r = residual(i, &phi);
        accumulate_response(&mut resp, &phi, r);
        if let Some(l) = lambda.as_mut() {
            accumulate_lambda(l, &phi);
        }
        if let (Some(delta), Some((cand, _, _))) = (delta.as_mut(), layout.as_ref()) {
            match grow_rule {
                Some((leaf, rule, bw)) => {
                    // Same multiplication chain as a full traversal of the
                    // candidate, so the result is bitwise identical to it.
                    let mass = phi[leaf];
                    let (left, right) = route(x[rule.var], rule.cut, bw);
                    phi_c.clear();
                    phi_c.extend_from_slice(&phi[..leaf]);
                    phi_c.push(mass * left);
                    phi_c.push(mass * right);
                    phi_c.extend_from_slice(&phi[leaf + 1..]);
                }
                None => cand.fill_leaf_probs(x, &mut stack, &mut phi_c),
            }
            let dc = delta.candidate_dim;
            for (slot, &a) in delta.affected.iter().enumerate() {
                let pa = phi_c[a];
                let row = &mut delta.rows[slot * dc..(slot + 1) * dc];
                for (acc, &pk) in row.iter_mut().zip(&phi_c) {
                    *acc += to_fixed(pa * pk);
                }
                delta.b[slot] += to_fixed(r * pa);
            }
        }
    }
    Ok(StructurePartial {
        incumbent: resp,
        incumbent_lambda: lambda,
        delta,
    })
}

/// Assembles candidate statistics from the incumbent's and a merged delta.
pub fn assemble_candidate(
    incumbent: &SuffStats,
    incumbent_tree: &SoftTree,
    candidate_tree: &SoftTree,
    change: StructureChange,
    delta: Option<&StatsDelta>,
) -> Result<SuffStats> {
    if incumbent.dim != incumbent_tree.leaf_count() {
        return invalid("incumbent statistics do not match the incumbent tree");
    }
    if let StructureChange::Prune { left_leaf } = change {
        return prune_suff_stats(incumbent, incumbent_tree, left_leaf, left_leaf + 1);
    }
    let delta = delta.ok_or_else(|| SbartError::InvalidArgument("grow/change needs delta rows".into()))?;
    let (affected, map) = change_layout(change, incumbent_tree, candidate_tree)?;
    if delta.affected != affected || delta.candidate_dim != candidate_tree.leaf_count() {
        return invalid("delta does not match the proposed change");
    }
    let dc = delta.candidate_dim;
    let slot_of = |k: usize| affected.iter().position(|&a| a == k);
    let mut lambda = vec![0i128; tri_len(dc)];
    for i in 0..dc {
        for j in 0..=i {
            lambda[tri(i, j)] = match (slot_of(i), slot_of(j)) {
                (Some(s), _) => delta.rows[s * dc + j],
                (None, Some(s)) => delta.rows[s * dc + i],
                (None, None) => {
                    incumbent.lambda[tri(map[i].expect("unaffected"), map[j].expect("unaffected"))]
                }
            };
        }
    }
    let b = (0..dc)
        .map(|k| match slot_of(k) {
            Some(s) => delta.b[s],
            None => incumbent.response.b[map[k].expect("unaffected")],
        })
        .collect();
    SuffStats::from_parts(
        dc,
        lambda,
        ResponseStats {
            b,
            resid_ss: incumbent.response.resid_ss,
            n: incumbent.response.n,
        },
    )
}

/// Statistics after pruning the sibling leaves `left_leaf` and `right_leaf`
/// of `tree`, derived without touching the data.
pub fn prune_suff_stats(stats: &SuffStats, tree: &SoftTree, left_leaf: usize, right_leaf: usize) -> Result<SuffStats> {
    let d = stats.dim;
    if d != tree.leaf_count() {
        return invalid("statistics do not match the tree");
    }
    let siblings = right_leaf == left_leaf + 1
        && tree
            .leaf_node_index(left_leaf)
            .is_some_and(|node| node > 0 && tree.is_prunable(node - 1));
    if !siblings {
        return invalid(format!("leaves {left_leaf} and {right_leaf} are not siblings"));
    }
    let (l1, l2) = (left_leaf, right_leaf);
    // candidate index -> incumbent index for unmerged leaves
    let old = |k: usize| if k < l1 { k } else { k + 1 };
    let dc = d - 1;
    let mut lambda = vec![0i128; tri_len(dc)];
    for i in 0..dc {
        for j in 0..=i {
            lambda[tri(i, j)] = match (i == l1, j == l1) {
                (true, true) => {
                    stats.lambda[tri(l1, l1)] + 2 * stats.lambda[tri(l1, l2)] + stats.lambda[tri(l2, l2)]
                }
                (true, false) => stats.lambda[tri(l1, old(j))] + stats.lambda[tri(l2, old(j))],
                (false, true) => stats.lambda[tri(old(i), l1)] + stats.lambda[tri(old(i), l2)],
                (false, false) => stats.lambda[tri(old(i), old(j))],
            };
        }
    }
    let b = (0..dc)
        .map(|k| {
            if k == l1 {
                stats.response.b[l1] + stats.response.b[l2]
            } else {
                stats.response.b[old(k)]
            }
        })
        .collect();
    SuffStats::from_parts(
        dc,
        lambda,
        ResponseStats {
            b,
            resid_ss: stats.response.resid_ss,
            n: stats.response.n,
        },
    )
}

/// Statistics of `tree_after_grow`, whose leaves `grown_leaf` and
/// `grown_leaf + 1` replaced one leaf of the tree `stats` was computed for.
/// Only the two new rows are accumulated from the data.
pub fn grow_suff_stats(
    stats: &SuffStats,
    shard: &DataShard,
    residuals: &[f64],
    tree_after_grow: &SoftTree,
    grown_leaf: usize,
) -> Result<SuffStats> {
    check_shard(shard, residuals, tree_after_grow)?;
    let split = tree_after_grow
        .leaf_node_index(grown_leaf)
        .filter(|&n| n > 0 && tree_after_grow.is_prunable(n - 1))
        .ok_or_else(|| SbartError::InvalidArgument(format!("leaf {grown_leaf} was not just grown")))?
        - 1;
    let incumbent = tree_after_grow.prune(split)?;
    if incumbent.leaf_count() != stats.dim {
        return invalid("statistics do not match the tree before the grow");
    }
    let change = StructureChange::Grow { leaf: grown_leaf };
    let partial = scan_structure(shard, &incumbent, false, Some((tree_after_grow, change)), |i, _| residuals[i])?;
    assemble_candidate(stats, &incumbent, tree_after_grow, change, partial.delta.as_ref())
}

/// Statistics of `tree_after_change`, which differs from the tree `stats` was
/// computed for only in the rule at `changed_node`. Rows of the leaves below
/// that node (and their cross terms) are recomputed; all others are copied.
pub fn change_suff_stats(
    stats: &SuffStats,
    shard: &DataShard,
    residuals: &[f64],
    tree_after_change: &SoftTree,
    changed_node: usize,
) -> Result<SuffStats> {
    check_shard(shard, residuals, tree_after_change)?;
    if stats.dim != tree_after_change.leaf_count() {
        return invalid("statistics do not match the changed tree");
    }
    let change = StructureChange::Change { node: changed_node };
    // Only candidate probabilities are needed; the incumbent pass is a
    // placeholder with the same shape.
    let partial = scan_structure(
        shard,
        &SoftTree::stump(0.0, 1.0),
        false,
        None,
        |i, _| residuals[i],
    )?;
    debug_assert_eq!(partial.incumbent.n as usize, shard.n());
    let (affected, _) = change_layout(change, tree_after_change, tree_after_change)?;
    let mut delta = StatsDelta::zeros(stats.dim, affected);
    let mut stack = Vec::with_capacity(8);
    let mut phi = Vec::with_capacity(stats.dim);
    let dc = stats.dim;
    for (i, &r) in residuals.iter().enumerate() {
        tree_after_change.fill_leaf_probs(shard.row(i), &mut stack, &mut phi);
        for (slot, &a) in delta.affected.iter().enumerate() {
            let pa = phi[a];
            for (acc, &pk) in delta.rows[slot * dc..(slot + 1) * dc].iter_mut().zip(&phi) {
                *acc += to_fixed(pa * pk);
            }
            delta.b[slot] += to_fixed(r * pa);
        }
    }
    assemble_candidate(stats, tree_after_change, tree_after_change, change, Some(&delta))
}

/// Gaussian posterior of a tree's leaf values given its statistics.
///
/// With `v = sigma_mu^2 / m` the per-leaf prior variance, the posterior
/// precision is `Lambda / sigma^2 + I / v` and the mean solves
/// `precision * mean = b / sigma^2`.
#[derive(Clone, Debug)]
pub struct LeafPosterior {
    pub mean: Vec<f64>,
    chol_lower: DMatrix<f64>,
    log_det_precision: f64,
    quad: f64,
    /// Whether the factorization needed diagonal jitter.
    pub jittered: bool,
}

impl LeafPosterior {
    pub fn new(stats: &SuffStats, sigma: f64, leaf_variance: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return invalid(format!("sigma must be positive, got {sigma}"));
        }
        if !(leaf_variance > 0.0) || !leaf_variance.is_finite() {
            return invalid(format!("leaf prior variance must be positive, got {leaf_variance}"));
        }
        let d = stats.dim;
        let s2 = sigma * sigma;
        let mut precision = DMatrix::from_fn(d, d, |i, j| stats.lambda(i, j) / s2);
        for i in 0..d {
            precision[(i, i)] += 1.0 / leaf_variance;
        }
        let h = DVector::from_fn(d, |i, _| stats.b(i) / s2);
        let (chol, jittered) = match precision.clone().cholesky() {
            Some(c) => (c, false),
            None => {
                let jitter = 1e-10 * precision.trace() / d as f64;
                for i in 0..d {
                    precision[(i, i)] += jitter;
                }
                let c = precision
                    .cholesky()
                    .ok_or_else(|| SbartError::Consistency("leaf posterior precision is not positive definite".into()))?;
                (c, true)
            }
        };
        let mean = chol.solve(&h);
        let l = chol.unpack();
        let log_det_precision = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
        let quad = h.dot(&mean);
        Ok(Self {
            mean: mean.iter().copied().collect(),
            chol_lower: l,
            log_det_precision,
            quad,
            jittered,
        })
    }

    /// Posterior covariance `Omega`.
    pub fn omega(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        let l_inv = self
            .chol_lower
            .clone()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("nonsingular factor");
        l_inv.transpose() * l_inv
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.mean.len();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let offset = self
            .chol_lower
            .transpose()
            .solve_upper_triangular(&z)
            .expect("nonsingular factor");
        self.mean.iter().zip(offset.iter()).map(|(m, o)| m + o).collect()
    }
}

/// Log marginal likelihood of the residuals with the leaf values integrated
/// out under independent `N(0, sigma_mu^2 / m)` priors.
pub fn marginal_log_likelihood(stats: &SuffStats, sigma: f64, sigma_mu: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return invalid("tree count must be positive");
    }
    let v = sigma_mu * sigma_mu / m as f64;
    let post = LeafPosterior::new(stats, sigma, v)?;
    Ok(marginal_from_posterior(stats, &post, sigma, v))
}

pub(crate) fn marginal_from_posterior(stats: &SuffStats, post: &LeafPosterior, sigma: f64, leaf_variance: f64) -> f64 {
    let n = stats.n() as f64;
    let d = stats.dim as f64;
    let s2 = sigma * sigma;
    -0.5 * n * (2.0 * std::f64::consts::PI * s2).ln() - stats.resid_ss() / (2.0 * s2) - 0.5 * d * leaf_variance.ln()
        - 0.5 * post.log_det_precision
        + 0.5 * post.quad
}

/// Draws leaf values from their Gaussian full conditional.
pub fn draw_leaf_params<R: Rng + ?Sized>(
    stats: &SuffStats,
    sigma: f64,
    sigma_mu: f64,
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if m == 0 {
        return invalid("tree count must be positive");
    }
    let post = LeafPosterior::new(stats, sigma, sigma_mu * sigma_mu / m as f64)?;
    Ok(post.draw(rng))
}

//! Shard-local state and computation for one rank.

use crate::data::DataShard;
use crate::error::{invalid, Result, SbartError};
use crate::problem::Mode;
use crate::sampler::{apply_proposal, draw_latent_classification, Decision, MoveProposal};
use crate::stats::{scan_full, scan_structure, to_fixed, StructurePartial, SuffStats};
use crate::tree::{Forest, SoftTree};

use super::message::SyncReport;

/// What every rank derives identically from the job before the first
/// message.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngineInit {
    pub trees: usize,
    pub bandwidth: f64,
    pub offset: f64,
    pub mode: Mode,
}

#[derive(Clone, Debug)]
struct Pending {
    tree: usize,
    candidate: SoftTree,
    tau: Option<f64>,
    decision: Option<Decision>,
}

/// A rank's replica of the forest plus the cached fits, working response and
/// partial residuals of its shard.
#[derive(Clone, Debug)]
pub struct ShardEngine {
    shard: DataShard,
    forest: Forest,
    fits: Vec<f64>,
    work: Vec<f64>,
    resid: Vec<f64>,
    offset: f64,
    mode: Mode,
    sigma: f64,
    pending: Option<Pending>,
}

impl ShardEngine {
    pub fn new(shard: DataShard, init: EngineInit) -> Result<Self> {
        let n = shard.n();
        if init.mode == Mode::Classification && shard.y().iter().any(|&v| v != 0.0 && v != 1.0) {
            return invalid("classification shard has labels other than 0 and 1");
        }
        Ok(Self {
            forest: Forest::stumps(init.trees, init.bandwidth)?,
            fits: vec![0.0; n],
            work: shard.y().to_vec(),
            resid: vec![0.0; n],
            offset: init.offset,
            mode: init.mode,
            sigma: 1.0,
            pending: None,
            shard,
        })
    }

    pub fn shard(&self) -> &DataShard {
        &self.shard
    }

    pub fn forest(&self) -> &Forest {
        &self.forest
    }

    pub fn fits(&self) -> &[f64] {
        &self.fits
    }

    pub fn working_response(&self) -> &[f64] {
        &self.work
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn tree(&self, j: usize) -> Result<&SoftTree> {
        self.forest
            .trees
            .get(j)
            .ok_or_else(|| SbartError::InvalidArgument(format!("tree index {j} out of range")))
    }

    /// Rebuilds the partial residuals of tree `j` and accumulates the
    /// incumbent's statistics together with the candidate's fresh rows.
    pub fn structure(&mut self, j: usize, proposal: &MoveProposal, full_refresh: bool) -> Result<StructurePartial> {
        let tree = self.tree(j)?.clone();
        let (candidate, change) = apply_proposal(&tree, proposal)?;
        let leaves = tree.leaf_params();
        let Self {
            shard,
            fits,
            work,
            resid,
            offset,
            ..
        } = self;
        let off = *offset;
        let out = scan_structure(shard, &tree, full_refresh, Some((&candidate, change)), |i, phi| {
            let g: f64 = phi.iter().zip(&leaves).map(|(p, v)| p * v).sum();
            let r = work[i] - off - fits[i] + g;
            resid[i] = r;
            r
        })?;
        self.pending = Some(Pending {
            tree: j,
            candidate,
            tau: None,
            decision: None,
        });
        Ok(out)
    }

    fn pending_for(&mut self, j: usize) -> Result<&mut Pending> {
        match self.pending.as_mut() {
            Some(p) if p.tree == j => Ok(p),
            _ => Err(SbartError::Consistency(format!("no structure proposal pending for tree {j}"))),
        }
    }

    /// Full statistics of the winning structure with bandwidth `tau`.
    pub fn bandwidth(&mut self, j: usize, structure_accepted: bool, tau: f64) -> Result<SuffStats> {
        let base = if structure_accepted {
            self.pending_for(j)?.candidate.clone()
        } else {
            self.pending_for(j)?;
            self.tree(j)?.clone()
        };
        let tree = base.with_bandwidth(tau)?;
        self.pending_for(j)?.tau = Some(tau);
        Ok(scan_full(&self.shard, &self.resid, &tree))
    }

    pub fn decide(&mut self, j: usize, decision: Decision) -> Result<()> {
        let p = self.pending_for(j)?;
        if decision.bandwidth_accepted && p.tau.is_none() {
            return Err(SbartError::Consistency("bandwidth accepted without a proposal".into()));
        }
        p.decision = Some(decision);
        Ok(())
    }

    /// Installs the new tree `j` and refreshes the cached fits.
    pub fn apply_leaves(&mut self, j: usize, leaves: &[f64]) -> Result<()> {
        let p = self.pending_for(j)?.clone();
        let d = p
            .decision
            .ok_or_else(|| SbartError::Consistency("leaf parameters arrived before the decision".into()))?;
        let mut tree = if d.structure_accepted { p.candidate } else { self.tree(j)?.clone() };
        if d.bandwidth_accepted {
            tree.set_bandwidth(p.tau.expect("checked in decide"))?;
        }
        tree.set_leaf_params(leaves)?;
        let mut stack = Vec::with_capacity(8);
        for i in 0..self.shard.n() {
            let g = tree.predict_with(self.shard.row(i), &mut stack);
            self.fits[i] = self.work[i] - self.offset - self.resid[i] + g;
        }
        self.forest.trees[j] = tree;
        self.pending = None;
        Ok(())
    }

    /// Exact residual sum of squares of the whole forest on this shard.
    pub fn sigma_partial(&self) -> (i128, u64) {
        let ss = (0..self.shard.n())
            .map(|i| {
                let e = self.work[i] - self.offset - self.fits[i];
                to_fixed(e * e)
            })
            .sum();
        (ss, self.shard.n() as u64)
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        self.sigma = sigma;
    }

    pub fn refresh_latent(&mut self, seed: u64) -> Result<()> {
        if self.mode != Mode::Classification {
            return invalid("latent refresh requested in regression mode");
        }
        let means: Vec<f64> = self.fits.iter().map(|f| self.offset + f).collect();
        self.work = draw_latent_classification(&means, self.shard.y(), seed, self.shard.global_offset)?;
        for (z, y) in self.work.iter().zip(self.shard.y()) {
            if (*z > 0.0) != (*y == 1.0) {
                return Err(SbartError::Consistency("latent sign disagrees with its label".into()));
            }
        }
        Ok(())
    }

    /// Recomputes the fits from the forest, reports the largest drift of the
    /// cached values, and replaces them with the recomputation.
    pub fn sync_report(&mut self) -> SyncReport {
        let mut drift: f64 = 0.0;
        let mut stack = Vec::with_capacity(8);
        for i in 0..self.shard.n() {
            let x = self.shard.row(i);
            let full: f64 = self.forest.trees.iter().map(|t| t.predict_with(x, &mut stack)).sum();
            drift = drift.max((full - self.fits[i]).abs());
            self.fits[i] = full;
        }
        SyncReport {
            forest_hash: crate::sampler::forest_hash(&self.forest),
            drift,
            response_max: self.work.iter().fold(0.0_f64, |m, v| m.max((v - self.offset).abs())),
        }
    }
}

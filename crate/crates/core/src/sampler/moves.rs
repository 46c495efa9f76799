use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::priors::TreeShapePrior;
use crate::stats::StructureChange;
use crate::tree::{SoftTree, SplitRule};

use super::MoveWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MoveKind {
    Grow,
    Prune,
    Change,
}

impl MoveKind {
    pub fn index(self) -> usize {
        match self {
            MoveKind::Grow => 0,
            MoveKind::Prune => 1,
            MoveKind::Change => 2,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(MoveKind::Grow),
            1 => Ok(MoveKind::Prune),
            2 => Ok(MoveKind::Change),
            k => invalid(format!("unknown move kind {k}")),
        }
    }
}

/// A proposed structure move. `target_node` is a preorder index: the leaf to
/// split, the split to collapse, or the split whose rule is replaced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoveProposal {
    pub kind: MoveKind,
    pub target_node: usize,
    pub new_rule: Option<SplitRule>,
}

/// Probabilities of proposing grow, prune and change from `tree`. A
/// single-leaf tree can only grow.
pub fn move_probabilities(tree: &SoftTree, weights: &MoveWeights) -> [f64; 3] {
    if tree.is_stump() {
        [1.0, 0.0, 0.0]
    } else {
        let total = weights.grow + weights.prune + weights.change;
        [weights.grow / total, weights.prune / total, weights.change / total]
    }
}

fn draw_rule<R: Rng + ?Sized>(split_probs: &[f64], rng: &mut R) -> SplitRule {
    let var = WeightedIndex::new(split_probs)
        .map(|w| w.sample(rng))
        .unwrap_or_else(|_| rng.random_range(0..split_probs.len()));
    SplitRule::new(var, rng.random::<f64>())
}

pub fn propose_move<R: Rng + ?Sized>(
    tree: &SoftTree,
    split_probs: &[f64],
    weights: &MoveWeights,
    rng: &mut R,
) -> MoveProposal {
    let probs = move_probabilities(tree, weights);
    let u: f64 = rng.random();
    let kind = if u < probs[0] {
        MoveKind::Grow
    } else if u < probs[0] + probs[1] {
        MoveKind::Prune
    } else {
        MoveKind::Change
    };
    match kind {
        MoveKind::Grow => {
            let leaves = tree.leaf_nodes();
            let target_node = leaves[rng.random_range(0..leaves.len())];
            MoveProposal {
                kind,
                target_node,
                new_rule: Some(draw_rule(split_probs, rng)),
            }
        }
        MoveKind::Prune => {
            let nodes = tree.prunable_nodes();
            MoveProposal {
                kind,
                target_node: nodes[rng.random_range(0..nodes.len())],
                new_rule: None,
            }
        }
        MoveKind::Change => {
            let nodes = tree.internal_nodes();
            let target_node = nodes[rng.random_range(0..nodes.len())];
            MoveProposal {
                kind,
                target_node,
                new_rule: Some(draw_rule(split_probs, rng)),
            }
        }
    }
}

/// The candidate tree and how its leaves relate to the incumbent's.
pub fn apply_proposal(tree: &SoftTree, proposal: &MoveProposal) -> Result<(SoftTree, StructureChange)> {
    let node = proposal.target_node;
    let leaves_before = |t: &SoftTree| t.nodes()[..node.min(t.nodes().len())].iter().filter(|n| n.is_leaf()).count();
    match (proposal.kind, proposal.new_rule) {
        (MoveKind::Grow, Some(rule)) => {
            let cand = tree.grow(node, rule)?;
            Ok((cand, StructureChange::Grow { leaf: leaves_before(tree) }))
        }
        (MoveKind::Prune, None) => {
            let cand = tree.prune(node)?;
            Ok((cand, StructureChange::Prune { left_leaf: leaves_before(tree) }))
        }
        (MoveKind::Change, Some(rule)) => Ok((tree.change(node, rule)?, StructureChange::Change { node })),
        (kind, _) => invalid(format!("{kind:?} proposal with a missing or extra rule")),
    }
}

/// Log Metropolis-Hastings ratio for moving from `old` to `new`, given the
/// two trees' log marginal likelihoods.
///
/// The split-variable and cutpoint factors of the proposal equal those of the
/// prior and cancel, leaving the shape prior and the move-choice
/// probabilities.
pub fn acceptance_log_ratio(
    old: &SoftTree,
    old_log_ml: f64,
    new: &SoftTree,
    new_log_ml: f64,
    kind: MoveKind,
    shape: &TreeShapePrior,
    weights: &MoveWeights,
) -> f64 {
    let log_q = match kind {
        MoveKind::Grow => {
            let forward = move_probabilities(old, weights)[0].ln() - (old.leaf_count() as f64).ln();
            let back = move_probabilities(new, weights)[1].ln() - (new.prunable_nodes().len() as f64).ln();
            back - forward
        }
        MoveKind::Prune => {
            let forward = move_probabilities(old, weights)[1].ln() - (old.prunable_nodes().len() as f64).ln();
            let back = move_probabilities(new, weights)[0].ln() - (new.leaf_count() as f64).ln();
            back - forward
        }
        MoveKind::Change => 0.0,
    };
    log_q + (new_log_ml - old_log_ml) + (shape.log_tree_prior(new) - shape.log_tree_prior(old))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataShard;
    use crate::stats::{compute_suff_stats, marginal_log_likelihood};
    use crate::testing::random_tree;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stump_never_prunes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stump = SoftTree::stump(0.0, 0.1);
        for _ in 0..1000 {
            assert_eq!(propose_move(&stump, &[0.5, 0.5], &MoveWeights::default(), &mut rng).kind, MoveKind::Grow);
        }
    }

    #[test]
    fn one_hot_split_probs_fix_the_variable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tree = random_tree(&mut rng, 4, 5, 0.1);
        for _ in 0..1000 {
            let prop = propose_move(&tree, &[0.0, 0.0, 1.0, 0.0], &MoveWeights::default(), &mut rng);
            if let Some(rule) = prop.new_rule {
                assert_eq!(rule.var, 2);
            }
        }
    }

    #[test]
    fn move_frequencies_match_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tree = SoftTree::stump(0.0, 0.1).grow(0, SplitRule::new(0, 0.5)).unwrap();
        let w = MoveWeights::default();
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[propose_move(&tree, &[1.0], &w, &mut rng).kind.index()] += 1;
        }
        for (c, want) in counts.iter().zip([w.grow, w.prune, w.change]) {
            assert!((*c as f64 / n as f64 - want).abs() < 0.01);
        }
    }

    #[test]
    fn identical_change_has_zero_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tree = random_tree(&mut rng, 3, 4, 0.1);
        let r = acceptance_log_ratio(&tree, -3.0, &tree, -3.0, MoveKind::Change, &TreeShapePrior::default(), &MoveWeights::default());
        assert_eq!(r, 0.0);
    }

    #[test]
    fn grow_and_prune_ratios_are_opposite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = TreeShapePrior::default();
        let w = MoveWeights::default();
        for _ in 0..200 {
            let a = random_tree(&mut rng, 3, 5, 0.1);
            let leaf = a.leaf_nodes()[rng.random_range(0..a.leaf_count())];
            let b = a.grow(leaf, SplitRule::new(1, 0.3)).unwrap();
            let (ma, mb) = (rng.random::<f64>(), rng.random::<f64>());
            let up = acceptance_log_ratio(&a, ma, &b, mb, MoveKind::Grow, &shape, &w);
            let down = acceptance_log_ratio(&b, mb, &a, ma, MoveKind::Prune, &shape, &w);
            assert!((up + down).abs() < 1e-12);
        }
    }

    /// Posterior over the two models {stump, one split} by direct enumeration,
    /// compared with the Metropolis ratio and the proposal probabilities.
    #[test]
    fn two_model_bayes_factor() {
        let x = vec![0.1, 0.3, 0.5, 0.7, 0.9];
        let y = vec![-0.4, -0.2, 0.1, 0.3, 0.5];
        let shard = DataShard::new(x, y.clone(), 1, 0, crate::data::ColumnMeta::unit(1)).unwrap();
        let shape = TreeShapePrior::default();
        let w = MoveWeights::default();
        let (sigma, sigma_mu, m) = (0.2, 0.5, 1);
        let t0 = SoftTree::stump(0.0, 0.05);
        let t1 = t0.grow(0, SplitRule::new(0, 0.4)).unwrap();
        let ml = |t: &SoftTree| marginal_log_likelihood(&compute_suff_stats(&shard, &y, t).unwrap(), sigma, sigma_mu, m).unwrap();
        // Joint (tree, rule) densities; the cutpoint density is 1 on [0, 1] and
        // the single variable has probability 1.
        let p0 = (1.0 - shape.split_probability(0)).ln() + ml(&t0);
        let p1 = shape.split_probability(0).ln() + 2.0 * (1.0 - shape.split_probability(1)).ln() + ml(&t1);
        // Detailed balance: pi(t0) q(t0 -> t1) a(t0 -> t1) = pi(t1) q(t1 -> t0) a(t1 -> t0)
        let q01 = 1.0_f64.ln();
        let q10 = w.prune.ln();
        let want = (p1 + q10) - (p0 + q01);
        let got = acceptance_log_ratio(&t0, ml(&t0), &t1, ml(&t1), MoveKind::Grow, &shape, &w);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn apply_reports_leaf_positions() {
        let t = SoftTree::stump(0.0, 0.1)
            .grow(0, SplitRule::new(0, 0.5))
            .unwrap()
            .grow(2, SplitRule::new(0, 0.7))
            .unwrap();
        let (_, ch) = apply_proposal(&t, &MoveProposal { kind: MoveKind::Grow, target_node: 3, new_rule: Some(SplitRule::new(0, 0.8)) }).unwrap();
        assert_eq!(ch, StructureChange::Grow { leaf: 1 });
        let (c, ch) = apply_proposal(&t, &MoveProposal { kind: MoveKind::Prune, target_node: 2, new_rule: None }).unwrap();
        assert_eq!(ch, StructureChange::Prune { left_leaf: 1 });
        assert_eq!(c.leaf_count(), 2);
        assert!(apply_proposal(&t, &MoveProposal { kind: MoveKind::Prune, target_node: 0, new_rule: None }).is_err());
    }
}

//! Random fixtures shared by unit tests, integration tests and benches.

use rand::Rng;

use crate::data::{ColumnMeta, DataShard};
use crate::tree::{SoftTree, SplitRule};

/// Grows a random tree with between 1 and `max_leaves` leaves on `p`
/// covariates in the unit cube, with leaf values in [-1, 1].
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, p: usize, max_leaves: usize, bandwidth: f64) -> SoftTree {
    let target = rng.random_range(1..=max_leaves.max(1));
    let mut tree = SoftTree::stump(0.0, bandwidth);
    while tree.leaf_count() < target {
        let leaves = tree.leaf_nodes();
        let node = leaves[rng.random_range(0..leaves.len())];
        let rule = SplitRule::new(rng.random_range(0..p), rng.random_range(0.05..0.95));
        tree = tree.grow(node, rule).expect("growing a leaf");
    }
    let params: Vec<f64> = (0..tree.leaf_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    tree.set_leaf_params(&params).expect("matching length");
    tree
}

/// A shard of `n` uniform rows on `p` covariates with uniform responses.
pub fn random_shard<R: Rng + ?Sized>(rng: &mut R, n: usize, p: usize) -> DataShard {
    let x: Vec<f64> = (0..n * p).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    DataShard::new(x, y, p, 0, ColumnMeta::unit(p)).expect("consistent shard")
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbart::data::{ColumnMeta, DataShard};
use sbart::stats::{compute_suff_stats, grow_suff_stats, merge_suff_stats, prune_suff_stats};
use sbart::testing::{random_shard, random_tree};
use sbart::tree::{Forest, SoftTree, SplitRule};

fn split_shard(shard: &DataShard, cuts: &[usize]) -> Vec<DataShard> {
    let p = shard.p();
    let mut bounds = vec![0];
    bounds.extend(cuts.iter().copied());
    bounds.push(shard.n());
    bounds
        .windows(2)
        .map(|w| {
            DataShard::new(
                shard.x()[w[0] * p..w[1] * p].to_vec(),
                shard.y()[w[0]..w[1]].to_vec(),
                p,
                w[0],
                ColumnMeta::unit(p),
            )
            .unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn leaf_probabilities_form_a_distribution(seed in any::<u64>(), bw in 1e-6f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng, 4, 10, bw);
        let x: Vec<f64> = (0..4).map(|_| rng.random()).collect();
        let phi = tree.leaf_probabilities(&x);
        prop_assert_eq!(phi.probs.len(), tree.leaf_count());
        prop_assert!(phi.probs.iter().all(|&q| (0.0..=1.0).contains(&q)));
        prop_assert!((phi.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let direct: f64 = phi.probs.iter().zip(tree.leaf_params()).map(|(q, mu)| q * mu).sum();
        prop_assert!((tree.predict(&x) - direct).abs() < 1e-12);
    }

    #[test]
    fn sharded_statistics_merge_bitwise(seed in any::<u64>(), n in 2usize..120, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shard = random_shard(&mut rng, n, 3);
        let resid: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let bw = rng.random_range(0.01..0.3);
        let tree = random_tree(&mut rng, 3, 6, bw);
        let mut cuts: Vec<usize> = (0..k.min(n - 1)).map(|_| rng.random_range(1..n)).collect();
        cuts.sort_unstable();
        cuts.dedup();
        let parts: Vec<_> = split_shard(&shard, &cuts)
            .iter()
            .map(|s| compute_suff_stats(s, &resid[s.global_offset..s.global_offset + s.n()], &tree).unwrap())
            .collect();
        let merged = merge_suff_stats(&parts).unwrap();
        let full = compute_suff_stats(&shard, &resid, &tree).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        merged.encode(&mut a);
        full.encode(&mut b);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn grow_then_prune_restores_statistics(seed in any::<u64>(), var in 0usize..3, cut in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shard = random_shard(&mut rng, 80, 3);
        let resid: Vec<f64> = (0..80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tree = random_tree(&mut rng, 3, 6, 0.1);
        let before = compute_suff_stats(&shard, &resid, &tree).unwrap();
        let leaves = tree.leaf_nodes();
        let leaf = rng.random_range(0..leaves.len());
        let grown = tree.grow(leaves[leaf], SplitRule::new(var, cut)).unwrap();
        let grown_stats = grow_suff_stats(&before, &shard, &resid, &grown, leaf).unwrap();
        let back = prune_suff_stats(&grown_stats, &grown, leaf, leaf + 1).unwrap();
        prop_assert_eq!(grown.prune(leaves[leaf]).unwrap(), tree);
        prop_assert!(back.relative_difference(&before) < 1e-12);
        prop_assert_eq!(back.n(), before.n());
    }

    #[test]
    fn tree_and_forest_round_trip(seed in any::<u64>(), m in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees: Vec<SoftTree> = (0..m)
            .map(|_| {
                let bw = rng.random_range(1e-4..1.0);
                random_tree(&mut rng, 5, 9, bw)
            })
            .collect();
        let forest = Forest::new(trees.clone()).unwrap();
        let mut buf = Vec::new();
        forest.encode(&mut buf);
        let (back, used) = Forest::decode(&buf).unwrap();
        prop_assert_eq!(used, buf.len());
        prop_assert_eq!(&back, &forest);
        let x: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let sum: f64 = trees.iter().map(|t| t.predict(&x)).sum();
        prop_assert!((forest.predict(&x) - sum).abs() < 1e-12);
    }

    #[test]
    fn tree_edits_keep_a_valid_preorder(seed in any::<u64>(), steps in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = SoftTree::stump(0.0, 0.1);
        for _ in 0..steps {
            let rule = SplitRule::new(rng.random_range(0..3), rng.random());
            let prunable = tree.prunable_nodes();
            tree = if prunable.is_empty() || rng.random_bool(0.5) {
                let leaves = tree.leaf_nodes();
                tree.grow(leaves[rng.random_range(0..leaves.len())], rule).unwrap()
            } else if rng.random_bool(0.5) {
                tree.prune(prunable[rng.random_range(0..prunable.len())]).unwrap()
            } else {
                let internal = tree.internal_nodes();
                tree.change(internal[rng.random_range(0..internal.len())], rule).unwrap()
            };
            tree.validate(3).unwrap();
            prop_assert_eq!(tree.leaf_count(), tree.internal_count() + 1);
            prop_assert_eq!(tree.subtree_end(0), tree.nodes().len());
        }
    }
}

#[test]
fn decoding_rejects_truncated_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tree = random_tree(&mut rng, 2, 5, 0.2);
    let mut buf = Vec::new();
    tree.encode(&mut buf);
    for len in 0..buf.len() {
        assert!(SoftTree::decode(&buf[..len]).is_err(), "prefix of {len} bytes decoded");
    }
}

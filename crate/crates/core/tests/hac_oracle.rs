mod common;

use maskprop::hac::{hac_complete_linkage, nn_chain_complete};
use maskprop::MaskRecord;
use proptest::prelude::*;
use rand::SeedableRng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nn_chain_matches_naive_linkage(n in 2usize..48, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let points = common::random_points(&mut rng, n, d);
        prop_assume!(common::distinct_distances(&points));
        prop_assert_eq!(nn_chain_complete(&points), common::naive_complete_linkage(&points));
    }

    #[test]
    fn every_node_is_a_contiguous_block_of_its_leaves(n in 1usize..40, seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<MaskRecord> = common::random_points(&mut rng, n, 3)
            .into_iter()
            .enumerate()
            .map(|(i, f)| MaskRecord::new(format!("m{i}"), "c", f[0], f))
            .collect();
        let tree = hac_complete_linkage(&masks, 1.0).unwrap();
        prop_assert_eq!(tree.nodes().len(), 2 * n - 1);
        for node in tree.nodes() {
            let members = tree.members(node.id);
            prop_assert_eq!(members.len(), node.size);
            let mean = members.iter().map(|&l| tree.leaf_score(l)).sum::<f64>() / node.size as f64;
            prop_assert!((mean - node.score).abs() < 1e-12);
            if let Some((l, r)) = node.children {
                let mut joined = tree.members(l).to_vec();
                joined.extend_from_slice(tree.members(r));
                joined.sort_unstable();
                let mut own = members.to_vec();
                own.sort_unstable();
                prop_assert_eq!(joined, own);
                prop_assert!(node.linkage_height >= tree.node(l).linkage_height);
            }
        }
    }
}

#[test]
fn tied_points_still_give_a_valid_tree() {
    let masks: Vec<MaskRecord> = (0..6).map(|i| MaskRecord::new(format!("m{i}"), "c", 0.5, vec![1.0, 0.0])).collect();
    let tree = hac_complete_linkage(&masks, 1.0).unwrap();
    assert_eq!(tree.node(tree.root()).size, 6);
    assert!(tree.nodes().iter().all(|n| n.linkage_height == 0.0));
}

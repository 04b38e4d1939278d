//! Credit assignment against a brute-force evaluator, plus the structural
//! identities on random and searched forests.

mod common;

use proptest::prelude::*;
use treerl::credit::RewardScheme;
use treerl::policy::{ChainSum, SynthInit, SynthPolicy};
use treerl::search::{eptree_search, SearchConfig};

#[test]
fn thousand_random_forests_match_brute_force() {
    for seed in 0..1000 {
        let f = common::random_forest(seed, 60);
        assert!(f.nodes().len() <= 60);
        f.validate().unwrap();
        let err = common::max_credit_error(&f, seed);
        assert!(err <= 1e-12, "forest {seed}: error {err}");
    }
}

#[test]
fn random_forests_cover_varied_shapes() {
    let sizes: Vec<usize> = (0..200).map(|s| common::random_forest(s, 60).nodes().len()).collect();
    assert!(sizes.iter().any(|&n| n <= 5));
    assert!(sizes.iter().any(|&n| n >= 40));
    let multi_root = (0..200).filter(|&s| common::random_forest(s, 60).num_trees() > 1).count();
    assert!(multi_root > 50);
}

#[test]
fn searched_forests_satisfy_identities() {
    let task = ChainSum::new(10, 8).unwrap();
    let policy = SynthPolicy::new(task, 1, SynthInit::default());
    for (i, (m, n, l, t)) in [(6, 2, 1, 2), (4, 1, 2, 2), (5, 3, 1, 1)].into_iter().enumerate() {
        for j in 0..5u64 {
            let mut cfg = SearchConfig::mnlt(m, n, l, t);
            cfg.gen.seed = j;
            let out = eptree_search(&policy, &task, &task.prompt(i as u64, j), &cfg).unwrap();
            assert!(common::identities_exact(&out.forest));
            let (z, w, tel) = common::identity_errors(&out.forest);
            assert!(z <= 1e-12 && w <= 1e-12 && tel <= 1e-12, "{z} {w} {tel}");
            assert!(common::max_credit_error(&out.forest, j) <= 1e-12);
        }
    }
}

#[test]
fn gae_special_cases_match_closed_forms() {
    use treerl::credit::{CreditTable, GaeWeights};
    for seed in 0..100 {
        let f = common::random_forest(seed, 40);
        let t = CreditTable::new(&f).unwrap();
        // root weight 1 and parent weight 1 reproduce G_A + L_A
        let gae = RewardScheme::Gae(GaeWeights { by_depth: vec![1.0], parent: 1.0 });
        for n in f.nodes() {
            let a = t.step_reward(n.id, &gae).unwrap().reward;
            let b = t.step_reward(n.id, &RewardScheme::PlainSum).unwrap().reward;
            assert_eq!(a, b, "forest {seed} node {}", n.id);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn identities_hold_on_random_forests(seed in any::<u64>(), max_nodes in 1usize..=60) {
        let f = common::random_forest(seed, max_nodes);
        prop_assert!(common::identities_exact(&f));
        let (z, w, tel) = common::identity_errors(&f);
        prop_assert!(z <= 1e-12, "zero-sum {}", z);
        prop_assert!(w <= 1e-12, "weighted {}", w);
        prop_assert!(tel <= 1e-12, "telescope {}", tel);
    }

    #[test]
    fn batch_covers_every_leaf_once(seed in any::<u64>()) {
        let f = common::random_forest(seed, 60);
        let batch = treerl::credit::training_batch(&f, &RewardScheme::ReweightedSum).unwrap();
        prop_assert_eq!(batch.len(), f.leaf_count());
        for ex in &batch {
            prop_assert_eq!(ex.tokens.len(), ex.per_token_advantage.len());
            prop_assert_eq!(&ex.tokens, &f.root_to_leaf_sequence(ex.leaf_id).unwrap());
        }
    }

    #[test]
    fn uniform_labels_give_zero_rewards(seed in any::<u64>(), label in any::<bool>()) {
        let mut f = common::random_forest(seed, 60);
        for l in f.leaves() {
            f.set_correct(l, label).unwrap();
        }
        for scheme in common::all_schemes(seed) {
            for n in f.nodes() {
                prop_assert_eq!(treerl::credit::step_reward(&f, n.id, &scheme).unwrap().reward, 0.0);
            }
        }
    }
}

//! Learning-rate selection behind the pinned TreeRL and ChainRL multipliers.
//! Slow; run with `cargo test -p treerl --test rl_tuning -- --ignored --nocapture`.

mod common;

use common::rl::{run, Method, CHAINRL_LR_MULTIPLIER, LR_GRID, TREERL_LR_MULTIPLIER, TUNING_SEEDS};
use rayon::prelude::*;

fn final_sampled(method: Method, seed: u64, lr: f64) -> f64 {
    let h = run(method, seed, lr);
    h.records.iter().rev().find_map(|r| r.eval.as_ref().and_then(|e| e.sampled_accuracy)).unwrap()
}

/// Grid value with the best mean final sampled accuracy over the tuning seeds.
fn best(method: Method) -> f64 {
    let scores: Vec<(f64, f64)> = LR_GRID
        .par_iter()
        .map(|&lr| {
            let mean = TUNING_SEEDS.iter().map(|&s| final_sampled(method, s, lr)).sum::<f64>() / TUNING_SEEDS.len() as f64;
            println!("{method:?} lr_multiplier {lr:e}: mean final sampled accuracy {mean:.4}");
            (lr, mean)
        })
        .collect();
    scores.iter().fold(scores[0], |a, &b| if b.1 > a.1 { b } else { a }).0
}

#[test]
#[ignore]
fn pinned_multipliers_are_the_grid_optima() {
    assert_eq!(best(Method::TreeRl), TREERL_LR_MULTIPLIER);
    assert_eq!(best(Method::ChainRl), CHAINRL_LR_MULTIPLIER);
}

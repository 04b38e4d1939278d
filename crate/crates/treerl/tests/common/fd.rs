//! Finite-difference oracle for the surrogate gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use treerl::policy::{surrogate_gradient, GradEvent};

pub const H: f64 = 1e-5;

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Independent evaluation of the weighted surrogate.
pub fn objective(rows: &BTreeMap<usize, Vec<f64>>, refs: &BTreeMap<usize, Vec<f64>>, events: &[GradEvent<usize>], beta: f64, scale: f64) -> f64 {
    let mut total = 0.0;
    for e in events {
        let lp = log_softmax(&rows[&e.key]);
        let lq = log_softmax(&refs[&e.key]);
        let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        total += e.weight * (e.advantage * lp[e.token] - beta * kl);
    }
    total * scale
}

/// Relative error `‖g − g_fd‖ / ‖g_fd‖` over every parameter.
pub fn fd_relative_error(
    rows: &BTreeMap<usize, Vec<f64>>,
    refs: &BTreeMap<usize, Vec<f64>>,
    events: &[GradEvent<usize>],
    beta: f64,
    scale: f64,
) -> f64 {
    let analytic = surrogate_gradient(events, |k: &usize| rows[k].clone(), |k: &usize| refs[k].clone(), beta, scale);
    let (mut num, mut den) = (0.0, 0.0);
    for (&key, row) in rows {
        for i in 0..row.len() {
            let mut plus = rows.clone();
            plus.get_mut(&key).unwrap()[i] += H;
            let mut minus = rows.clone();
            minus.get_mut(&key).unwrap()[i] -= H;
            let fd = (objective(&plus, refs, events, beta, scale) - objective(&minus, refs, events, beta, scale)) / (2.0 * H);
            let g = analytic.get(&key).map_or(0.0, |g| g[i]);
            num += (g - fd).powi(2);
            den += fd.powi(2);
        }
    }
    (num / den).sqrt()
}

pub fn random_case(seed: u64, weighted: bool) -> (BTreeMap<usize, Vec<f64>>, BTreeMap<usize, Vec<f64>>, Vec<GradEvent<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = rng.gen_range(1..=4);
    let row = |rng: &mut ChaCha8Rng| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
    let rows: BTreeMap<usize, Vec<f64>> = (0..keys).map(|k| (k, row(&mut rng))).collect();
    let refs: BTreeMap<usize, Vec<f64>> = (0..keys).map(|k| (k, row(&mut rng))).collect();
    let events = (0..rng.gen_range(1..=12))
        .map(|_| GradEvent {
            key: rng.gen_range(0..keys),
            token: rng.gen_range(0..3),
            advantage: rng.gen_range(-1.5..1.5),
            weight: if weighted { rng.gen_range(0.05..1.0) } else { 1.0 },
        })
        .collect();
    (rows, refs, events)
}


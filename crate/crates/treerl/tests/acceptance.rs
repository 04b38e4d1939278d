//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness and exits nonzero if any criterion fails.

mod common;

use std::time::{Duration, Instant};
use treerl::credit::RewardScheme;
use treerl::evalx::{ablation_fork_strategy, mean_se, sign_test, sweep, sweep_table, CsvTable};
use treerl::gentree::{expected_leaf_count, write_forest};
use treerl::policy::{ChainSum, SynthInit, SynthPolicy};
use treerl::search::{eptree_search, SearchConfig};
use treerl::theory::{self, BridgeConfig, GLOBAL_LOWER, GLOBAL_UPPER, PHI_ONE};
use treerl::trainer::{chain_advantages, train, AdvantageVariant, Sampler, TrainConfig};

/// Maximum absolute error of credit values against the brute-force oracle.
const CREDIT_TOL: f64 = 1e-12;
/// Float tolerance of the structural identities (also checked exactly).
const IDENTITY_TOL: f64 = 1e-12;
/// Standard errors allowed between the estimate of φ(1,1) and ln 2 − 1/4.
const PHI_SIGMAS: f64 = 3.0;
const PHI_SAMPLES: usize = 1_000_000;
/// Relative error bound of the analytic gradient.
const FD_TOL: f64 = 1e-6;
const ALPHA: f64 = 0.05;
const GROUP_TOL: f64 = 1e-12;

/// The #Leaf column of the appendix table, including its multi-chain rows.
const LEAF_TABLE: [((usize, usize, usize, usize), usize); 20] = [
    ((16, 0, 0, 0), 16),
    ((8, 3, 1, 1), 32),
    ((7, 2, 1, 2), 35),
    ((6, 2, 2, 1), 30),
    ((6, 2, 1, 2), 30),
    ((5, 3, 1, 2), 35),
    ((5, 2, 1, 3), 35),
    ((5, 3, 2, 1), 35),
    ((5, 1, 2, 3), 35),
    ((64, 0, 0, 0), 64),
    ((16, 2, 2, 2), 144),
    ((16, 4, 1, 2), 144),
    ((16, 2, 1, 4), 144),
    ((9, 5, 1, 3), 144),
    ((9, 3, 1, 5), 144),
    ((8, 8, 1, 2), 136),
    ((8, 4, 1, 4), 136),
    ((8, 8, 2, 1), 136),
    ((8, 4, 2, 2), 136),
    ((8, 2, 2, 4), 136),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn synth_task() -> (ChainSum, SynthPolicy) {
    let task = ChainSum::new(20, 16).unwrap();
    (task, SynthPolicy::new(task, 1, SynthInit { correct_bias: 6.0, ..SynthInit::default() }))
}

fn leaf_counts() -> Outcome {
    let (task, policy) = synth_task();
    let mut bad = Vec::new();
    for (i, &((m, n, l, t), want)) in LEAF_TABLE.iter().enumerate() {
        let formula = expected_leaf_count(m, n, l, t).unwrap();
        let mut cfg = SearchConfig::mnlt(m, n, l, t);
        // no response can reach this length
        cfg.gen.max_new_tokens = 100_000;
        cfg.gen.seed = i as u64;
        let out = eptree_search(&policy, &task, &task.prompt(1, i as u64), &cfg).unwrap();
        if formula != want || out.report.leaves != want || out.report.shortfall != 0 {
            bad.push(format!("({m},{n},{l},{t}): table {want}, formula {formula}, search {}", out.report.leaves));
        }
    }
    let mut detail = format!("{} of {} table rows exact, formula and search", LEAF_TABLE.len() - bad.len(), LEAF_TABLE.len());
    if !bad.is_empty() {
        detail = format!("{detail}; {}", bad.join("; "));
    }
    outcome(bad.is_empty(), detail)
}

fn credit_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..1000 {
        let f = common::random_forest(seed, 60);
        worst = worst.max(common::max_credit_error(&f, seed));
    }
    outcome(worst <= CREDIT_TOL, format!("1000 forests, 4 schemes, max |err| {worst:.2e} (tol {CREDIT_TOL:e})"))
}

fn structural_identities() -> Outcome {
    let mut forests: Vec<_> = (0..1000).map(|s| common::random_forest(s + 10_000, 60)).collect();
    let (task, policy) = synth_task();
    for (i, &((m, n, l, t), _)) in LEAF_TABLE.iter().enumerate() {
        let mut cfg = SearchConfig::mnlt(m, n, l, t);
        cfg.gen.seed = 7 + i as u64;
        forests.push(eptree_search(&policy, &task, &task.prompt(2, i as u64), &cfg).unwrap().forest);
    }
    let mut exact = true;
    let mut worst: f64 = 0.0;
    for f in &forests {
        exact &= common::identities_exact(f);
        let (z, w, t) = common::identity_errors(f);
        worst = worst.max(z).max(w).max(t);
    }
    outcome(
        exact && worst <= IDENTITY_TOL,
        format!("{} forests, integer identities {}, max float deviation {worst:.2e}", forests.len(), if exact { "exact" } else { "violated" }),
    )
}

fn theorem() -> Outcome {
    let grid: Vec<(usize, usize)> = [1, 2, 4, 8, 16].iter().flat_map(|&n| (1..=4).map(move |t| (n, t))).collect();
    let r = theory::theorem_report(&grid, PHI_SAMPLES, 20_240_601, None).unwrap();
    let v = &r.verdicts;
    let phi = r.case_l2.iter().find(|c| c.n == 1 && c.t == 1).unwrap().phi;
    let z = (phi.estimate - PHI_ONE).abs() / phi.std_error;
    let pass = v.all() && z <= PHI_SIGMAS && v.phi_one_matches == Some(true);
    outcome(
        pass,
        format!(
            "l1 range {} monotone {}; phi(1,1) {:.5} ({z:.2} SE from {PHI_ONE:.5}); phi non-increasing {}; l2 cell bounds {} global {}",
            v.l1_range, v.l1_monotone, phi.estimate, v.phi_monotone_in_n, v.l2_within_cell_bounds, v.l2_within_global_bounds
        ),
    )
}

fn bridge() -> Outcome {
    let cfg = BridgeConfig::default();
    let cells = theory::empirical_bridge(&cfg, 1, 100_000).unwrap();
    let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| (a.min(c.ratio), b.max(c.ratio)));
    let seeds = cells.iter().map(|c| c.seed).collect::<std::collections::BTreeSet<_>>().len();
    let pass = seeds == 20 && lo >= GLOBAL_LOWER && hi < GLOBAL_UPPER;
    outcome(pass, format!("{} cells over {seeds} seeds, L <= 2, ratio range [{lo:.4}, {hi:.4}] in [4/3, 12/5)", cells.len()))
}

fn gradient() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..200 {
        for (beta, weighted) in [(0.0, false), (0.1, false), (1.0, false), (0.3, true)] {
            let (rows, refs, events) = common::fd::random_case(seed, weighted);
            worst = worst.max(common::fd::fd_relative_error(&rows, &refs, &events, beta, 0.25));
        }
    }
    outcome(worst < FD_TOL, format!("3-token vocabulary, 800 cases, max relative error {worst:.2e} (tol {FD_TOL:e})"))
}

fn rl_direction() -> Outcome {
    let seeds: Vec<u64> = (0..20).collect();
    let rows = common::rl::compare(&seeds);
    let init: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let tree: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let chain: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let (mi, mt, mc) = (mean_se(&init).0, mean_se(&tree).0, mean_se(&chain).0);
    let st = sign_test(&tree, &chain);
    let pass = st.significant(ALPHA) && mt > mi && mc > mi;
    outcome(
        pass,
        format!(
            "ChainSum V{} K{}, {} steps, 20 seeds; sampled accuracy at matched tokens: untrained {mi:.4}, TreeRL {mt:.4}, ChainRL {mc:.4}; sign test {}/{}/{} p={:.2e}",
            common::rl::MODULUS,
            common::rl::OPERANDS,
            common::rl::STEPS,
            st.wins,
            st.losses,
            st.ties,
            st.p_value
        ),
    )
}

fn ablation() -> Outcome {
    let (task, policy) = synth_task();
    let prompts: Vec<_> = (0..100).map(|i| task.prompt(99, i)).collect();
    let mut cfg = SearchConfig::mnlt(4, 1, 1, 1);
    cfg.mask_tail_fraction = 0.2;
    let (mut e, mut r) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let (a, b) = ablation_fork_strategy(&policy, &task, &prompts, &cfg, seed).unwrap();
        e.push(a.passrate);
        r.push(b.passrate);
    }
    let st = sign_test(&e, &r);
    let (me, mr) = (mean_se(&e).0, mean_se(&r).0);
    outcome(
        me >= mr && st.significant(ALPHA),
        format!("(4,1,1,1), 100 prompts, 20 seeds: PassRate entropy {me:.4} random {mr:.4}; sign test {}/{}/{} p={:.2e}", st.wins, st.losses, st.ties, st.p_value),
    )
}

fn csv_body(t: &CsvTable) -> Vec<u8> {
    let mut out = Vec::new();
    t.write(&mut out).unwrap();
    out
}

fn determinism() -> Outcome {
    let (task, policy) = synth_task();
    let prompts: Vec<_> = (0..20).map(|i| task.prompt(99, i)).collect();
    let configs: Vec<SearchConfig> = LEAF_TABLE[..9].iter().map(|&((m, n, l, t), _)| SearchConfig::mnlt(m, n, l, t)).collect();
    let sweep_csv = || csv_body(&sweep_table(&sweep(&policy, &task, &prompts, &configs, 5).unwrap(), "h"));
    let sweep_same = sweep_csv() == sweep_csv();

    let forest = || {
        let mut cfg = SearchConfig::mnlt(6, 2, 2, 2);
        cfg.gen.seed = 3;
        let mut out = Vec::new();
        write_forest(&eptree_search(&policy, &task, &prompts[0], &cfg).unwrap().forest, &serde_json::json!({}), &mut out).unwrap();
        out
    };
    let forest_same = forest() == forest();

    let mut search = SearchConfig::mnlt(6, 2, 1, 2);
    search.mask_tail_fraction = 0.05;
    let mut tc = TrainConfig::new(Sampler::TreeRl { search, scheme: RewardScheme::ReweightedSum });
    tc.steps = 15;
    tc.eval_every = 5;
    tc.eval_prompts = 50;
    tc.eval_passrate_samples = 4;
    tc.lr_multiplier = 1e8;
    let history = || {
        let mut p = policy.clone();
        train(&mut p, &tc).unwrap()
    };
    let train_same = history() == history();
    outcome(
        sweep_same && forest_same && train_same,
        format!("sweep CSV identical {sweep_same}; forest bytes identical {forest_same}; TrainHistory identical {train_same}"),
    )
}

fn group_identities() -> Outcome {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let k = rng.gen_range(2..=32);
        let rewards: Vec<f64> = (0..k).map(|_| rng.gen_range(0..2) as f64).collect();
        let g = chain_advantages(&rewards, AdvantageVariant::Grpo).unwrap();
        let mean = g.iter().sum::<f64>() / k as f64;
        worst = worst.max(mean.abs());
        if rewards.iter().any(|&r| r != rewards[0]) {
            let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k as f64;
            worst = worst.max((var - 1.0).abs());
        }
        let r = chain_advantages(&rewards, AdvantageVariant::Rloo).unwrap();
        worst = worst.max(r.iter().sum::<f64>().abs());
    }
    let example = chain_advantages(&[1.0, 0.0, 0.0, 1.0], AdvantageVariant::Grpo).unwrap() == vec![1.0, -1.0, -1.0, 1.0];
    outcome(
        worst <= GROUP_TOL && example,
        format!("2000 groups, max deviation {worst:.2e}; [1,0,0,1] -> [1,-1,-1,1] exact {example}"),
    )
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("leaf-count combinatorics", Duration::from_secs(60), leaf_counts),
        ("credit oracle equivalence", Duration::from_secs(60), credit_oracle),
        ("structural identities", Duration::MAX, structural_identities),
        ("leaf-per-token bounds", Duration::from_secs(120), theorem),
        ("empirical efficiency bridge", Duration::from_secs(300), bridge),
        ("gradient correctness", Duration::MAX, gradient),
        ("TreeRL vs ChainRL direction", Duration::from_secs(1200), rl_direction),
        ("entropy vs random forking", Duration::MAX, ablation),
        ("determinism", Duration::MAX, determinism),
        ("GRPO/RLOO identities", Duration::MAX, group_identities),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let in_time = took <= *limit;
        let pass = o.pass && in_time;
        failed += !pass as usize;
        let limit_note = if *limit == Duration::MAX { String::new() } else { format!(", limit {}s", limit.as_secs()) };
        println!(
            "{} {:>2} {name}: {} [{:.1}s{limit_note}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

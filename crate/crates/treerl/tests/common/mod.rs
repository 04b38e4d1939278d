//! Helpers shared by the integration tests: random forests and a brute-force
//! credit evaluator that reads only parent pointers and leaf labels.

#![allow(dead_code)]

pub mod fd;
pub mod rl;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use treerl::credit::{GaeWeights, RewardScheme};
use treerl::gentree::{ForkPoint, GenForest, NodeId, Prompt, TokenRecord};

pub fn prompt(id: &str) -> Prompt {
    Prompt { id: id.into(), tokens: vec![1, 2, 3], text: String::new() }
}

fn tokens(rng: &mut ChaCha8Rng, len: usize) -> Vec<TokenRecord> {
    (0..len).map(|_| TokenRecord::new(rng.gen_range(0..50), rng.gen_range(0.0..5.0))).collect()
}

/// A graded forest with random topology and at most `max_nodes` nodes.
pub fn random_forest(seed: u64, max_nodes: usize) -> GenForest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = GenForest::new(prompt(&format!("p{seed}")));
    let roots = rng.gen_range(1..=4usize).min(max_nodes);
    for _ in 0..roots {
        let len = rng.gen_range(1..=8);
        let correct = rng.gen_bool(0.5);
        f.add_root_chain(tokens(&mut rng, len), true, Some(correct)).unwrap();
    }
    let target = rng.gen_range(roots..=max_nodes);
    let mut attempts = 0;
    while f.nodes().len() + 2 <= target && attempts < 10 * max_nodes {
        attempts += 1;
        let id = NodeId(rng.gen_range(0..f.nodes().len()) as u32);
        let node = f.node(id).unwrap();
        let offset = rng.gen_range(0..node.tokens.len());
        let point = ForkPoint {
            tree_index: f.tree_index_of(id).unwrap(),
            node_id: id,
            token_offset: offset,
            surprisal: 0.0,
        };
        let len = rng.gen_range(1..=6);
        let correct = rng.gen_bool(0.5);
        let _ = f.fork(&point, tokens(&mut rng, len), true, Some(correct));
    }
    f
}

/// Brute-force node statistics.
pub struct Oracle {
    /// (correct, total) descendant leaves, keyed by node.
    pub counts: HashMap<NodeId, (u64, u64)>,
    pub root: (u64, u64),
    pub parent: HashMap<NodeId, NodeId>,
}

impl Oracle {
    pub fn new(f: &GenForest) -> Self {
        let parent: HashMap<NodeId, NodeId> = f.nodes().iter().map(|n| (n.id, n.parent)).collect();
        let mut counts: HashMap<NodeId, (u64, u64)> = f.nodes().iter().map(|n| (n.id, (0, 0))).collect();
        let mut root = (0, 0);
        for n in f.nodes().iter().filter(|n| n.children.is_empty()) {
            let c = (n.correct == Some(true)) as u64;
            root.0 += c;
            root.1 += 1;
            // every ancestor, the leaf included, sees this leaf
            let mut cur = n.id;
            loop {
                let e = counts.get_mut(&cur).unwrap();
                e.0 += c;
                e.1 += 1;
                let p = parent[&cur];
                if p.is_virtual() {
                    break;
                }
                cur = p;
            }
        }
        Self { counts, root, parent }
    }

    pub fn value(&self, id: NodeId) -> f64 {
        let (c, n) = if id.is_virtual() { self.root } else { self.counts[&id] };
        c as f64 / n as f64
    }

    pub fn global(&self, id: NodeId) -> f64 {
        if id.is_virtual() {
            return 0.0;
        }
        self.value(id) - self.value(NodeId::VIRTUAL_ROOT)
    }

    pub fn local(&self, id: NodeId) -> f64 {
        if id.is_virtual() {
            return 0.0;
        }
        self.value(id) - self.value(self.parent[&id])
    }

    /// Ancestors from the virtual root (depth 0) down to the parent.
    pub fn ancestors(&self, id: NodeId) -> Vec<NodeId> {
        let mut up = Vec::new();
        let mut cur = self.parent[&id];
        while !cur.is_virtual() {
            up.push(cur);
            cur = self.parent[&cur];
        }
        up.push(NodeId::VIRTUAL_ROOT);
        up.reverse();
        up
    }

    pub fn reward(&self, id: NodeId, scheme: &RewardScheme) -> f64 {
        if id.is_virtual() {
            return 0.0;
        }
        let n = self.counts[&id].1 as f64;
        let (g, l) = (self.global(id), self.local(id));
        match scheme {
            RewardScheme::ReweightedSum => (g + l) / n.sqrt(),
            RewardScheme::PlainSum => g + l,
            RewardScheme::GlobalOnlyReweighted => g / n.sqrt(),
            RewardScheme::Gae(w) => {
                let anc = self.ancestors(id);
                let parent = self.parent[&id];
                anc.iter()
                    .enumerate()
                    .map(|(depth, &a)| {
                        let mut lambda = w.by_depth.get(depth).copied().unwrap_or(0.0);
                        if a == parent {
                            lambda += w.parent;
                        }
                        lambda * (self.value(id) - self.value(a))
                    })
                    .sum()
            }
        }
    }
}

pub fn random_gae(seed: u64) -> GaeWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9ae);
    let depth = rng.gen_range(0..5);
    GaeWeights { by_depth: (0..depth).map(|_| rng.gen_range(-1.0..1.0)).collect(), parent: rng.gen_range(-1.0..1.0) }
}

pub fn all_schemes(seed: u64) -> Vec<RewardScheme> {
    vec![
        RewardScheme::ReweightedSum,
        RewardScheme::PlainSum,
        RewardScheme::GlobalOnlyReweighted,
        RewardScheme::Gae(random_gae(seed)),
    ]
}

/// Largest absolute deviation between the library and the oracle over every
/// node and the virtual root.
pub fn max_credit_error(f: &GenForest, seed: u64) -> f64 {
    let oracle = Oracle::new(f);
    let table = treerl::credit::CreditTable::new(f).unwrap();
    let mut worst: f64 = 0.0;
    let ids = f.nodes().iter().map(|n| n.id).chain(std::iter::once(NodeId::VIRTUAL_ROOT));
    for id in ids {
        worst = worst.max((table.value(id).unwrap() - oracle.value(id)).abs());
        let (g, l) = table.advantages(id).unwrap();
        worst = worst.max((g - oracle.global(id)).abs());
        worst = worst.max((l - oracle.local(id)).abs());
        for scheme in all_schemes(seed) {
            let r = table.step_reward(id, &scheme).unwrap().reward;
            worst = worst.max((r - oracle.reward(id, &scheme)).abs());
        }
    }
    worst
}

/// Deviations from the three structural identities, computed from the
/// library's values: leaf global advantages sum to zero, a node's value is
/// the leaf-weighted mean of its children, and local advantages telescope
/// along every root-to-leaf path to the leaf's global advantage.
pub fn identity_errors(f: &GenForest) -> (f64, f64, f64) {
    let t = treerl::credit::CreditTable::new(f).unwrap();
    let leaves = f.leaves();
    let zero_sum: f64 = leaves.iter().map(|&l| t.advantages(l).unwrap().0).sum::<f64>().abs();

    let mut weighted: f64 = 0.0;
    for n in f.nodes().iter().filter(|n| !n.children.is_empty()) {
        let total = t.leaf_count(n.id).unwrap() as f64;
        let mix: f64 = n
            .children
            .iter()
            .map(|&c| t.leaf_count(c).unwrap() as f64 * t.value(c).unwrap())
            .sum::<f64>()
            / total;
        weighted = weighted.max((t.value(n.id).unwrap() - mix).abs());
    }
    let roots_mix: f64 = f
        .roots()
        .iter()
        .map(|&r| t.leaf_count(r).unwrap() as f64 * t.value(r).unwrap())
        .sum::<f64>()
        / t.leaf_count(NodeId::VIRTUAL_ROOT).unwrap() as f64;
    weighted = weighted.max((t.value(NodeId::VIRTUAL_ROOT).unwrap() - roots_mix).abs());

    let mut telescope: f64 = 0.0;
    for &l in &leaves {
        let sum: f64 = f.path_from_root(l).unwrap().iter().map(|&id| t.advantages(id).unwrap().1).sum();
        telescope = telescope.max((sum - t.advantages(l).unwrap().0).abs());
    }
    (zero_sum, weighted, telescope)
}

/// The identities in exact integer arithmetic on leaf counts.
pub fn identities_exact(f: &GenForest) -> bool {
    let o = Oracle::new(f);
    let (rc, rn) = (o.root.0 as i128, o.root.1 as i128);
    // Σ_leaves (c_leaf/1 - rc/rn) = 0  <=>  Σ c_leaf * rn = leaves * rc
    let leaves = f.leaves();
    let sum_c: i128 = leaves.iter().map(|l| o.counts[l].0 as i128).sum();
    let zero_sum = sum_c * rn == leaves.len() as i128 * rc;
    let weighted = f.nodes().iter().filter(|n| !n.children.is_empty()).all(|n| {
        let (c, t) = n.children.iter().fold((0, 0), |a, ch| (a.0 + o.counts[ch].0, a.1 + o.counts[ch].1));
        (c, t) == o.counts[&n.id]
    });
    zero_sum && weighted
}

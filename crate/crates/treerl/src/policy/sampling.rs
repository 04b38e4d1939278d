//! Categorical sampling with temperature and nucleus truncation.

use rand::Rng;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Shannon entropy in nats.
pub fn entropy(logits: &[f64]) -> f64 {
    log_softmax(logits)
        .into_iter()
        .map(|lp| if lp == f64::NEG_INFINITY { 0.0 } else { -lp.exp() * lp })
        .sum()
}

/// Indices kept by nucleus truncation of `probs`: the smallest
/// highest-probability set whose mass reaches `top_p`. Ties keep the lower index.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    if top_p >= 1.0 {
        return order;
    }
    let mut mass = 0.0;
    let mut keep = 0;
    for &i in &order {
        mass += probs[i];
        keep += 1;
        if mass >= top_p {
            break;
        }
    }
    order.truncate(keep);
    order
}

/// Draw an index from `logits / temperature` restricted to its top-p nucleus.
pub fn sample_index<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    let probs = softmax(&scaled);
    let kept = nucleus(&probs, top_p);
    let total: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut u = rng.gen::<f64>() * total;
    for &i in &kept {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    *kept.last().expect("non-empty vocabulary")
}

pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

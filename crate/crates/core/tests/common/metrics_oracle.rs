use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sparamdx_core::defects::N_CLASSES;
use sparamdx_core::harness::Confusion;

/// Independent per-class counting straight from (truth, prediction) pairs.
pub fn brute_force(cm: &Confusion) -> (f64, f64, f64, f64) {
    let mut pairs = Vec::new();
    for t in 0..N_CLASSES {
        for p in 0..N_CLASSES {
            for _ in 0..cm[t][p] {
                pairs.push((t, p));
            }
        }
    }
    let mut classes = Vec::new();
    let (mut ps, mut rs, mut fs) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..N_CLASSES {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for &(t, p) in &pairs {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
        if tp + fp + fneg == 0 {
            continue;
        }
        classes.push(c);
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        ps.push(p);
        rs.push(r);
        fs.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let n = classes.len() as f64;
    let correct = pairs.iter().filter(|(t, p)| t == p).count() as f64;
    (ps.iter().sum::<f64>() / n, rs.iter().sum::<f64>() / n, fs.iter().sum::<f64>() / n, correct / pairs.len() as f64)
}

pub fn random_cm(rng: &mut ChaCha8Rng) -> Confusion {
    let mut cm = [[0u64; N_CLASSES]; N_CLASSES];
    let density = rng.random_range(0.1..1.0);
    for row in cm.iter_mut() {
        for v in row.iter_mut() {
            if rng.random_bool(density) {
                *v = rng.random_range(0..30);
            }
        }
    }
    if cm.iter().flatten().all(|&v| v == 0) {
        cm[0][0] = 1;
    }
    cm
}

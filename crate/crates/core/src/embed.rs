//! Exact t-SNE for latent vectors and the silhouette score used to
//! quantify how cleanly the classes separate.

use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::defects::DefectLabel;
use crate::rng::rng_from_seed;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("need more than {needed} points for perplexity {perplexity}, got {n}")]
    TooFewPoints { n: usize, needed: usize, perplexity: f64 },
    #[error("input points are all identical")]
    Degenerate,
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    /// KL(P || Q) after each iteration, always against the unexaggerated P.
    pub kl_history: Vec<f64>,
    /// Largest deviation of any point's conditional entropy from ln(perplexity).
    pub entropy_error: f64,
}

const ENTROPY_TOL: f64 = 1e-5;

/// Conditional distribution of row `i` at precision `beta`; returns the
/// entropy (nats).
fn conditional_row(d2: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    // shift by the nearest neighbour distance for numerical range
    let dmin = d2.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, (&d, o)) in d2.iter().zip(out.iter_mut()).enumerate() {
        *o = if j == i { 0.0 } else { (-(d - dmin) * beta).exp() };
        sum += *o;
    }
    let mut h = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        if j == i {
            continue;
        }
        *o /= sum;
        h += beta * (d2[j] - dmin) * *o;
    }
    h + sum.ln()
}

/// Per-point bandwidth search; returns the row-normalized conditional
/// probabilities and the largest entropy error.
fn calibrate(d2: &[f64], n: usize, perplexity: f64) -> (Vec<f64>, f64) {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut worst = 0.0f64;
    for i in 0..n {
        let row_d = &d2[i * n..(i + 1) * n];
        let row = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let scale = row_d.iter().copied().fold(0.0, f64::max);
        if scale > 0.0 {
            beta = 1.0 / scale;
        }
        let mut h = conditional_row(row_d, i, beta, row);
        for _ in 0..200 {
            if (h - target).abs() <= ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = conditional_row(row_d, i, beta, row);
        }
        worst = worst.max((h - target).abs());
    }
    (p, worst)
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }
    d2
}

/// Exact (O(N²) per iteration) t-SNE into two dimensions.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig, seed: u64) -> Result<Embedding, EmbedError> {
    let n = x.len();
    let needed = (3.0 * cfg.perplexity).floor() as usize;
    if n <= needed || n < 2 {
        return Err(EmbedError::TooFewPoints { n, needed, perplexity: cfg.perplexity });
    }
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|r| r.len() != dim) {
        return Err(EmbedError::Invalid("rows must share a positive dimension".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EmbedError::Invalid("non-finite input".into()));
    }
    let d2 = squared_distances(x);
    if d2.iter().all(|&d| d == 0.0) {
        return Err(EmbedError::Degenerate);
    }
    let (cond, entropy_error) = calibrate(&d2, n, cfg.perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }

    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, 1e-4).unwrap();
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut kl_history = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let (exag, momentum) = if it < cfg.exaggeration_iters {
            (cfg.exaggeration, cfg.initial_momentum)
        } else {
            (1.0, cfg.final_momentum)
        };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        let mut kl = 0.0;
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let pij = p[i * n + j];
                kl += pij * (pij / (q / z).max(1e-300)).ln();
                let m = (exag * pij - q / z) * q;
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                let grad = 4.0 * g[k];
                gains[i][k] = if (grad > 0.0) != (update[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8f64).max(0.01)
                };
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * grad;
            }
        }
        kl_history.push(kl);
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
        }
        let (mx, my) = y.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        for yi in &mut y {
            yi[0] -= mx / n as f64;
            yi[1] -= my / n as f64;
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EmbedError::Invalid("embedding diverged".into()));
    }
    Ok(Embedding { points: y, kl_history, entropy_error })
}

/// Mean silhouette coefficient with Euclidean distance.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64, EmbedError> {
    if points.len() != labels.len() {
        return Err(EmbedError::Invalid("one label per point required".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let present = sizes.iter().filter(|&&s| s > 0).count();
    if present < 2 {
        return Err(EmbedError::Invalid("silhouette needs at least two classes".into()));
    }
    if sizes.iter().any(|&s| s == 1) {
        return Err(EmbedError::Invalid("silhouette is undefined for a singleton class".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for (i, p) in points.iter().enumerate() {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (q, &l) in points.iter().zip(labels) {
            sums[l] += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        }
        let own = labels[i];
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / points.len() as f64)
}

pub fn embedding_csv(points: &[[f64; 2]], labels: &[usize]) -> String {
    let mut out = String::from("x,y,label\n");
    for (p, &l) in points.iter().zip(labels) {
        let name = DefectLabel::from_index(l).map_or_else(|| l.to_string(), |d| d.name().to_string());
        let _ = writeln!(out, "{},{},{}", p[0], p[1], name);
    }
    out
}

const PALETTE: [&str; 7] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"];

/// Minimal standalone SVG scatter plot with a class legend.
pub fn embedding_svg(points: &[[f64; 2]], labels: &[usize], title: &str) -> String {
    let (w, h, margin) = (520.0, 480.0, 30.0);
    let plot = h - 2.0 * margin;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let _ = writeln!(out, r#"<text x="{margin}" y="20" font-family="sans-serif" font-size="14">{title}</text>"#);
    for (p, &l) in points.iter().zip(labels) {
        let cx = margin + (p[0] - x0) / span * plot;
        let cy = h - margin - (p[1] - y0) / span * plot;
        let _ =
            writeln!(out, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="2" fill="{}" fill-opacity="0.7"/>"#, PALETTE[l % 7]);
    }
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for (row, &l) in seen.iter().enumerate() {
        let y = margin + 16.0 * row as f64;
        let name = DefectLabel::from_index(l).map_or_else(|| l.to_string(), |d| d.name().to_string());
        let _ = writeln!(out, r#"<circle cx="{}" cy="{y}" r="4" fill="{}"/>"#, w - 70.0, PALETTE[l % 7]);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{name}</text>"#,
            w - 60.0,
            y + 4.0
        );
    }
    out.push_str("</svg>\n");
    out
}

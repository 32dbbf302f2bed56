//! Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
//! fail. Criteria 6-10 train and evaluate the full default configuration,
//! which takes several minutes on one core.

mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use common::grads;
use common::metrics_oracle::{brute_force, random_cm};
use common::nodal::{max_diff, nodal_s};
use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparamdx_core::datagen::{inject_noise, ChannelSelection, Dataset};
use sparamdx_core::defects::{
    dc_resistance, electrode_model, electrode_model_with, nominal_model, sweep_response, DefectLabel,
};
use sparamdx_core::harness::{kfold_split, metrics_from_confusion, MetricKind};
use sparamdx_core::models::ArchKind;
use sparamdx_core::network::{s_from_abcd, Element, LineParams, Lumped, NetworkDescription, SMatrix};
use sparamdx_core::pipeline::{self, RunConfig, RunOutput};
use sparamdx_core::touchstone::{
    parse_touchstone, write_touchstone, DataFormat, FreqUnit, SweepRecord, TouchstoneOptions,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn random_lumped(r: &mut ChaCha8Rng, depth: usize) -> Lumped {
    match if depth == 0 { r.random_range(0..3) } else { r.random_range(0..5) } {
        0 => Lumped::Resistor(r.random_range(0.1..200.0)),
        1 => Lumped::Inductor(r.random_range(1e-11..1e-8)),
        2 => Lumped::Capacitor(r.random_range(1e-14..1e-11)),
        k => {
            let parts = (0..r.random_range(1..3)).map(|_| random_lumped(r, depth - 1)).collect();
            if k == 3 {
                Lumped::Series(parts)
            } else {
                Lumped::Parallel(parts)
            }
        }
    }
}

fn random_element(r: &mut ChaCha8Rng) -> Element {
    match r.random_range(0..3) {
        0 => Element::SeriesImpedance(random_lumped(r, 2)),
        1 => Element::ShuntAdmittance(random_lumped(r, 2)),
        _ => Element::TransmissionLine(LineParams {
            r_per_m: r.random_range(0.0..5000.0),
            l_per_m: r.random_range(1e-7..1e-6),
            g_per_m: r.random_range(0.0..1.0),
            c_per_m: r.random_range(5e-11..3e-10),
            length_m: r.random_range(1e-4..0.02),
        }),
    }
}

fn power_sums_ok(s: &SMatrix) -> bool {
    s.s11.norm_sqr() + s.s21.norm_sqr() <= 1.0 + 1e-9 && s.s22.norm_sqr() + s.s12.norm_sqr() <= 1.0 + 1e-9
}

fn network_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let desc = NetworkDescription::new((0..r.random_range(1..9)).map(|_| random_element(&mut r)).collect());
        let f = r.random_range(1e6..1e10);
        let s = s_from_abcd(&desc.abcd_at(f).unwrap(), 50.0).unwrap();
        let oracle = nodal_s(&desc, f, 50.0);
        let scale = oracle.entries().iter().map(|v| v.norm()).fold(0.0, f64::max);
        worst = worst.max(max_diff(&s, &oracle) / scale);
    }

    // every sweep behind the default training pool and held-out base set
    let cfg = RunConfig::default();
    let ds = pipeline::synth(&cfg).unwrap();
    let mut sweeps = 0;
    let mut active = Vec::new();
    for sample in ds.train.samples.iter().chain(&ds.test_base.samples) {
        let m = electrode_model_with(&cfg.electrode, sample.label, Some(sample.base_seed));
        let rec = sweep_response(&m, &cfg.sweep).unwrap();
        if !rec.s.iter().all(power_sums_ok) {
            active.push(sample.base_seed);
        }
        sweeps += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-8 && active.is_empty() && secs < 10.0,
        format!(
            "max rel err {worst:.2e} over 1000 cascades; {sweeps} sweeps, {} non-passive; {secs:.1}s",
            active.len()
        ),
    )
}

fn touchstone_round_trip() -> Verdict {
    let t0 = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(202);
    let units = [FreqUnit::Hz, FreqUnit::KHz, FreqUnit::MHz, FreqUnit::GHz];
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(1..60);
        let mut f = r.random_range(1e3..1e9);
        let mut freqs = Vec::with_capacity(n);
        for _ in 0..n {
            freqs.push(f);
            f += r.random_range(1.0..1e8);
        }
        let entry = |r: &mut ChaCha8Rng| C::from_polar(r.random_range(1e-4..1.5), r.random_range(-PI..PI));
        let s: Vec<SMatrix> =
            (0..n).map(|_| SMatrix::new(entry(&mut r), entry(&mut r), entry(&mut r), entry(&mut r))).collect();
        let rec = SweepRecord::new(freqs, s, [50.0, 75.0, 25.5][r.random_range(0..3)]).unwrap();
        for format in [DataFormat::RI, DataFormat::MA, DataFormat::DB] {
            let opts = TouchstoneOptions { unit: units[r.random_range(0..4)], format, reference: rec.z0_ohm };
            let back = parse_touchstone(&write_touchstone(&rec, &opts)).unwrap();
            assert_eq!(back.len(), rec.len());
            assert_eq!(back.z0_ohm, rec.z0_ohm);
            for (a, b) in rec.freqs_hz.iter().zip(&back.freqs_hz) {
                worst = worst.max((a - b).abs() / a);
            }
            for (a, b) in rec.s.iter().zip(&back.s) {
                for (x, y) in a.entries().iter().zip(b.entries()) {
                    worst = worst.max((x - y).norm() / x.norm().max(1.0));
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(worst <= 1e-9 && secs < 5.0, format!("max error {worst:.2e} over 3000 round trips; {secs:.2}s"))
}

fn dc_calibration() -> Verdict {
    let expected = [49.5, 50.0, 50.1, 53.2, 49.8, (49.8 + 55.1) / 2.0, 55.1];
    let mut nominal_err = 0.0f64;
    let mut worst_frac = 1.0f64;
    let mut summary = Vec::new();
    for (label, target) in DefectLabel::ALL.into_iter().zip(expected) {
        nominal_err = nominal_err.max((dc_resistance(&nominal_model(label)) - target).abs());
        let draws = 10_000u64;
        let ok = (0..draws).filter(|&s| (dc_resistance(&electrode_model(label, s)) - target).abs() <= 1.5).count();
        let frac = ok as f64 / draws as f64;
        worst_frac = worst_frac.min(frac);
        summary.push(format!("{label} {:.2}%", 100.0 * frac));
    }
    verdict(
        nominal_err <= 1e-9 && worst_frac >= 0.99,
        format!("nominal max dev {nominal_err:.1e} ohm; within 1.5 ohm: {}", summary.join(", ")),
    )
}

fn noise_statistics() -> Verdict {
    let zeros = vec![0.0; 1_000_000];
    let mut parts = Vec::new();
    let mut pass = true;
    for x in [0.0, 5.0, 10.0] {
        let mut r = ChaCha8Rng::seed_from_u64(303 + x as u64);
        let noisy = inject_noise(&zeros, x, &mut r);
        let mean = noisy.iter().sum::<f64>() / noisy.len() as f64;
        let var = noisy.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (noisy.len() - 1) as f64;
        let target = 10f64.powf(x / 10.0);
        let rel = (var / target - 1.0).abs();
        pass &= rel <= 0.05;
        parts.push(format!("{x} dB: var {var:.4} vs {target:.4} ({:.2}%)", 100.0 * rel));
    }
    verdict(pass, parts.join("; "))
}

fn gradient_checks() -> Verdict {
    let t0 = Instant::now();
    let checks: Vec<(String, f64)> = grads::primitives().into_iter().chain(grads::architectures()).collect();
    let secs = t0.elapsed().as_secs_f64();
    let (name, worst) = checks.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let failing: Vec<&str> = checks.iter().filter(|c| c.1 > 1e-4).map(|c| c.0.as_str()).collect();
    verdict(
        failing.is_empty() && secs < 120.0,
        format!("{} checks, worst {worst:.2e} ({name}), failing {failing:?}; {secs:.1}s", checks.len()),
    )
}

/// Fold-model accuracy on its own training and validation rows.
fn clean_training(cfg: &RunConfig, out: &RunOutput, train_secs: f64) -> Verdict {
    let folds = kfold_split(&out.datasets.train.labels(), cfg.folds, cfg.seeds.folds).unwrap();
    let acc = |m: &sparamdx_core::harness::TrainedModel, ds: &Dataset| m.evaluate(ds).unwrap().accuracy;
    let mut pass = true;
    let mut parts = Vec::new();
    for e in out.experiments.iter().filter(|e| e.channels == ChannelSelection::Both) {
        let ds = out.datasets.train.select(e.channels).unwrap();
        let (mut tr, mut va) = (1.0f64, 1.0f64);
        for m in &e.models {
            let f = &folds[m.header.fold];
            tr = tr.min(acc(m, &ds.subset(&f.train)));
            va = va.min(acc(m, &ds.subset(&f.val)));
        }
        pass &= tr >= 0.99 && va >= 0.97;
        parts.push(format!("{} min fold train {:.4} val {:.4}", e.arch.name(), tr, va));
    }
    pass &= train_secs < 30.0 * 60.0;
    verdict(pass, format!("{}; pipeline {:.0}s", parts.join(", "), train_secs))
}

type AccTable = BTreeMap<(ArchKind, ChannelSelection), BTreeMap<i64, f64>>;

fn accuracy_table(out: &RunOutput) -> AccTable {
    let mut t = AccTable::new();
    for c in &out.cells {
        if let Some(db) = c.noise_db {
            t.entry((c.model, c.channels)).or_default().insert(db as i64, c.mean_std(MetricKind::Accuracy).0);
        }
    }
    t
}

fn channel_trend(t: &AccTable) -> Verdict {
    let cnn = |ch| &t[&(ArchKind::Cnn, ch)];
    let (both, s11, s21) = (cnn(ChannelSelection::Both), cnn(ChannelSelection::S11), cnn(ChannelSelection::S21));
    let mut pass = true;
    let mut parts = Vec::new();
    for db in [0, 5, 10] {
        pass &= both[&db] >= s11[&db] && s11[&db] >= s21[&db];
        parts.push(format!("{db} dB: {:.4} / {:.4} / {:.4}", both[&db], s11[&db], s21[&db]));
    }
    let gap = 100.0 * (both[&10] - s21[&10]);
    pass &= gap >= 5.0;
    verdict(pass, format!("CNN S11+S21 / S11 / S21 at {}; gap at 10 dB {gap:.1} pp", parts.join(", ")))
}

fn noise_degradation(t: &AccTable) -> Verdict {
    let mut violations = Vec::new();
    for ((arch, ch), accs) in t {
        if accs[&10] > accs[&0] {
            violations.push(format!("{} {ch}: {:.4} > {:.4}", arch.name(), accs[&10], accs[&0]));
        }
    }
    let detail = if violations.is_empty() {
        format!("10 dB accuracy <= 0 dB accuracy in all {} settings", t.len())
    } else {
        violations.join("; ")
    };
    verdict(violations.is_empty(), detail)
}

fn metric_oracle() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let cm = random_cm(&mut r);
        let m = metrics_from_confusion(&cm).unwrap();
        let (p, rc, f, a) = brute_force(&cm);
        for (x, y) in [(m.precision, p), (m.recall, rc), (m.f1, f), (m.accuracy, a)] {
            worst = worst.max((x - y).abs());
        }
    }
    verdict(worst <= 1e-12, format!("max abs diff {worst:.1e} over 10000 matrices"))
}

fn separability(out: &RunOutput) -> Verdict {
    let sil = |ch: ChannelSelection, db: Option<f64>| {
        out.embeddings.iter().find(|e| e.channels == ch && e.noise_db == db).map(|e| e.silhouette).unwrap()
    };
    let (both, s11, s21) =
        (sil(ChannelSelection::Both, None), sil(ChannelSelection::S11, None), sil(ChannelSelection::S21, None));
    let noisy: Vec<f64> = [0.0, 5.0, 10.0].iter().map(|&d| sil(ChannelSelection::Both, Some(d))).collect();
    let ordering = both >= s11 && s11 >= s21;
    let falling = noisy.windows(2).all(|w| w[1] <= w[0]);

    // non-increasing KL over the last 100 iterations, 1e-3 per step
    let mut kl_rises = 0;
    for e in &out.embeddings {
        let tail = &e.kl_history[e.kl_history.len() - 100..];
        kl_rises += tail.windows(2).filter(|w| w[1] > w[0] + 1e-3).count();
        kl_rises += e.kl_history.iter().filter(|&&k| !(k >= 0.0)).count();
    }
    verdict(
        ordering && falling && kl_rises == 0,
        format!(
            "clean S11+S21 / S11 / S21 {both:.3} / {s11:.3} / {s21:.3}; S11+S21 at 0/5/10 dB {:.3} / {:.3} / {:.3}; \
             KL tail violations {kl_rises} in {} embeddings",
            noisy[0],
            noisy[1],
            noisy[2],
            out.embeddings.len()
        ),
    )
}

fn small_config(root: &Path) -> RunConfig {
    let mut cfg: RunConfig = toml::from_str(
        r#"
        train_counts = [24, 24, 24, 24, 24, 24, 24]
        folds = 2
        [train]
        max_epochs = 10
        early_stop_patience = 4
        [embed]
        max_points = 140
        "#,
    )
    .unwrap();
    for p in &mut cfg.noise {
        p.counts = [20; 7];
    }
    cfg.output = root.join("run");
    cfg
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for sub in ["data", "models", "report", "embed"] {
        files.insert(format!("{sub}/manifest.json"), fs::read(root.join(sub).join("manifest.json")).unwrap());
    }
    files.insert("report/metrics.csv".into(), fs::read(root.join("report/metrics.csv")).unwrap());
    files.insert("run.json".into(), fs::read(root.join("run.json")).unwrap());
    files
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mut runs = Vec::new();
    for _ in 0..2 {
        pipeline::run_all(&cfg, |_| {}).unwrap();
        runs.push(snapshot(&cfg.output));
        fs::remove_dir_all(&cfg.output).unwrap();
    }
    let differing: Vec<&String> = runs[0].keys().filter(|k| runs[0][*k] != runs[1][*k]).collect();
    verdict(differing.is_empty(), format!("{} files compared across two runs, differing {differing:?}", runs[0].len()))
}

fn main() {
    // deterministic mode: a single worker for every parallel section
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().unwrap();
    let filter: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| filter.as_ref().is_none_or(|f| f.contains(&n));

    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        if wanted(n) {
            let v = f();
            println!("criterion {n:>2} {:<26} {} | {}", name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
            results.push((n, name, v));
        }
    };
    record(1, "network oracle", &mut network_oracle);
    record(2, "touchstone round trip", &mut touchstone_round_trip);
    record(3, "dc calibration", &mut dc_calibration);
    record(4, "noise statistics", &mut noise_statistics);
    record(5, "gradient checks", &mut gradient_checks);

    if [6, 7, 8, 10].into_iter().any(wanted) {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig { output: tmp.path().join("run"), ..RunConfig::default() };
        let t0 = Instant::now();
        let out = pipeline::run_all(&cfg, |line| eprintln!("[{:>6.0}s] {line}", t0.elapsed().as_secs_f64())).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let table = accuracy_table(&out);
        record(6, "clean training", &mut || clean_training(&cfg, &out, secs));
        record(7, "channel trend", &mut || channel_trend(&table));
        record(8, "noise degradation", &mut || noise_degradation(&table));
        record(9, "metric oracle", &mut metric_oracle);
        record(10, "separability", &mut || separability(&out));
    } else {
        record(9, "metric oracle", &mut metric_oracle);
    }
    record(11, "determinism", &mut determinism);

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed {:?}", results.len() - failed.len(), failed.len(), failed);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

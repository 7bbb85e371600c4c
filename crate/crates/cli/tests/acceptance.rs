//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line, even when all pass.
//! Exits non-zero if any criterion fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use mia_fano_core::bound::{bound_restated, fano_lower_bound, log_binomial_sum, BoundQuery};
use mia_fano_core::data::synth_blobs;
use mia_fano_core::experiment::default_theorem_grid;
use mia_fano_core::experiment::run_theorem_validation;
use mia_fano_core::infotheory::KnnEstimator;
use mia_fano_core::knn::SampleCloud;
use mia_fano_core::nn::{Activation, MlpModel};
use mia_fano_core::{rng, LogBase};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    check(took < budget, || format!("took {took:.1?}, budget {budget:?}"))?;
    Ok(took)
}

// ---- exact references ------------------------------------------------------

fn big_binomial_sum(n: u64, alpha: u64) -> BigUint {
    let mut c = BigUint::from(1u32);
    let mut sum = BigUint::from(1u32);
    for j in 1..=alpha {
        c = c * BigUint::from(n - j + 1) / BigUint::from(j);
        sum += &c;
    }
    sum
}

/// Natural log of a big integer through its top 64 bits.
fn ln_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 64 {
        return (x.to_u64_digits().first().copied().unwrap_or(0) as f64).ln();
    }
    let shift = bits - 64;
    let top: BigUint = x >> shift;
    (top.to_u64_digits()[0] as f64).ln() + shift as f64 * std::f64::consts::LN_2
}

fn binary_entropy_bits(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

// ---- criteria --------------------------------------------------------------

fn closed_form_values() -> Outcome {
    let mut worst: f64 = 0.0;
    // A fully informative attacker: I = |D| / c bits, no slack.
    for &d in &[100u64, 1000, 100_000] {
        for &c in &[2.0, 4.0, 10.0] {
            let q = BoundQuery { h_x: d as f64, mi: d as f64 / c, d_size: d, alpha: 0, log_base: LogBase::Bits };
            let got = fano_lower_bound(&q).map_err(|e| e.to_string())?.lower_bound;
            let want = 1.0 - 1.0 / c - 1.0 / d as f64;
            worst = worst.max((got - want).abs());
        }
    }
    let headline = fano_lower_bound(&BoundQuery {
        h_x: 1000.0,
        mi: 250.0,
        d_size: 1000,
        alpha: 0,
        log_base: LogBase::Bits,
    })
    .map_err(|e| e.to_string())?
    .lower_bound;
    check((headline - 0.749).abs() < 1e-9, || format!("c=4, |D|=1000 gave {headline}"))?;
    // An uninformative attacker with alpha allowed errors.
    for &d in &[100u64, 1000, 100_000] {
        for &alpha in &[1u64, 2, 5] {
            let q = BoundQuery { h_x: d as f64, mi: 0.0, d_size: d, alpha, log_base: LogBase::Bits };
            let got = fano_lower_bound(&q).map_err(|e| e.to_string())?.lower_bound;
            let log_v = ln_big(&big_binomial_sum(d, alpha)) / std::f64::consts::LN_2;
            let want = 1.0 - 1.0 / (d as f64 - log_v);
            worst = worst.max((got - want).abs());
        }
    }
    check(worst < 1e-9, || format!("largest deviation {worst:e}"))?;
    Ok(format!("largest deviation {worst:.1e}"))
}

fn binomial_sums() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for n in 0..=30u64 {
        for alpha in 0..=n {
            let got = log_binomial_sum(n, alpha, LogBase::Nats).map_err(|e| e.to_string())?;
            worst = worst.max((got - ln_big(&big_binomial_sum(n, alpha))).abs());
        }
    }
    check(worst < 1e-9, || format!("n <= 30 deviation {worst:e}"))?;
    let n = 1_000_000u64;
    let big = log_binomial_sum(n, n / 2, LogBase::Bits).map_err(|e| e.to_string())?;
    // The lower half of the row holds just over half of 2^n.
    check(big.is_finite() && big < n as f64 && big > n as f64 - 1.0, || format!("n = 1e6 gave {big}"))?;
    let took = within_budget(start, Duration::from_secs(5))?;
    Ok(format!("n <= 30 deviation {worst:.1e}, log2 V at n = 1e6 is {big:.4}, {took:.2?}"))
}

fn restated_form() -> Outcome {
    let mut r = rng::seeded(3);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 10_000 {
        let d_size: u64 = r.random_range(2..20_000);
        let base = if r.random_bool(0.5) { LogBase::Bits } else { LogBase::Nats };
        let alpha = r.random_range(0..=d_size / 2);
        let d_units = d_size as f64 * base.one_bit();
        let h_x = r.random_range(0.0..=1.0) * d_units;
        let mi = r.random_range(0.0..=1.0) * h_x;
        let q = BoundQuery { h_x, mi, d_size, alpha, log_base: base };
        let Ok(direct) = fano_lower_bound(&q) else { continue };
        let c = (h_x - mi) / d_units;
        let z = direct.log_v_alpha / d_units;
        let restated = bound_restated(c, z, d_units).map_err(|e| e.to_string())?;
        worst = worst.max((restated - direct.lower_bound).abs() / direct.lower_bound.abs().max(1.0));
        checked += 1;
    }
    check(worst <= 1e-12, || format!("largest scaled deviation {worst:e}"))?;
    Ok(format!("{checked} queries, largest scaled deviation {worst:.1e}"))
}

fn threshold_sweep(bin: &Path, scratch: &Path) -> Outcome {
    let start = Instant::now();
    let out = scratch.join("thresholds");
    let status = Command::new(bin)
        .args(["--base", "nats", "--out"])
        .arg(&out)
        .args(["sweep-thresholds", "--d-size", "10000"])
        .output()
        .map_err(|e| e.to_string())?;
    check(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    let text = fs::read_to_string(out.join("thresholds.csv")).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        rows.push((f[0], f[2]));
    }
    check(rows.len() > 2, || "no rows".into())?;
    check(rows.windows(2).all(|w| w[1].1 >= w[0].1), || "curve is not monotone".into())?;
    let (frac, half) = *rows.last().unwrap();
    check((frac - 0.5).abs() < 1e-12, || format!("last grid point {frac}"))?;
    check((half - 0.69).abs() <= 0.02, || format!("c* at one half is {half}"))?;
    let quarter = rows.iter().filter(|r| r.0 <= 0.25).map(|r| r.1).fold(f64::MIN, f64::max);
    check(quarter < 0.60, || format!("c* up to one quarter reaches {quarter}"))?;
    let took = within_budget(start, Duration::from_secs(10))?;
    Ok(format!("c*(0.5) = {half:.4}, max c* for alpha/|D| <= 0.25 is {quarter:.4}, {took:.2?}"))
}

fn estimator_correctness() -> Outcome {
    let start = Instant::now();
    let n = 20_000;
    let est = KnnEstimator::new(3, 0.0);
    let mut r = rng::seeded(11);
    let mut normal = || -> f64 { StandardNormal.sample(&mut r) };
    let gauss: Vec<f64> = (0..n).map(|_| normal()).collect();
    let a: Vec<f64> = (0..n).map(|_| normal()).collect();
    let b: Vec<f64> = (0..n).map(|_| normal()).collect();
    let rho: f64 = 0.9;
    let correlated: Vec<f64> = a.iter().zip(&b).map(|(x, z)| rho * x + (1.0 - rho * rho).sqrt() * z).collect();
    let mut r = rng::seeded(12);
    let uniform: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();

    let cloud = |v: &[f64]| SampleCloud::from_values(v).map_err(|e| e.to_string());
    let h_gauss = est.entropy(&cloud(&gauss)?, 1).map_err(|e| e.to_string())?;
    let h_gauss_want = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    check((h_gauss - h_gauss_want).abs() <= 0.05, || format!("Gaussian entropy {h_gauss}"))?;
    let h_unif = est.entropy(&cloud(&uniform)?, 1).map_err(|e| e.to_string())?;
    check(h_unif.abs() <= 0.05, || format!("uniform entropy {h_unif}"))?;
    let mi = est
        .mutual_information(&cloud(&a)?, &cloud(&correlated)?, 1, LogBase::Nats)
        .map_err(|e| e.to_string())?
        .value;
    let mi_want = -0.5 * (1.0 - rho * rho).ln();
    check((mi - mi_want).abs() <= 0.1, || format!("rho = 0.9 MI {mi}, want {mi_want}"))?;
    let indep = est
        .mutual_information(&cloud(&a)?, &cloud(&b)?, 1, LogBase::Nats)
        .map_err(|e| e.to_string())?
        .value;
    check(indep.abs() < 0.05, || format!("independent MI {indep}"))?;
    let took = within_budget(start, Duration::from_secs(60))?;
    Ok(format!(
        "H(gauss) = {h_gauss:.4}, H(unif) = {h_unif:.4}, I(rho=0.9) = {mi:.4}, I(indep) = {indep:.4}, {took:.1?}"
    ))
}

fn theorem_validation() -> Outcome {
    let start = Instant::now();
    let rows = run_theorem_validation(&default_theorem_grid(200_000, 0)).map_err(|e| e.to_string())?;
    check(rows.len() == 36, || format!("{} cells", rows.len()))?;
    let mut positive = 0;
    let mut tightest = f64::INFINITY;
    for row in &rows {
        let cfg = &row.config;
        let d = cfg.d_size as f64;
        // The bound recomputed from the channel's closed-form quantities.
        let mi = d * (1.0 - binary_entropy_bits(cfg.flip_prob));
        let log_v = ln_big(&big_binomial_sum(cfg.d_size as u64, cfg.alpha)) / std::f64::consts::LN_2;
        let bound = (d - mi - 1.0 - log_v) / (d - log_v);
        if bound <= 0.0 {
            continue;
        }
        positive += 1;
        let margin = row.empirical - (bound - 3.0 * row.std_error);
        tightest = tightest.min(margin);
        check(margin >= 0.0, || {
            format!(
                "p = {}, |D| = {}, alpha = {}: empirical {} below bound {bound}",
                cfg.flip_prob, cfg.d_size, cfg.alpha, row.empirical
            )
        })?;
    }
    check(positive > 0, || "no cell has a positive bound".into())?;
    let took = within_budget(start, Duration::from_secs(120))?;
    Ok(format!("{positive} positive cells, smallest margin {tightest:.4}, {took:.1?}"))
}

struct CorrelateRun {
    took: Duration,
    mi: Vec<f64>,
    success: Vec<Vec<f64>>,
    pooled_r: f64,
}

fn run_correlate(bin: &Path, out: &Path) -> Result<CorrelateRun, String> {
    let start = Instant::now();
    let status = Command::new(bin)
        .arg("--out")
        .arg(out)
        .arg("correlate")
        .output()
        .map_err(|e| e.to_string())?;
    check(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    let took = start.elapsed();
    let table = fs::read_to_string(out.join("correlation.csv")).map_err(|e| e.to_string())?;
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let mi_col = header.iter().position(|h| *h == "mi").ok_or("no mi column")?;
    let success_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("success_")).collect();
    let (mut mi, mut success) = (Vec::new(), Vec::new());
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        mi.push(f[mi_col].parse::<f64>().map_err(|e| e.to_string())?);
        success.push(success_cols.iter().map(|&i| f[i].parse::<f64>().unwrap()).collect());
    }
    let pearson = fs::read_to_string(out.join("pearson.csv")).map_err(|e| e.to_string())?;
    let pooled_r = pearson
        .lines()
        .find_map(|l| l.strip_prefix("pooled,"))
        .ok_or("no pooled row")?
        .parse()
        .map_err(|e: std::num::ParseFloatError| e.to_string())?;
    Ok(CorrelateRun { took, mi, success, pooled_r })
}

fn correlation_property(run: &Result<CorrelateRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    check(run.mi.len() == 4, || format!("{} family members", run.mi.len()))?;
    check(run.success.iter().all(|s| s.len() == 3), || "expected 3 attack variants".into())?;
    check(run.mi.windows(2).all(|w| w[1] > w[0]), || format!("MI not increasing: {:?}", run.mi))?;
    let top = run.success.last().unwrap();
    let bottom = &run.success[0];
    check(top.iter().all(|&s| s > 0.6), || format!("most overfit success {top:?}"))?;
    check(bottom.iter().all(|&s| s <= 0.58), || format!("least overfit success {bottom:?}"))?;
    // Pooled over every (model, variant) pair, recomputed here.
    let pairs: Vec<(f64, f64)> =
        run.mi.iter().zip(&run.success).flat_map(|(&m, s)| s.iter().map(move |&v| (m, v))).collect();
    let n = pairs.len() as f64;
    let (mx, my) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r = sxy / (sxx * syy).sqrt();
    check((r - run.pooled_r).abs() < 1e-9, || format!("reported r {} vs recomputed {r}", run.pooled_r))?;
    check(r >= 0.8, || format!("pooled r = {r:.4}"))?;
    check(run.took < Duration::from_secs(300), || format!("took {:.1?}", run.took))?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    Ok(format!(
        "MI [{}], success least [{}] most [{}], pooled r = {r:.3}, {:.1?}",
        fmt(&run.mi),
        fmt(bottom),
        fmt(top),
        run.took
    ))
}

fn gradient_check() -> Outcome {
    let archs: [&[usize]; 5] = [&[2, 3, 2], &[3, 4, 3], &[2, 4, 3, 2], &[4, 5, 3], &[2, 3, 3, 3, 2]];
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0usize, 0usize);
    for (a, layers) in archs.iter().enumerate() {
        for act in [Activation::Tanh, Activation::Relu] {
            for seed in 0..4u64 {
                let model = MlpModel::init(layers, act, seed * 31 + a as u64).map_err(|e| e.to_string())?;
                check(model.num_params() <= 50, || format!("{layers:?} has {} params", model.num_params()))?;
                let classes = *layers.last().unwrap();
                let data = synth_blobs(classes, 4, layers[0], 0.8, seed + 100).map_err(|e| e.to_string())?;
                let xs: Vec<&[f64]> = data.rows().collect();
                let l2 = 0.01 * seed as f64;
                let (_, grads) = model.loss_and_grad(&xs, data.labels(), l2).map_err(|e| e.to_string())?;
                let analytic = grads.flatten();
                let params = model.params();
                let h = 1e-5;
                for i in 0..params.len() {
                    let shifted = |delta: f64| {
                        let mut p = params.clone();
                        p[i] += delta;
                        let mut m = model.clone();
                        m.set_params(&p).unwrap();
                        m
                    };
                    let (up, down) = (shifted(h), shifted(-h));
                    // A ReLU switching on or off inside the stencil makes the difference meaningless.
                    if act == Activation::Relu {
                        let here = relu_pattern(&model, &xs);
                        if relu_pattern(&up, &xs) != here || relu_pattern(&down, &xs) != here {
                            skipped += 1;
                            continue;
                        }
                    }
                    let loss = |m: &MlpModel| m.loss_and_grad(&xs, data.labels(), l2).unwrap().0;
                    let (plus, minus) = (loss(&up), loss(&down));
                    let numeric = (plus - minus) / (2.0 * h);
                    let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
                    worst = worst.max(err);
                    checked += 1;
                }
            }
        }
    }
    check(worst < 1e-4, || format!("largest relative error {worst:e}"))?;
    Ok(format!("{checked} parameters, {skipped} on ReLU kinks skipped, largest relative error {worst:.1e}"))
}

/// Which ReLU units are active, over every sample and hidden layer.
/// Recomputed from the row-major `out x in` weights.
fn relu_pattern(model: &MlpModel, xs: &[&[f64]]) -> Vec<bool> {
    let (ws, bs) = (model.weights(), model.biases());
    let mut pattern = Vec::new();
    for x in xs {
        let mut h = x.to_vec();
        for l in 0..ws.len() - 1 {
            h = ws[l]
                .chunks_exact(h.len())
                .zip(&bs[l])
                .map(|(row, b)| row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect();
            pattern.extend(h.iter().map(|&z| z > 0.0));
            h.iter_mut().for_each(|z| *z = z.max(0.0));
        }
    }
    pattern
}

fn determinism(first: &Result<CorrelateRun, String>, a: &Path, bin: &Path, b: &Path) -> Outcome {
    first.as_ref().map_err(Clone::clone)?;
    run_correlate(bin, b)?;
    let mut compared = Vec::new();
    for entry in fs::read_dir(a).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let name = path.file_name().unwrap().to_owned();
            let left = fs::read(&path).map_err(|e| e.to_string())?;
            let right = fs::read(b.join(&name)).map_err(|e| e.to_string())?;
            check(left == right, || format!("{} differs", name.to_string_lossy()))?;
            compared.push(name.to_string_lossy().into_owned());
        }
    }
    compared.sort();
    check(compared.len() >= 3, || format!("only {compared:?} written"))?;
    Ok(format!("identical: {}", compared.join(", ")))
}

fn main() {
    let bin = Path::new(env!("CARGO_BIN_EXE_mia-fano"));
    let scratch = tempfile::tempdir().expect("temp dir");
    let (first_out, second_out) = (scratch.path().join("run1"), scratch.path().join("run2"));

    let mut correlate_run = None;
    let mut failures = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS [{id}] {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL [{id}] {name}: {detail}");
            }
        }
    };

    report(1, "closed-form bound values", &mut closed_form_values);
    report(2, "log binomial sums", &mut binomial_sums);
    report(3, "restated bound form", &mut restated_form);
    report(4, "threshold sweep", &mut || threshold_sweep(bin, scratch.path()));
    report(5, "kNN estimator", &mut estimator_correctness);
    report(6, "channel validation", &mut theorem_validation);
    report(7, "MI vs attack success", &mut || {
        let run = correlate_run.get_or_insert_with(|| run_correlate(bin, &first_out));
        correlation_property(run)
    });
    report(8, "gradient check", &mut gradient_check);
    report(9, "correlate determinism", &mut || {
        let run = correlate_run.get_or_insert_with(|| run_correlate(bin, &first_out));
        determinism(run, &first_out, bin, &second_out)
    });

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

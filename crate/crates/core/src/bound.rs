//! Lower bound on the probability that a membership inference attack over a
//! pool `D` makes more than `alpha` errors:
//!
//! ```text
//! p_alpha >= (H(X) - I(X;Y) - 1 - log V(alpha)) / (|D| - log V(alpha))
//! V(alpha) = C(|D|, 0) + ... + C(|D|, alpha)
//! ```
//!
//! The `|D|` in the denominator is `log 2^|D|`, so it is expressed in the
//! query's log base (`|D| ln 2` in nats). The constant `1` is kept as written.
//! The threshold helpers follow the plotting convention of dividing by the
//! raw count `|D|`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::units::LogBase;

/// Largest pool for which [`simulate_channel`] packs membership vectors into a word.
pub const MAX_SIM_POOL: usize = 20;

/// `log(sum_{j=0}^{alpha} C(n, j))` in `base`, with a log-sum-exp reduction
/// over terms built by the ratio `C(n, j) / C(n, j - 1) = (n - j + 1) / j`.
/// Log-gamma differences lose about `1e-12` absolute already at `n = 1000`;
/// the running sum of small logs stays near machine precision.
pub fn log_binomial_sum(n: u64, alpha: u64, base: LogBase) -> Result<f64> {
    if alpha > n {
        return Err(Error::invalid(format!("alpha = {alpha} exceeds n = {n}")));
    }
    if alpha == n {
        return Ok(n as f64 * base.one_bit());
    }
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    let mut ln_c = 0.0;
    terms.push(ln_c);
    for j in 1..=alpha {
        ln_c += ((n - j + 1) as f64 / j as f64).ln();
        terms.push(ln_c);
    }
    let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - peak).exp()).sum();
    Ok(base.from_nats(peak + sum.ln()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    /// Entropy of the membership vector.
    pub h_x: f64,
    /// Mutual information between membership and model outputs.
    pub mi: f64,
    /// Pool size |D|.
    pub d_size: u64,
    pub alpha: u64,
    pub log_base: LogBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    /// `numerator / denominator`; non-positive values are vacuous.
    pub lower_bound: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub log_v_alpha: f64,
    pub positive: bool,
}

impl BoundQuery {
    fn validate(&self) -> Result<()> {
        if !(self.h_x.is_finite() && self.h_x >= 0.0) {
            return Err(Error::invalid(format!("h_x must be finite and >= 0, got {}", self.h_x)));
        }
        if !(self.mi.is_finite() && self.mi >= 0.0) {
            return Err(Error::invalid(format!("mi must be finite and >= 0, got {}", self.mi)));
        }
        if self.d_size == 0 {
            return Err(Error::invalid("|D| must be at least 1"));
        }
        if self.alpha > self.d_size {
            return Err(Error::invalid(format!(
                "alpha = {} exceeds |D| = {}",
                self.alpha, self.d_size
            )));
        }
        let max_entropy = self.d_size as f64 * self.log_base.one_bit();
        if self.h_x > max_entropy * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "h_x = {} exceeds the entropy of {} membership bits ({max_entropy} {})",
                self.h_x, self.d_size, self.log_base
            )));
        }
        Ok(())
    }

    /// `|D|` in the query's log units.
    pub fn d_in_units(&self) -> f64 {
        self.d_size as f64 * self.log_base.one_bit()
    }
}

pub fn fano_lower_bound(q: &BoundQuery) -> Result<BoundResult> {
    q.validate()?;
    let log_v = log_binomial_sum(q.d_size, q.alpha, q.log_base)?;
    let numerator = q.h_x - q.mi - 1.0 - log_v;
    let denominator = q.d_in_units() - log_v;
    if denominator <= 0.0 {
        return Err(Error::VacuousThreshold {
            d_size: q.d_size,
            alpha: q.alpha,
            denominator,
        });
    }
    Ok(BoundResult {
        lower_bound: numerator / denominator,
        numerator,
        denominator,
        log_v_alpha: log_v,
        positive: numerator > 0.0,
    })
}

/// `1 - (1 + 1/d - c) / (1 - z)` with `c = H(X|Y) / d` and
/// `z = log V(alpha) / d`, where `d` is `|D|` in the same units.
pub fn bound_restated(c: f64, z: f64, d_size: f64) -> Result<f64> {
    if !(d_size > 0.0) {
        return Err(Error::invalid("|D| must be positive"));
    }
    if !(z < 1.0) {
        return Err(Error::invalid(format!("z must be < 1, got {z}")));
    }
    Ok(1.0 - (1.0 + 1.0 / d_size - c) / (1.0 - z))
}

/// Smallest `H(X|Y) / |D|` for which the bound is positive:
/// `(1 + log V(alpha)) / |D|` with `|D|` as a raw count.
pub fn threshold_conditional_entropy(d_size: u64, alpha: u64, base: LogBase) -> Result<f64> {
    if alpha >= d_size {
        return Err(Error::invalid(format!(
            "alpha = {alpha} must be below |D| = {d_size}"
        )));
    }
    Ok((1.0 + log_binomial_sum(d_size, alpha, base)?) / d_size as f64)
}

/// The `z` at which the restated bound crosses zero for a given `c`.
pub fn threshold_z(c: f64, d_size: f64) -> f64 {
    c - 1.0 / d_size
}

/// Largest `alpha` with `log V(alpha) / |D| <= z`, by bisection over the
/// strictly increasing `log V`. `None` when even `alpha = 0` exceeds `z`.
pub fn alpha_for_z(z: f64, d_size: u64, base: LogBase) -> Result<Option<u64>> {
    let ratio = |a: u64| log_binomial_sum(d_size, a, base).map(|v| v / d_size as f64);
    if ratio(0)? > z {
        return Ok(None);
    }
    if ratio(d_size)? <= z {
        return Ok(Some(d_size));
    }
    // Invariant: ratio(lo) <= z < ratio(hi).
    let (mut lo, mut hi) = (0u64, d_size);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ratio(mid)? <= z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub alpha_over_d: f64,
    pub alpha: u64,
    pub c_star: f64,
    pub z_star: f64,
}

/// Threshold curves on `points` evenly spaced values of `alpha / |D|` in
/// `[0, 0.5]`.
pub fn sweep_thresholds(d_size: u64, points: usize, base: LogBase) -> Result<Vec<ThresholdRow>> {
    if d_size < 2 {
        return Err(Error::invalid("|D| must be at least 2"));
    }
    if points < 2 {
        return Err(Error::invalid("need at least 2 grid points"));
    }
    (0..points)
        .into_par_iter()
        .map(|i| {
            let frac = 0.5 * i as f64 / (points - 1) as f64;
            let alpha = ((frac * d_size as f64).round() as u64).min(d_size - 1);
            let c_star = threshold_conditional_entropy(d_size, alpha, base)?;
            Ok(ThresholdRow {
                alpha_over_d: frac,
                alpha,
                c_star,
                z_star: threshold_z(c_star, d_size as f64),
            })
        })
        .collect()
}

/// Binary entropy in bits.
pub fn binary_entropy_bits(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSimConfig {
    pub d_size: usize,
    pub flip_prob: f64,
    pub trials: u64,
    pub alpha: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSimResult {
    pub config: ChannelSimConfig,
    /// Fraction of trials with more than `alpha` errors.
    pub empirical: f64,
    pub std_error: f64,
    /// `I(X; A)` in bits.
    pub mutual_information: f64,
    pub bound: BoundResult,
    /// `empirical >= lower_bound - 3 * std_error`, or the bound is not positive.
    pub holds: bool,
}

const SIM_CHUNK: u64 = 8192;

/// Monte-Carlo check of the bound on a binary symmetric channel.
///
/// Membership `X` is uniform on `{0,1}^|D|` (so `H(X) = |D|` bits) and the
/// attacker output `A` flips each coordinate independently with
/// `flip_prob`, giving `I(X; A) = |D| (1 - H2(flip_prob))` bits. Trials are
/// split into fixed chunks with derived seeds; counts are summed, so the
/// result does not depend on the worker count.
pub fn simulate_channel(cfg: &ChannelSimConfig) -> Result<ChannelSimResult> {
    if cfg.d_size == 0 || cfg.d_size > MAX_SIM_POOL {
        return Err(Error::invalid(format!(
            "|D| must be in 1..={MAX_SIM_POOL}, got {}",
            cfg.d_size
        )));
    }
    if !(0.0..=0.5).contains(&cfg.flip_prob) {
        return Err(Error::invalid(format!(
            "flip_prob must be in [0, 0.5], got {}",
            cfg.flip_prob
        )));
    }
    if cfg.trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let d = cfg.d_size as u64;
    let mutual_information = d as f64 * (1.0 - binary_entropy_bits(cfg.flip_prob));
    let bound = fano_lower_bound(&BoundQuery {
        h_x: d as f64,
        mi: mutual_information,
        d_size: d,
        alpha: cfg.alpha,
        log_base: LogBase::Bits,
    })?;

    let mask: u32 = (1u32 << cfg.d_size) - 1;
    let chunks = cfg.trials.div_ceil(SIM_CHUNK);
    let exceed: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            use rand::Rng;
            let mut rng = rng::seeded(rng::derive(cfg.seed, c));
            let n = SIM_CHUNK.min(cfg.trials - c * SIM_CHUNK);
            let mut count = 0u64;
            for _ in 0..n {
                let truth: u32 = rng.random::<u32>() & mask;
                let mut flips = 0u32;
                for bit in 0..cfg.d_size {
                    if rng.random::<f64>() < cfg.flip_prob {
                        flips |= 1 << bit;
                    }
                }
                let attack = truth ^ flips;
                let xi = (truth ^ attack).count_ones() as u64;
                if xi > cfg.alpha {
                    count += 1;
                }
            }
            count
        })
        .sum();
    let empirical = exceed as f64 / cfg.trials as f64;
    let std_error = (empirical * (1.0 - empirical) / cfg.trials as f64).sqrt();
    let holds = !bound.positive || empirical >= bound.lower_bound - 3.0 * std_error;
    Ok(ChannelSimResult {
        config: *cfg,
        empirical,
        std_error,
        mutual_information,
        bound,
        holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_term_is_zero() {
        assert!(log_binomial_sum(10, 0, LogBase::Nats).unwrap().abs() < 1e-12);
    }

    #[test]
    fn small_sum_matches_hand_value() {
        let v = log_binomial_sum(10, 2, LogBase::Nats).unwrap();
        assert!((v - 56f64.ln()).abs() < 1e-12);
        assert!((v - 4.02535).abs() < 1e-5);
    }

    #[test]
    fn full_sum_is_n_bits() {
        assert_eq!(log_binomial_sum(10, 10, LogBase::Bits).unwrap(), 10.0);
        assert!(log_binomial_sum(10, 11, LogBase::Bits).is_err());
    }

    #[test]
    fn quarter_information_leaves_most_errors() {
        let r = fano_lower_bound(&BoundQuery {
            h_x: 1000.0,
            mi: 250.0,
            d_size: 1000,
            alpha: 0,
            log_base: LogBase::Bits,
        })
        .unwrap();
        assert!((r.lower_bound - 0.749).abs() < 1e-12);
        assert!(r.positive);
    }

    #[test]
    fn uninformative_attacker_with_two_errors() {
        let r = fano_lower_bound(&BoundQuery {
            h_x: 1000.0,
            mi: 0.0,
            d_size: 1000,
            alpha: 2,
            log_base: LogBase::Bits,
        })
        .unwrap();
        // V(2) = 1 + 1000 + 499500
        let expected = 1.0 - 1.0 / (1000.0 - 500_501f64.log2());
        assert!((r.lower_bound - expected).abs() < 1e-12);
        assert!((r.lower_bound - 0.998981).abs() < 1e-6);
    }

    #[test]
    fn vacuous_when_mi_exceeds_entropy() {
        let r = fano_lower_bound(&BoundQuery {
            h_x: 50.0,
            mi: 60.0,
            d_size: 100,
            alpha: 1,
            log_base: LogBase::Bits,
        })
        .unwrap();
        assert!(!r.positive);
        assert!(r.lower_bound < 0.0);
        assert_eq!(r.lower_bound, r.numerator / r.denominator);
    }

    #[test]
    fn alpha_equal_to_pool_is_vacuous_threshold() {
        for base in [LogBase::Bits, LogBase::Nats] {
            let q = BoundQuery { h_x: 5.0, mi: 0.0, d_size: 10, alpha: 10, log_base: base };
            assert!(matches!(fano_lower_bound(&q), Err(Error::VacuousThreshold { .. })));
        }
    }

    #[test]
    fn rejects_invalid_queries() {
        let base = BoundQuery { h_x: 5.0, mi: 1.0, d_size: 10, alpha: 1, log_base: LogBase::Bits };
        assert!(fano_lower_bound(&BoundQuery { h_x: -1.0, ..base }).is_err());
        assert!(fano_lower_bound(&BoundQuery { mi: -1.0, ..base }).is_err());
        assert!(fano_lower_bound(&BoundQuery { alpha: 11, ..base }).is_err());
        assert!(fano_lower_bound(&BoundQuery { h_x: 11.0, ..base }).is_err());
    }

    #[test]
    fn restated_edge_cases() {
        assert_eq!(bound_restated(1.0 + 1.0 / 100.0, 0.3, 100.0).unwrap(), 1.0);
        assert!(bound_restated(0.5, 1.0, 100.0).is_err());
        let near = bound_restated(0.5, 1.0 - 1e-12, 100.0).unwrap();
        assert!(near < -1e10);
    }

    #[test]
    fn thresholds() {
        for base in [LogBase::Bits, LogBase::Nats] {
            let c = threshold_conditional_entropy(500, 0, base).unwrap();
            assert!((c - 1.0 / 500.0).abs() < 1e-15);
        }
        assert!(threshold_conditional_entropy(10, 10, LogBase::Bits).is_err());
        assert_eq!(threshold_z(1.0 / 50.0, 50.0), 0.0);
        let c = 0.4;
        let z = threshold_z(c, 200.0);
        assert!(bound_restated(c, z, 200.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn alpha_inversion_brackets_z() {
        for &z in &[0.05, 0.2, 0.5, 0.69] {
            let a = alpha_for_z(z, 1000, LogBase::Nats).unwrap().unwrap();
            let at = log_binomial_sum(1000, a, LogBase::Nats).unwrap() / 1000.0;
            let next = log_binomial_sum(1000, a + 1, LogBase::Nats).unwrap() / 1000.0;
            assert!(at <= z && next > z, "z={z}: a={a} at={at} next={next}");
        }
        assert_eq!(alpha_for_z(-0.1, 100, LogBase::Bits).unwrap(), None);
        assert_eq!(alpha_for_z(1.0, 100, LogBase::Bits).unwrap(), Some(100));
    }

    #[test]
    fn binary_entropy_values() {
        assert_eq!(binary_entropy_bits(0.0), 0.0);
        assert!((binary_entropy_bits(0.5) - 1.0).abs() < 1e-15);
        assert!((binary_entropy_bits(0.11) - 0.4999).abs() < 1e-3);
    }

    #[test]
    fn noiseless_channel_has_no_errors_and_vacuous_bound() {
        let r = simulate_channel(&ChannelSimConfig {
            d_size: 10,
            flip_prob: 0.0,
            trials: 10_000,
            alpha: 0,
            seed: 1,
        })
        .unwrap();
        assert_eq!(r.empirical, 0.0);
        assert!(!r.bound.positive);
        assert!(r.holds);
    }

    #[test]
    fn useless_channel_bound() {
        let d = 12;
        let r = simulate_channel(&ChannelSimConfig {
            d_size: d,
            flip_prob: 0.5,
            trials: 50_000,
            alpha: 0,
            seed: 2,
        })
        .unwrap();
        assert!(r.mutual_information.abs() < 1e-12);
        assert!((r.bound.lower_bound - (d as f64 - 1.0) / d as f64).abs() < 1e-12);
        assert!(r.empirical >= r.bound.lower_bound);
        assert!(r.holds);
    }

    #[test]
    fn simulator_rejects_large_pools() {
        let cfg = ChannelSimConfig { d_size: 21, flip_prob: 0.1, trials: 10, alpha: 0, seed: 0 };
        assert!(simulate_channel(&cfg).is_err());
        let cfg = ChannelSimConfig { d_size: 8, flip_prob: 0.6, trials: 10, alpha: 0, seed: 0 };
        assert!(simulate_channel(&cfg).is_err());
    }
}

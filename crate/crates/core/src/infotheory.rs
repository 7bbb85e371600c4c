//! kNN estimates of differential entropy and mutual information.
//!
//! Both estimators share the density model
//! `p_k(x) = k / (n - 1) * Gamma(d/2 + 1) / pi^(d/2) * r_k(x)^(-d)`.
//! [`EntropyVariant::Plain`] averages `-ln p_k` directly. The
//! [`EntropyVariant::KozachenkoLeonenko`] variant replaces `ln((n - 1) / k)`
//! with `psi(n) - psi(k)`, removing the `ln k - psi(k)` bias of the plain form
//! (about 0.176 nats at `k = 3`). Mutual information is
//! `H(X) + H(Y) - H(X, Y)` with each term estimated separately.

use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::knn::{knn_radius, SampleCloud};
use crate::nn::MlpModel;
use crate::rng;
use crate::units::LogBase;

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyVariant {
    /// Digamma-corrected Kozachenko-Leonenko estimator.
    #[default]
    KozachenkoLeonenko,
    /// `-(1/n) sum ln p_k(x_i)` without the digamma correction.
    Plain,
}

impl FromStr for EntropyVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "kozachenko-leonenko" | "kl" => Ok(EntropyVariant::KozachenkoLeonenko),
            "plain" => Ok(EntropyVariant::Plain),
            other => Err(format!(
                "unknown estimator `{other}` (expected kozachenko-leonenko or plain)"
            )),
        }
    }
}

/// Neighbour count, jitter amplitude and estimator variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnEstimator {
    pub k: usize,
    pub jitter: f64,
    #[serde(default)]
    pub variant: EntropyVariant,
}

impl Default for KnnEstimator {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            jitter: DEFAULT_JITTER,
            variant: EntropyVariant::default(),
        }
    }
}

/// Mutual information with its entropy components, all in `log_base` units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    pub log_base: LogBase,
    pub k: usize,
    pub n: usize,
    pub jitter: f64,
    pub h_x: f64,
    pub h_y: f64,
    pub h_xy: f64,
}

impl MiEstimate {
    fn from_nats(h_x: f64, h_y: f64, h_xy: f64, base: LogBase, est: &KnnEstimator, n: usize) -> Self {
        let (h_x, h_y, h_xy) = (base.from_nats(h_x), base.from_nats(h_y), base.from_nats(h_xy));
        Self {
            value: h_x + h_y - h_xy,
            log_base: base,
            k: est.k,
            n,
            jitter: est.jitter,
            h_x,
            h_y,
            h_xy,
        }
    }

    pub fn in_base(&self, base: LogBase) -> Self {
        let to = |v: f64| base.from_nats(self.log_base.to_nats(v));
        let (h_x, h_y, h_xy) = (to(self.h_x), to(self.h_y), to(self.h_xy));
        Self {
            value: h_x + h_y - h_xy,
            log_base: base,
            h_x,
            h_y,
            h_xy,
            ..*self
        }
    }
}

/// Adds `U(-amount, amount)` to every coordinate.
pub fn jitter(points: &SampleCloud, amount: f64, seed: u64) -> Result<SampleCloud> {
    if !(amount.is_finite() && amount >= 0.0) {
        return Err(Error::invalid(format!("jitter must be non-negative, got {amount}")));
    }
    if amount == 0.0 {
        return Ok(points.clone());
    }
    let mut rng = rng::seeded(seed);
    let data = points
        .as_slice()
        .iter()
        .map(|&v| v + rng.random_range(-amount..amount))
        .collect();
    SampleCloud::new(data, points.dim())
}

/// `ln(pi^(d/2) / Gamma(d/2 + 1))`, the log-volume of the unit d-ball.
fn ln_unit_ball_volume(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    half * std::f64::consts::PI.ln() - ln_gamma(half + 1.0)
}

impl KnnEstimator {
    pub fn new(k: usize, jitter: f64) -> Self {
        Self {
            k,
            jitter,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: EntropyVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Entropy in nats of points used as given (no jitter).
    pub fn entropy_exact_points(&self, points: &SampleCloud) -> Result<f64> {
        let radii = knn_radius(points, self.k)?;
        let zeros = radii.iter().filter(|&&r| r == 0.0).count();
        if zeros > 0 {
            return Err(Error::DuplicatePoints { count: zeros });
        }
        let n = points.len();
        let d = points.dim() as f64;
        let log_r: Vec<f64> = radii.par_iter().map(|r| r.ln()).collect();
        let mean_log_r = log_r.iter().sum::<f64>() / n as f64;
        let count_term = match self.variant {
            EntropyVariant::Plain => ((n - 1) as f64).ln() - (self.k as f64).ln(),
            EntropyVariant::KozachenkoLeonenko => digamma(n as f64) - digamma(self.k as f64),
        };
        Ok(count_term + ln_unit_ball_volume(points.dim()) + d * mean_log_r)
    }

    /// Entropy in nats after jittering with `seed`.
    pub fn entropy(&self, points: &SampleCloud, seed: u64) -> Result<f64> {
        let jittered = jitter(points, self.jitter, seed)?;
        self.entropy_exact_points(&jittered)
    }

    /// `I(X; Y)` from paired samples. Both marginals are jittered with the
    /// same `seed` stream and the joint cloud is formed from the jittered
    /// marginals, so swapping `x` and `y` leaves the estimate unchanged.
    pub fn mutual_information(
        &self,
        x: &SampleCloud,
        y: &SampleCloud,
        seed: u64,
        base: LogBase,
    ) -> Result<MiEstimate> {
        if x.len() != y.len() {
            return Err(Error::invalid(format!(
                "paired samples required: x has {} rows, y has {}",
                x.len(),
                y.len()
            )));
        }
        let jx = jitter(x, self.jitter, seed)?;
        let jy = jitter(y, self.jitter, seed)?;
        let h_x = self.entropy_exact_points(&jx)?;
        let h_y = self.entropy_exact_points(&jy)?;
        let h_xy = self.entropy_exact_points(&jx.join(&jy)?)?;
        Ok(MiEstimate::from_nats(h_x, h_y, h_xy, base, self, x.len()))
    }
}

/// Entropy in nats with the default estimator variant.
pub fn entropy_knn(points: &SampleCloud, k: usize, jitter: f64, seed: u64) -> Result<f64> {
    KnnEstimator::new(k, jitter).entropy(points, seed)
}

pub fn mutual_information(
    x: &SampleCloud,
    y: &SampleCloud,
    k: usize,
    jitter: f64,
    seed: u64,
) -> Result<MiEstimate> {
    KnnEstimator::new(k, jitter).mutual_information(x, y, seed, LogBase::Nats)
}

/// Which model output plays the role of `Y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFeature {
    #[default]
    Softmax,
    SoftmaxPenultimate,
    LogRatio,
}

impl FromStr for OutputFeature {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(OutputFeature::Softmax),
            "softmax-penultimate" | "softmax+penultimate" => Ok(OutputFeature::SoftmaxPenultimate),
            "log-ratio" => Ok(OutputFeature::LogRatio),
            other => Err(format!("unknown output feature `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMiConfig {
    pub noise_copies: usize,
    pub sigma_rel: f64,
    pub estimator: KnnEstimator,
    pub feature: OutputFeature,
}

impl Default for ModelMiConfig {
    fn default() -> Self {
        Self {
            noise_copies: 8,
            sigma_rel: 0.05,
            estimator: KnnEstimator::default(),
            feature: OutputFeature::Softmax,
        }
    }
}

/// Paired `(x, Y(x))` samples over the member rows of `data`, where row `j`
/// (in dataset order) is pushed through perturbed copy `j % noise_copies`.
pub fn model_output_samples(
    model: &MlpModel,
    data: &LabeledDataset,
    member_ids: &std::collections::BTreeSet<u64>,
    cfg: &ModelMiConfig,
    seed: u64,
) -> Result<(SampleCloud, SampleCloud)> {
    if cfg.noise_copies == 0 {
        return Err(Error::invalid("noise_copies must be at least 1"));
    }
    let positions = data.positions_of(member_ids);
    if positions.is_empty() {
        return Err(Error::invalid("no member rows for MI estimation"));
    }
    let copies = (0..cfg.noise_copies)
        .map(|c| model.perturb_weights(cfg.sigma_rel, rng::derive(seed, c as u64)))
        .collect::<Result<Vec<_>>>()?;
    let outputs = positions
        .par_iter()
        .enumerate()
        .map(|(j, &i)| {
            let out = copies[j % copies.len()].forward(data.row(i), None)?;
            // The last probability is 1 minus the others. Keeping it would put
            // the cloud on a hyperplane, which biases every kNN entropy term.
            if cfg.feature == OutputFeature::LogRatio {
                let last = *out.logits.last().unwrap();
                return Ok(out.logits[..out.logits.len() - 1].iter().map(|z| z - last).collect());
            }
            let mut y = out.softmax;
            y.pop();
            if cfg.feature == OutputFeature::SoftmaxPenultimate {
                y.extend(out.penultimate);
            }
            Ok(y)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let inputs: Vec<&[f64]> = positions.iter().map(|&i| data.row(i)).collect();
    Ok((SampleCloud::from_rows(&inputs)?, SampleCloud::from_rows(&outputs)?))
}

/// MI between the inputs of the member rows and the weight-perturbed model
/// outputs on them.
pub fn model_mi(
    model: &MlpModel,
    data: &LabeledDataset,
    member_ids: &std::collections::BTreeSet<u64>,
    cfg: &ModelMiConfig,
    seed: u64,
    base: LogBase,
) -> Result<MiEstimate> {
    let (x, y) = model_output_samples(model, data, member_ids, cfg, seed)?;
    cfg.estimator
        .mutual_information(&x, &y, rng::derive(seed, u64::MAX), base)
}

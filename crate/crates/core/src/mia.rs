//! Shadow-model membership inference.
//!
//! Shadow models are trained on known member sets drawn from an attacker-side
//! pool; their outputs on that pool, labelled in/out, train a logistic
//! attack classifier which is then applied to the target model.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_membership, LabeledDataset, MembershipSplit};
use crate::error::{Error, Result};
use crate::nn::{FeatureMode, MlpModel, ModelRecipe};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub features: Vec<f64>,
    pub member: bool,
    /// True class of the queried row; used by per-class attack models.
    pub class: usize,
}

/// Independent stratified member draws, one per shadow model.
pub fn make_shadow_splits(
    pool: &LabeledDataset,
    num_shadows: usize,
    in_fraction: f64,
    seed: u64,
) -> Result<Vec<MembershipSplit>> {
    if num_shadows == 0 {
        return Err(Error::invalid("need at least one shadow model"));
    }
    if (in_fraction * pool.len() as f64).round() < 1.0 {
        return Err(Error::invalid(format!(
            "pool of {} rows too small for in_fraction {in_fraction}",
            pool.len()
        )));
    }
    (0..num_shadows)
        .map(|s| split_membership(pool, in_fraction, rng::derive(seed, s as u64)))
        .collect()
}

/// Trains one shadow model per split (in parallel; output order follows
/// `splits`).
pub fn train_shadows(
    pool: &LabeledDataset,
    splits: &[MembershipSplit],
    recipe: &ModelRecipe,
    seed: u64,
) -> Result<Vec<MlpModel>> {
    splits
        .par_iter()
        .enumerate()
        .map(|(s, split)| {
            recipe
                .fit(pool, &split.member_ids, rng::derive(seed, s as u64))
                .map(|o| o.model)
        })
        .collect()
}

/// One record per (shadow, pool row), then the majority membership class is
/// subsampled down to the minority count. Kept records stay in generation
/// order.
pub fn build_attack_dataset(
    shadows: &[MlpModel],
    splits: &[MembershipSplit],
    pool: &LabeledDataset,
    mode: FeatureMode,
    seed: u64,
) -> Result<Vec<AttackRecord>> {
    if shadows.len() != splits.len() {
        return Err(Error::invalid(format!(
            "{} shadow models but {} splits",
            shadows.len(),
            splits.len()
        )));
    }
    let mut records = Vec::with_capacity(shadows.len() * pool.len());
    let mut feature_len = None;
    for (shadow, split) in shadows.iter().zip(splits) {
        let len = shadow.feature_len(mode);
        if *feature_len.get_or_insert(len) != len {
            return Err(Error::DimensionMismatch {
                expected: feature_len.unwrap(),
                got: len,
            });
        }
        let rows = (0..pool.len())
            .into_par_iter()
            .map(|i| {
                Ok(AttackRecord {
                    features: shadow.extract_features(pool.row(i), pool.label(i), mode)?,
                    member: split.is_member(pool.id(i)),
                    class: pool.label(i),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.extend(rows);
    }
    Ok(balance(records, seed))
}

/// Subsamples the majority membership class to the minority count.
pub fn balance(records: Vec<AttackRecord>, seed: u64) -> Vec<AttackRecord> {
    let members = records.iter().filter(|r| r.member).count();
    let non_members = records.len() - members;
    if members == non_members || members == 0 || non_members == 0 {
        return records;
    }
    let majority = members > non_members;
    let keep_count = members.min(non_members);
    let mut majority_idx: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.member == majority)
        .map(|(i, _)| i)
        .collect();
    majority_idx.shuffle(&mut rng::seeded(seed));
    let mut keep = vec![false; records.len()];
    for &i in &majority_idx[..keep_count] {
        keep[i] = true;
    }
    records
        .into_iter()
        .enumerate()
        .filter(|(i, r)| r.member != majority || keep[*i])
        .map(|(_, r)| r)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackTrainConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// One logistic model per true class instead of a single global one.
    pub per_class: bool,
}

impl Default for AttackTrainConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iter: 5000,
            tol: 1e-6,
            per_class: false,
        }
    }
}

/// Logistic regression on standardised features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogisticModel {
    pub fn probability(&self, features: &[f64]) -> f64 {
        let z = self.bias
            + features
                .iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| w * (x - m) / s)
                .sum::<f64>();
        sigmoid(z)
    }

    /// Full-batch gradient descent on the mean log-loss plus
    /// `(l2 / 2) ||w||^2`, from zero, with step `1 / L` for the trace bound
    /// `L = (1 + d) / 4 + l2` on the Hessian.
    pub fn fit(xs: &[&[f64]], ys: &[bool], cfg: &AttackTrainConfig) -> Result<Self> {
        let n = xs.len();
        if n == 0 {
            return Err(Error::SingleClass);
        }
        let positives = ys.iter().filter(|&&y| y).count();
        if positives == 0 || positives == n {
            return Err(Error::SingleClass);
        }
        let dim = xs[0].len();
        if xs.iter().any(|x| x.len() != dim) {
            return Err(Error::invalid("attack records have differing feature lengths"));
        }
        let mut mean = vec![0.0; dim];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(*x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut scale = vec![0.0; dim];
        for x in xs {
            for ((s, v), m) in scale.iter_mut().zip(*x).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        scale
            .iter_mut()
            .for_each(|s| *s = if *s > 0.0 { (*s / n as f64).sqrt() } else { 1.0 });
        let z: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
            .collect();

        let lipschitz = 0.25 * (1.0 + dim as f64) + cfg.l2;
        let step = 1.0 / lipschitz;
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let mut grad_norm = f64::INFINITY;
        let mut iterations = 0;
        for it in 0..cfg.max_iter {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (zi, &yi) in z.iter().zip(ys) {
                let p = sigmoid(b + dot(&w, zi));
                let r = p - if yi { 1.0 } else { 0.0 };
                for (g, v) in gw.iter_mut().zip(zi) {
                    *g += r * v;
                }
                gb += r;
            }
            for (g, wv) in gw.iter_mut().zip(&w) {
                *g = *g / n as f64 + cfg.l2 * wv;
            }
            gb /= n as f64;
            grad_norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
            iterations = it;
            if grad_norm < cfg.tol {
                break;
            }
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv -= step * g;
            }
            b -= step * gb;
            iterations = it + 1;
        }
        Ok(Self {
            weights: w,
            bias: b,
            mean,
            scale,
            iterations,
            grad_norm,
        })
    }
}

/// The trained attacker: one global model or one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackModel {
    pub num_shadows: usize,
    pub per_class: bool,
    /// `models[0]` is the global model; per-class models follow at `1 + class`.
    pub models: Vec<LogisticModel>,
}

impl AttackModel {
    pub fn probability(&self, features: &[f64], class: usize) -> f64 {
        let model = if self.per_class {
            self.models.get(1 + class).unwrap_or(&self.models[0])
        } else {
            &self.models[0]
        };
        model.probability(features)
    }

    /// Membership prediction; a probability of exactly 0.5 counts as member.
    pub fn predict(&self, features: &[f64], class: usize) -> bool {
        self.probability(features, class) >= 0.5
    }
}

pub fn train_attack(
    records: &[AttackRecord],
    num_shadows: usize,
    cfg: &AttackTrainConfig,
) -> Result<AttackModel> {
    let xs: Vec<&[f64]> = records.iter().map(|r| r.features.as_slice()).collect();
    let ys: Vec<bool> = records.iter().map(|r| r.member).collect();
    let global = LogisticModel::fit(&xs, &ys, cfg)?;
    let mut models = vec![global];
    if cfg.per_class {
        let num_classes = records.iter().map(|r| r.class + 1).max().unwrap_or(0);
        for c in 0..num_classes {
            let (cx, cy): (Vec<&[f64]>, Vec<bool>) = records
                .iter()
                .filter(|r| r.class == c)
                .map(|r| (r.features.as_slice(), r.member))
                .unzip();
            // Classes lacking one membership label fall back to the global model.
            match LogisticModel::fit(&cx, &cy, cfg) {
                Ok(m) => models.push(m),
                Err(Error::SingleClass) => models.push(models[0].clone()),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(AttackModel {
        num_shadows,
        per_class: cfg.per_class,
        models,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaProbability {
    pub alpha: u64,
    /// Bootstrap estimate of P(xi > alpha).
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Number of shadow models behind the attack.
    pub variant: usize,
    pub mode: FeatureMode,
    /// Accuracy of the membership predictions over the evaluation pool.
    pub success_prob: f64,
    /// Number of wrong membership predictions.
    pub errors_xi: u64,
    pub num_eval: usize,
    pub p_hat_alpha: Vec<AlphaProbability>,
}

/// Scores membership predictions against the ground truth. `P(xi > alpha)`
/// comes from `trials` bootstrap resamples of the evaluation rows.
pub fn score_predictions(
    predictions: &[bool],
    truth: &[bool],
    alphas: &[u64],
    trials: usize,
    seed: u64,
) -> Result<(f64, u64, Vec<AlphaProbability>)> {
    if predictions.is_empty() {
        return Err(Error::invalid("empty evaluation pool"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predictions.len(),
        });
    }
    let wrong: Vec<bool> = predictions.iter().zip(truth).map(|(p, t)| p != t).collect();
    let n = wrong.len();
    let errors = wrong.iter().filter(|&&w| w).count() as u64;
    let success = 1.0 - errors as f64 / n as f64;

    let mut rng = rng::seeded(seed);
    let mut boot = Vec::with_capacity(trials);
    for _ in 0..trials {
        let xi = (0..n).filter(|_| wrong[rng.random_range(0..n)]).count() as u64;
        boot.push(xi);
    }
    let p_hat = alphas
        .iter()
        .map(|&alpha| AlphaProbability {
            alpha,
            probability: if trials == 0 {
                f64::NAN
            } else {
                boot.iter().filter(|&&xi| xi > alpha).count() as f64 / trials as f64
            },
        })
        .collect();
    Ok((success, errors, p_hat))
}

/// Attacks `target` on every row of `pool`, ground truth from `target_split`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_attack(
    attack: &AttackModel,
    target: &MlpModel,
    pool: &LabeledDataset,
    target_split: &MembershipSplit,
    mode: FeatureMode,
    alphas: &[u64],
    trials: usize,
    seed: u64,
) -> Result<AttackReport> {
    if pool.is_empty() {
        return Err(Error::invalid("empty evaluation pool"));
    }
    let predictions = (0..pool.len())
        .into_par_iter()
        .map(|i| {
            let f = target.extract_features(pool.row(i), pool.label(i), mode)?;
            Ok(attack.predict(&f, pool.label(i)))
        })
        .collect::<Result<Vec<bool>>>()?;
    let truth: Vec<bool> = pool.ids().iter().map(|&id| target_split.is_member(id)).collect();
    let (success_prob, errors_xi, p_hat_alpha) =
        score_predictions(&predictions, &truth, alphas, trials, seed)?;
    Ok(AttackReport {
        variant: attack.num_shadows,
        mode,
        success_prob,
        errors_xi,
        num_eval: pool.len(),
        p_hat_alpha,
    })
}

/// Attack-side settings shared by every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub shadow_counts: Vec<usize>,
    pub in_fraction: f64,
    pub mode: FeatureMode,
    #[serde(default)]
    pub train: AttackTrainConfig,
    pub alphas: Vec<u64>,
    pub trials: usize,
    pub seed: u64,
}

/// Runs one attack per entry of `cfg.shadow_counts` against `target`.
/// Shadows are trained once for the largest count; smaller variants use a
/// prefix of them.
pub fn run_attack_variants(
    target: &MlpModel,
    target_pool: &LabeledDataset,
    target_split: &MembershipSplit,
    shadow_pool: &LabeledDataset,
    recipe: &ModelRecipe,
    cfg: &AttackConfig,
) -> Result<Vec<AttackReport>> {
    let max_shadows = cfg.shadow_counts.iter().copied().max().unwrap_or(0);
    if max_shadows == 0 {
        return Err(Error::invalid("shadow_counts must contain a positive count"));
    }
    let splits = make_shadow_splits(shadow_pool, max_shadows, cfg.in_fraction, rng::derive(cfg.seed, 0))?;
    let shadows = train_shadows(shadow_pool, &splits, recipe, rng::derive(cfg.seed, 1))?;
    cfg.shadow_counts
        .iter()
        .map(|&count| {
            if count == 0 {
                return Err(Error::invalid("shadow count must be at least 1"));
            }
            let records = build_attack_dataset(
                &shadows[..count],
                &splits[..count],
                shadow_pool,
                cfg.mode,
                rng::derive(cfg.seed, 2),
            )?;
            let attack = train_attack(&records, count, &cfg.train)?;
            evaluate_attack(
                &attack,
                target,
                target_pool,
                target_split,
                cfg.mode,
                &cfg.alphas,
                cfg.trials,
                rng::derive(cfg.seed, 3),
            )
        })
        .collect()
}

/// CSV with columns `variant,mode,success_prob,p_xi_gt_<alpha>...`.
pub fn write_attack_reports(path: impl AsRef<Path>, reports: &[AttackReport]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let alphas: Vec<u64> = reports
        .first()
        .map(|r| r.p_hat_alpha.iter().map(|a| a.alpha).collect())
        .unwrap_or_default();
    let mut header = vec!["variant".to_string(), "mode".into(), "success_prob".into()];
    header.extend(alphas.iter().map(|a| format!("p_xi_gt_{a}")));
    writeln!(out, "{}", header.join(",")).unwrap();
    for r in reports {
        let mut row = vec![r.variant.to_string(), r.mode.to_string(), format!("{:?}", r.success_prob)];
        row.extend(r.p_hat_alpha.iter().map(|a| format!("{:?}", a.probability)));
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

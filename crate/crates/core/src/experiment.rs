//! MI-vs-attack correlation sweeps and bound validation grids.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bound::{simulate_channel, sweep_thresholds, ChannelSimConfig, ChannelSimResult, ThresholdRow};
use crate::data::{load_csv, split_membership, synth_blobs, LabeledDataset, MembershipSplit};
use crate::error::{Error, Result};
use crate::infotheory::{model_mi, EntropyVariant, KnnEstimator, MiEstimate, ModelMiConfig, OutputFeature};
use crate::mia::{run_attack_variants, AttackConfig, AttackReport, AttackTrainConfig};
use crate::nn::{Activation, FeatureMode, MlpModel, ModelRecipe};
use crate::rng;
use crate::units::LogBase;

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::invalid("pearson needs at least two pairs"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Labelled CSV to use instead of synthetic blobs.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

fn default_label_column() -> String {
    "label".into()
}

impl DataSection {
    pub fn load(&self) -> Result<LabeledDataset> {
        match &self.csv {
            Some(path) => load_csv(path, &self.label_column),
            None => synth_blobs(self.num_classes, self.per_class, self.dim, self.spread, self.seed),
        }
    }
}

/// Settings shared by every model in the family; the knobs fill in the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub activation: Activation,
    pub lr: f64,
    pub batch: usize,
    /// Fraction of the target pool the target model trains on.
    pub member_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiSection {
    pub k: usize,
    pub jitter: f64,
    pub variant: EntropyVariant,
    pub noise_copies: usize,
    pub sigma_rel: f64,
    pub feature: OutputFeature,
    pub log_base: LogBase,
}

impl MiSection {
    pub fn model_mi_config(&self) -> ModelMiConfig {
        ModelMiConfig {
            noise_copies: self.noise_copies,
            sigma_rel: self.sigma_rel,
            estimator: KnnEstimator::new(self.k, self.jitter).with_variant(self.variant),
            feature: self.feature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub shadow_counts: Vec<usize>,
    pub in_fraction: f64,
    pub mode: FeatureMode,
    pub train: AttackTrainConfig,
    pub alphas: Vec<u64>,
    pub trials: usize,
}

/// One family member's overfit knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyKnobs {
    pub epochs: usize,
    pub hidden_width: usize,
    pub l2: f64,
}

impl std::fmt::Display for FamilyKnobs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epochs={} hidden_width={} l2={}", self.epochs, self.hidden_width, self.l2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Ordered from least to most overfit.
    pub family: Vec<FamilyKnobs>,
    pub seed: u64,
}

/// The whole correlation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFamilyConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub mi: MiSection,
    pub attack: AttackSection,
    pub experiment: ExperimentSection,
}

impl Default for ModelFamilyConfig {
    fn default() -> Self {
        Self {
            data: DataSection {
                csv: None,
                label_column: default_label_column(),
                num_classes: 4,
                per_class: 150,
                dim: 4,
                spread: 1.0,
                seed: 7,
            },
            model: ModelSection {
                activation: Activation::Relu,
                lr: 0.1,
                batch: 16,
                member_fraction: 0.5,
            },
            mi: MiSection {
                k: 3,
                jitter: 0.5,
                variant: EntropyVariant::KozachenkoLeonenko,
                noise_copies: 8,
                sigma_rel: 0.05,
                feature: OutputFeature::Softmax,
                log_base: LogBase::Nats,
            },
            attack: AttackSection {
                shadow_counts: vec![3, 5, 7],
                in_fraction: 0.5,
                mode: FeatureMode::Blackbox,
                train: AttackTrainConfig::default(),
                alphas: vec![10, 20, 40, 60],
                trials: 1000,
            },
            experiment: ExperimentSection {
                // Overfitting grows down the list: weaker weight decay, then longer training.
                family: vec![
                    FamilyKnobs { epochs: 100, hidden_width: 256, l2: 0.1 },
                    FamilyKnobs { epochs: 100, hidden_width: 256, l2: 0.03 },
                    FamilyKnobs { epochs: 100, hidden_width: 256, l2: 0.01 },
                    FamilyKnobs { epochs: 300, hidden_width: 256, l2: 0.003 },
                ],
                seed: 2024,
            },
        }
    }
}

impl ModelFamilyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let family = &self.experiment.family;
        if family.len() < 2 {
            return Err(Error::invalid("the model family needs at least 2 members"));
        }
        for (i, a) in family.iter().enumerate() {
            if family[..i].contains(a) {
                return Err(Error::invalid(format!("duplicate family knobs ({a})")));
            }
            if a.hidden_width == 0 {
                return Err(Error::invalid("hidden_width must be at least 1"));
            }
        }
        if self.attack.shadow_counts.is_empty() || self.attack.shadow_counts.contains(&0) {
            return Err(Error::invalid("shadow_counts must be non-empty and positive"));
        }
        Ok(())
    }

    pub fn recipe(&self, knobs: &FamilyKnobs) -> ModelRecipe {
        ModelRecipe {
            hidden: vec![knobs.hidden_width],
            activation: self.model.activation,
            epochs: knobs.epochs,
            lr: self.model.lr,
            l2: knobs.l2,
            batch: self.model.batch,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            shadow_counts: self.attack.shadow_counts.clone(),
            in_fraction: self.attack.in_fraction,
            mode: self.attack.mode,
            train: self.attack.train,
            alphas: self.attack.alphas.clone(),
            trials: self.attack.trials,
            seed: rng::derive(self.experiment.seed, 4),
        }
    }
}

/// The data layout every family member shares: a target pool (with the
/// target's membership split) and a disjoint shadow pool for the attacker.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub target_pool: LabeledDataset,
    pub target_split: MembershipSplit,
    pub shadow_pool: LabeledDataset,
}

impl ExperimentData {
    pub fn prepare(cfg: &ModelFamilyConfig) -> Result<Self> {
        let data = cfg.data.load()?;
        // A stratified half of the rows goes to the target side.
        let halves = split_membership(&data, 0.5, rng::derive(cfg.experiment.seed, 1))?;
        let target_pool = data.subset(&halves.member_ids)?;
        let shadow_pool = data.subset(&halves.non_member_ids())?;
        let target_split = split_membership(
            &target_pool,
            cfg.model.member_fraction,
            rng::derive(cfg.experiment.seed, 2),
        )?;
        Ok(Self {
            target_pool,
            target_split,
            shadow_pool,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRow {
    pub knobs: FamilyKnobs,
    pub mi: MiEstimate,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// One report per shadow count, in config order.
    pub attacks: Vec<AttackReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantCorrelation {
    pub variant: usize,
    pub pearson_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rows: Vec<FamilyRow>,
    pub per_variant: Vec<VariantCorrelation>,
    /// Over every (model, variant) pair.
    pub pooled_pearson_r: f64,
}

impl CorrelationResult {
    pub fn mi_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mi.value).collect()
    }

    /// Mean success over the attack variants, per family member.
    pub fn mean_success(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.attacks.iter().map(|a| a.success_prob).sum::<f64>() / r.attacks.len() as f64)
            .collect()
    }
}

/// Trains the target for one family member, estimates its MI and attacks it.
/// Every member uses the same seeds, so the knobs are the only difference.
pub fn run_family_member(
    cfg: &ModelFamilyConfig,
    data: &ExperimentData,
    knobs: &FamilyKnobs,
) -> Result<FamilyRow> {
    let seed = cfg.experiment.seed;
    let recipe = cfg.recipe(knobs);
    let members = &data.target_split.member_ids;
    let target = recipe.fit(&data.target_pool, members, rng::derive(seed, 3))?.model;
    let mi = model_mi(
        &target,
        &data.target_pool,
        members,
        &cfg.mi.model_mi_config(),
        rng::derive(seed, 5),
        cfg.mi.log_base,
    )?;
    let (train_accuracy, test_accuracy) = accuracies(&target, &data.target_pool, members)?;
    let attacks = run_attack_variants(
        &target,
        &data.target_pool,
        &data.target_split,
        &data.shadow_pool,
        &recipe,
        &cfg.attack_config(),
    )?;
    log::info!("{knobs}: mi={:.4} train_acc={train_accuracy:.3} test_acc={test_accuracy:.3}", mi.value);
    Ok(FamilyRow {
        knobs: *knobs,
        mi,
        train_accuracy,
        test_accuracy,
        attacks,
    })
}

fn accuracies(model: &MlpModel, pool: &LabeledDataset, members: &BTreeSet<u64>) -> Result<(f64, f64)> {
    let inside = pool.positions_of(members);
    let outside: Vec<usize> = (0..pool.len()).filter(|&i| !members.contains(&pool.id(i))).collect();
    Ok((model.accuracy(pool, &inside)?, model.accuracy(pool, &outside)?))
}

/// Runs the whole family (members in parallel, rows in config order) and
/// correlates MI with attack success.
pub fn run_correlation(cfg: &ModelFamilyConfig) -> Result<CorrelationResult> {
    cfg.validate()?;
    let data = ExperimentData::prepare(cfg)?;
    let rows = cfg
        .experiment
        .family
        .par_iter()
        .map(|knobs| {
            run_family_member(cfg, &data, knobs).map_err(|e| Error::FamilyMember {
                knobs: knobs.to_string(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    correlate_rows(rows)
}

pub fn correlate_rows(rows: Vec<FamilyRow>) -> Result<CorrelationResult> {
    let mi: Vec<f64> = rows.iter().map(|r| r.mi.value).collect();
    let variants: Vec<usize> = rows
        .first()
        .map(|r| r.attacks.iter().map(|a| a.variant).collect())
        .unwrap_or_default();
    let mut per_variant = Vec::with_capacity(variants.len());
    for (v, &variant) in variants.iter().enumerate() {
        let success: Vec<f64> = rows.iter().map(|r| r.attacks[v].success_prob).collect();
        per_variant.push(VariantCorrelation {
            variant,
            pearson_r: pearson(&mi, &success).unwrap_or(f64::NAN),
        });
    }
    let (mut px, mut py) = (Vec::new(), Vec::new());
    for r in &rows {
        for a in &r.attacks {
            px.push(r.mi.value);
            py.push(a.success_prob);
        }
    }
    let pooled_pearson_r = pearson(&px, &py)?;
    Ok(CorrelationResult {
        rows,
        per_variant,
        pooled_pearson_r,
    })
}

/// One row per family member:
/// `epochs,hidden_width,l2,mi,log_base,train_accuracy,test_accuracy,success_<v>...`.
pub fn correlation_csv(result: &CorrelationResult) -> String {
    let mut s = String::from("epochs,hidden_width,l2,mi,log_base,train_accuracy,test_accuracy");
    if let Some(first) = result.rows.first() {
        for a in &first.attacks {
            write!(s, ",success_{}", a.variant).unwrap();
        }
    }
    s.push('\n');
    for r in &result.rows {
        write!(
            s,
            "{},{},{:?},{:?},{},{:?},{:?}",
            r.knobs.epochs,
            r.knobs.hidden_width,
            r.knobs.l2,
            r.mi.value,
            r.mi.log_base,
            r.train_accuracy,
            r.test_accuracy
        )
        .unwrap();
        for a in &r.attacks {
            write!(s, ",{:?}", a.success_prob).unwrap();
        }
        s.push('\n');
    }
    s
}

/// `variant,pearson_r`, with a final `pooled` row.
pub fn pearson_csv(result: &CorrelationResult) -> String {
    let mut s = String::from("variant,pearson_r\n");
    for v in &result.per_variant {
        writeln!(s, "{},{:?}", v.variant, v.pearson_r).unwrap();
    }
    writeln!(s, "pooled,{:?}", result.pooled_pearson_r).unwrap();
    s
}

pub fn correlation_summary(result: &CorrelationResult) -> String {
    let mut s = String::new();
    let unit = result.rows.first().map(|r| r.mi.log_base).unwrap_or_default();
    writeln!(s, "model family: {} members", result.rows.len()).unwrap();
    for r in &result.rows {
        write!(
            s,
            "  {}: MI = {:.4} {unit}, train acc = {:.3}, test acc = {:.3}, success =",
            r.knobs, r.mi.value, r.train_accuracy, r.test_accuracy
        )
        .unwrap();
        for a in &r.attacks {
            write!(s, " {:.3} ({} shadows)", a.success_prob, a.variant).unwrap();
        }
        s.push('\n');
    }
    for v in &result.per_variant {
        writeln!(s, "pearson r, {} shadows: {:.4}", v.variant, v.pearson_r).unwrap();
    }
    writeln!(s, "pearson r, pooled: {:.4}", result.pooled_pearson_r).unwrap();
    s
}

/// Writes `correlation.csv`, `pearson.csv`, `attacks.csv` and `summary.txt`
/// into `dir`.
pub fn write_correlation_outputs(dir: impl AsRef<Path>, result: &CorrelationResult) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("correlation.csv", correlation_csv(result))?;
    write("pearson.csv", pearson_csv(result))?;
    let reports: Vec<AttackReport> = result.rows.iter().flat_map(|r| r.attacks.clone()).collect();
    crate::mia::write_attack_reports(dir.join("attacks.csv"), &reports)?;
    write("summary.txt", correlation_summary(result))
}

/// Grid cells for the channel check, in row-major order over
/// `flip_probs x d_sizes x alphas`.
pub fn theorem_grid(
    flip_probs: &[f64],
    d_sizes: &[usize],
    alphas: &[u64],
    trials: u64,
    seed: u64,
) -> Vec<ChannelSimConfig> {
    let mut grid = Vec::new();
    for &flip_prob in flip_probs {
        for &d_size in d_sizes {
            for &alpha in alphas {
                grid.push(ChannelSimConfig {
                    d_size,
                    flip_prob,
                    trials,
                    alpha,
                    seed: rng::derive(seed, grid.len() as u64),
                });
            }
        }
    }
    grid
}

pub fn default_theorem_grid(trials: u64, seed: u64) -> Vec<ChannelSimConfig> {
    theorem_grid(&[0.1, 0.2, 0.3, 0.4], &[8, 12, 16], &[0, 1, 2], trials, seed)
}

/// Simulates every cell. Violations are reported through
/// [`ChannelSimResult::holds`], never as errors.
pub fn run_theorem_validation(grid: &[ChannelSimConfig]) -> Result<Vec<ChannelSimResult>> {
    grid.iter().map(simulate_channel).collect()
}

pub fn validation_csv(rows: &[ChannelSimResult]) -> String {
    let mut s = String::from(
        "d_size,flip_prob,alpha,trials,mutual_information_bits,lower_bound,positive,empirical,std_error,holds\n",
    );
    for r in rows {
        writeln!(
            s,
            "{},{:?},{},{},{:?},{:?},{},{:?},{:?},{}",
            r.config.d_size,
            r.config.flip_prob,
            r.config.alpha,
            r.config.trials,
            r.mutual_information,
            r.bound.lower_bound,
            r.bound.positive,
            r.empirical,
            r.std_error,
            r.holds
        )
        .unwrap();
    }
    s
}

/// Threshold curves as `alpha_over_d,alpha,c_star,z_star`.
pub fn thresholds_csv(rows: &[ThresholdRow]) -> String {
    let mut s = String::from("alpha_over_d,alpha,c_star,z_star\n");
    for r in rows {
        writeln!(s, "{:?},{},{:?},{:?}", r.alpha_over_d, r.alpha, r.c_star, r.z_star).unwrap();
    }
    s
}

pub fn threshold_curve(d_size: u64, points: usize, base: LogBase) -> Result<String> {
    Ok(thresholds_csv(&sweep_thresholds(d_size, points, base)?))
}

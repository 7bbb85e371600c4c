use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use mia_fano_core::bound::{fano_lower_bound, BoundQuery};
use mia_fano_core::data::read_numeric_csv;
use mia_fano_core::experiment::{
    self, run_correlation, run_family_member, run_theorem_validation, theorem_grid, ExperimentData,
    ModelFamilyConfig,
};
use mia_fano_core::infotheory::{EntropyVariant, KnnEstimator, DEFAULT_JITTER, DEFAULT_K};
use mia_fano_core::knn::SampleCloud;
use mia_fano_core::mia::write_attack_reports;
use mia_fano_core::{rng, LogBase};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] mia_fano_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{violations} of {cells} grid cells violate the bound")]
    Violations { violations: usize, cells: usize },
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mia-fano", version, about = "Membership inference susceptibility: Fano bounds, kNN mutual information and shadow-model attacks")]
struct Cli {
    /// Experiment config (JSON). A manifest from an earlier run also works.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for CSVs and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the config's experiment seed (or the command's own seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Units for reported information quantities.
    #[arg(long, global = true)]
    base: Option<LogBase>,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Label column for CSV datasets.
    #[arg(long, global = true)]
    label_column: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// kNN entropy of the rows of a numeric CSV.
    Entropy {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated columns (default: all).
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<String>>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_JITTER)]
        jitter: f64,
        #[arg(long, default_value = "kozachenko-leonenko")]
        variant: EntropyVariant,
    },
    /// kNN mutual information between two column groups of a numeric CSV.
    Mi {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_JITTER)]
        jitter: f64,
        #[arg(long, default_value = "kozachenko-leonenko")]
        variant: EntropyVariant,
    },
    /// Lower bound on P(more than alpha membership errors).
    Bound {
        /// Entropy of the membership vector, in --base units.
        #[arg(long)]
        h_x: f64,
        /// Mutual information between membership and attack output.
        #[arg(long)]
        mi: f64,
        #[arg(long)]
        d_size: u64,
        #[arg(long, default_value_t = 0)]
        alpha: u64,
    },
    /// Positivity thresholds c* and z* against alpha / |D|.
    SweepThresholds {
        #[arg(long)]
        d_size: u64,
        /// Grid points on alpha / |D| in [0, 0.5].
        #[arg(long, default_value_t = 101)]
        points: usize,
    },
    /// Trains the target model of one family member.
    Train {
        /// Family member index (default: the last, most overfit one).
        #[arg(long)]
        member: Option<usize>,
    },
    /// Runs the shadow-model attacks against one family member.
    Attack {
        #[arg(long)]
        member: Option<usize>,
    },
    /// Correlates model MI with attack success over the model family.
    Correlate,
    /// Monte-Carlo check of the bound on binary symmetric channels.
    ValidateTheorem {
        #[arg(long, default_value_t = 200_000)]
        trials: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4")]
        flip_probs: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "8,12,16")]
        d_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        alphas: Vec<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIA_FANO_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Violations { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let base = cli.base.unwrap_or_default();
    match &cli.command {
        Command::Entropy {
            input,
            columns,
            k,
            jitter,
            variant,
        } => {
            let cloud = load_cloud(input, columns.as_deref())?;
            let est = KnnEstimator::new(*k, *jitter).with_variant(*variant);
            let h = est.entropy(&cloud, cli.seed.unwrap_or(0))?;
            println!("entropy: {} nats ({} bits)", sig6(h), sig6(LogBase::Bits.from_nats(h)));
            write_manifest(cli, json!({ "entropy_nats": h, "n": cloud.len(), "dim": cloud.dim() }), None)
        }
        Command::Mi {
            input,
            x,
            y,
            k,
            jitter,
            variant,
        } => {
            let xs = load_cloud(input, Some(x))?;
            let ys = load_cloud(input, Some(y))?;
            let est = KnnEstimator::new(*k, *jitter).with_variant(*variant);
            let mi = est.mutual_information(&xs, &ys, cli.seed.unwrap_or(0), base)?;
            println!(
                "mi: {} {base} (H(X) = {}, H(Y) = {}, H(X,Y) = {}, n = {})",
                sig6(mi.value),
                sig6(mi.h_x),
                sig6(mi.h_y),
                sig6(mi.h_xy),
                mi.n
            );
            write_manifest(cli, json!({ "mi": mi }), None)
        }
        Command::Bound {
            h_x,
            mi,
            d_size,
            alpha,
        } => {
            let r = fano_lower_bound(&BoundQuery {
                h_x: *h_x,
                mi: *mi,
                d_size: *d_size,
                alpha: *alpha,
                log_base: base,
            })?;
            println!("lower_bound = {}", sig6(r.lower_bound));
            println!("numerator = {}", sig6(r.numerator));
            println!("denominator = {}", sig6(r.denominator));
            println!("log_v_alpha = {} {base}", sig6(r.log_v_alpha));
            println!("positive = {}", r.positive);
            write_manifest(cli, serde_json::to_value(r).map_err(mia_fano_core::Error::from)?, None)
        }
        Command::SweepThresholds { d_size, points } => {
            let csv = experiment::threshold_curve(*d_size, *points, base)?;
            let path = write_out(cli, "thresholds.csv", &csv)?;
            println!("wrote {}", path.display());
            write_manifest(cli, json!({ "csv": path }), None)
        }
        Command::Train { member } => {
            let cfg = load_config(cli)?;
            let knobs = pick_member(&cfg, *member)?;
            let data = ExperimentData::prepare(&cfg)?;
            let target = cfg
                .recipe(&knobs)
                .fit(&data.target_pool, &data.target_split.member_ids, rng::derive(cfg.experiment.seed, 3))?;
            std::fs::create_dir_all(&cli.out).map_err(|e| mia_fano_core::Error::io(&cli.out, e))?;
            let model_path = cli.out.join("model.json");
            target.model.save(&model_path)?;
            let mut members = String::from("id,member\n");
            for &id in data.target_pool.ids() {
                members.push_str(&format!("{id},{}\n", data.target_split.is_member(id) as u8));
            }
            write_out(cli, "membership.csv", &members)?;
            let mut trace = String::from("epoch,loss\n");
            for (e, l) in target.loss_trace.iter().enumerate() {
                trace.push_str(&format!("{},{l:?}\n", e + 1));
            }
            write_out(cli, "loss.csv", &trace)?;
            let inside = data.target_pool.positions_of(&data.target_split.member_ids);
            let outside: Vec<usize> = (0..data.target_pool.len()).filter(|i| !inside.contains(i)).collect();
            let train_acc = target.model.accuracy(&data.target_pool, &inside)?;
            let test_acc = target.model.accuracy(&data.target_pool, &outside)?;
            println!("{knobs}: train accuracy {}, test accuracy {}", sig6(train_acc), sig6(test_acc));
            println!("wrote {}", model_path.display());
            write_manifest(
                cli,
                json!({ "knobs": knobs, "train_accuracy": train_acc, "test_accuracy": test_acc }),
                Some(&cfg),
            )
        }
        Command::Attack { member } => {
            let cfg = load_config(cli)?;
            let knobs = pick_member(&cfg, *member)?;
            let data = ExperimentData::prepare(&cfg)?;
            let row = run_family_member(&cfg, &data, &knobs)?;
            for a in &row.attacks {
                println!("{} shadows: success {}", a.variant, sig6(a.success_prob));
            }
            std::fs::create_dir_all(&cli.out).map_err(|e| mia_fano_core::Error::io(&cli.out, e))?;
            let path = cli.out.join("attacks.csv");
            write_attack_reports(&path, &row.attacks)?;
            println!("wrote {}", path.display());
            write_manifest(cli, json!({ "knobs": knobs, "mi": row.mi }), Some(&cfg))
        }
        Command::Correlate => {
            let cfg = load_config(cli)?;
            let result = run_correlation(&cfg)?;
            experiment::write_correlation_outputs(&cli.out, &result)?;
            print!("{}", experiment::correlation_summary(&result));
            println!("wrote {}", cli.out.display());
            write_manifest(cli, json!({ "pooled_pearson_r": result.pooled_pearson_r }), Some(&cfg))
        }
        Command::ValidateTheorem {
            trials,
            flip_probs,
            d_sizes,
            alphas,
        } => {
            let grid = theorem_grid(flip_probs, d_sizes, alphas, *trials, cli.seed.unwrap_or(0));
            let rows = run_theorem_validation(&grid)?;
            let path = write_out(cli, "validation.csv", &experiment::validation_csv(&rows))?;
            let violations = rows.iter().filter(|r| !r.holds).count();
            let positive = rows.iter().filter(|r| r.bound.positive).count();
            println!(
                "{} cells, {positive} with a positive bound, {violations} violations",
                rows.len()
            );
            println!("wrote {}", path.display());
            write_manifest(cli, json!({ "cells": rows.len(), "violations": violations }), None)?;
            if violations > 0 {
                return Err(CliError::Violations {
                    violations,
                    cells: rows.len(),
                });
            }
            Ok(())
        }
    }
}

fn load_cloud(path: &Path, columns: Option<&[String]>) -> CliResult<SampleCloud> {
    let (rows, _) = read_numeric_csv(path, columns)?;
    if rows.is_empty() {
        return Err(CliError::Usage(format!("{} has no data rows", path.display())));
    }
    Ok(SampleCloud::from_rows(&rows)?)
}

/// Config from `--config` (or the built-in default) with flag overrides.
fn load_config(cli: &Cli) -> CliResult<ModelFamilyConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| mia_fano_core::Error::io(path, e))?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(mia_fano_core::Error::from)?;
            // A manifest carries the resolved config under "config".
            let inner = match value.get("config") {
                Some(c) if value.get("command").is_some() => c.clone(),
                _ => value,
            };
            ModelFamilyConfig::from_json(&inner.to_string())?
        }
        None => ModelFamilyConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(base) = cli.base {
        cfg.mi.log_base = base;
    }
    if let Some(col) = &cli.label_column {
        cfg.data.label_column = col.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pick_member(cfg: &ModelFamilyConfig, member: Option<usize>) -> CliResult<experiment::FamilyKnobs> {
    let family = &cfg.experiment.family;
    let i = member.unwrap_or(family.len() - 1);
    family.get(i).copied().ok_or_else(|| {
        CliError::Usage(format!("--member {i} out of range: the family has {} members", family.len()))
    })
}

fn write_out(cli: &Cli, name: &str, text: &str) -> CliResult<PathBuf> {
    std::fs::create_dir_all(&cli.out).map_err(|e| mia_fano_core::Error::io(&cli.out, e))?;
    let path = cli.out.join(name);
    std::fs::write(&path, text).map_err(|e| mia_fano_core::Error::io(&path, e))?;
    Ok(path)
}

/// `manifest.json`: the command line, resolved settings and a result summary.
fn write_manifest(cli: &Cli, result: serde_json::Value, cfg: Option<&ModelFamilyConfig>) -> CliResult<()> {
    let manifest = json!({
        "command": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cli.seed,
        "base": cli.base.unwrap_or_default(),
        "label_column": cli.label_column,
        "config": cfg,
        "result": result,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(mia_fano_core::Error::from)?;
    write_out(cli, "manifest.json", &text)?;
    Ok(())
}

/// Six significant digits, `%g` style.
fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..6).contains(&exp) {
        let s = format!("{x:.5e}");
        let (mantissa, e) = s.split_once('e').unwrap();
        return format!("{}e{e}", trim_zeros(mantissa));
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.749), "0.749");
        assert_eq!(sig6(1.0 - 0.25 - 0.001), "0.749");
        assert_eq!(sig6(1.4189385332), "1.41894");
        assert_eq!(sig6(-2.5), "-2.5");
        assert_eq!(sig6(123456789.0), "1.23457e8");
        assert_eq!(sig6(1.5e-7), "1.5e-7");
        assert_eq!(sig6(0.0), "0");
    }
}

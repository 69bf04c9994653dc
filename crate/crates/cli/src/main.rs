use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cmvae_core::eval::metrics::fmt;
use cmvae_core::eval::sandwich::{oracle_check, SandwichConfig};
use cmvae_core::eval::{evaluate, Metrics};
use cmvae_core::experiments::{
    objective_for, sweep_data_fraction, sweep_gamma, write_csv, FRACTION_CSV_HEADER, GAMMA_CSV_HEADER,
};
use cmvae_core::objective::Variant;
use cmvae_core::pipeline::{run_pipeline, PropagationConfig};
use cmvae_core::train::{run, Experiment, RunConfig, TrainState, Trainer};
use cmvae_core::Error;

/// Contrastive training of multimodal VAEs on synthetic data.
#[derive(Parser)]
#[command(name = "cmvae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; logs, metrics and checkpoints go to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint up to the configured step count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out data of a config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Metrics CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per contrastive weight γ and seed.
    SweepGamma {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', default_value = "1,1.1,2,8,64")]
        gammas: Vec<f64>,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Train and evaluate every variant at every data percentage and seed.
    SweepData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', default_value = "10,20,50,100")]
        percents: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "baseline,cI,cC")]
        variants: Vec<Variant>,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Pretrain on related data, propagate relatedness to the mixed rest and
    /// continue training.
    Propagate {
        #[command(flatten)]
        config: ConfigArg,
        /// Pipeline settings as JSON; flags below override it.
        #[arg(long)]
        pipeline: Option<PathBuf>,
        #[arg(long)]
        pretrain_percent: Option<f64>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Also continue training on the known pairs alone.
        #[arg(long)]
        control: bool,
        /// Directory for report.json and metrics.csv.
        #[arg(long, default_value = "propagate")]
        out: PathBuf,
    },
    /// Check ELBO ≤ IWAE ≤ log p ≤ CUBO and related properties on the
    /// linear-Gaussian testbed.
    OracleCheck {
        /// Testbed settings as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (JSON); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Seeds for both data and training; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad or unreadable configuration; exits with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(e: impl std::fmt::Display) -> anyhow::Error {
    ConfigError(e.to_string()).into()
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(p) => RunConfig::load(p).map_err(|e| config_error(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    cfg.apply_env().map_err(config_error)?;
    Ok(cfg)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn seeds(sweep: &SweepArgs, cfg: &RunConfig) -> Vec<u64> {
    if sweep.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        sweep.seeds.clone()
    }
}

const PHASE_CSV_HEADER: &str = "phase,metric,value";

fn phase_rows(phase: &str, m: &Metrics) -> Vec<String> {
    m.named()
        .into_iter()
        .map(|(name, v)| format!("{phase},{name},{}", v.map(fmt).unwrap_or_default()))
        .collect()
}

fn train_cmd(config: &ConfigArg, out: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if out.is_some() {
        cfg.output_dir = out;
    }
    let dir = cfg.output_dir.get_or_insert_with(|| PathBuf::from("runs").join(&cfg.run_id)).clone();
    if resume.is_none() && dir.join("metrics.csv").exists() {
        return Err(config_error(format!("{} already holds a run; pass --resume to continue it", dir.display())));
    }
    let exp = Experiment::build(&cfg.data)?;
    let trainer = match resume {
        Some(p) => {
            let state = TrainState::load(&p).with_context(|| format!("loading {}", p.display()))?;
            if state.model.config() != &cfg.model {
                return Err(config_error("checkpoint model does not match the config"));
            }
            Trainer::new(cfg.clone(), state, exp.train.clone())?
        }
        None => Trainer::fresh(cfg.clone(), exp.train.clone())?,
    };
    let outcome = run(trainer, Some((&exp.oracle, &exp.eval)))?;
    let last = outcome.log.last();
    eprintln!(
        "trained `{}` to step {}{}; outputs in {}",
        cfg.run_id,
        outcome.state.step,
        last.map(|l| format!(", final loss {:.4}", l.loss)).unwrap_or_default(),
        dir.display()
    );
    if let Some(m) = outcome.final_metrics() {
        eprintln!("cross coherence {:.2}%, joint coherence {:.2}%", m.mean_cross(), m.joint_coh);
    }
    Ok(())
}

fn eval_cmd(checkpoint: &Path, config: &ConfigArg, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let state = TrainState::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if state.model.config() != &cfg.model {
        return Err(config_error("checkpoint model does not match the config"));
    }
    let exp = Experiment::build(&cfg.data)?;
    let m = evaluate(&state.model, &exp.oracle, &exp.eval, &cfg.eval)?;
    write_csv(sink(out)?, "metrics", PHASE_CSV_HEADER, phase_rows(&format!("step_{}", state.step), &m))?;
    Ok(())
}

fn propagate_cmd(
    config: &ConfigArg,
    pipeline: Option<&Path>,
    pretrain_percent: Option<f64>,
    variant: Option<Variant>,
    control: bool,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    let mut pcfg: PropagationConfig = match pipeline {
        Some(p) => load_json(p)?,
        None => PropagationConfig::default(),
    };
    if let Some(p) = pretrain_percent {
        pcfg.pretrain_percent = p;
    }
    if let Some(v) = variant {
        cfg.objective = objective_for(&cfg.objective, v);
    }
    pcfg.control |= control;
    cfg.validate().map_err(config_error)?;
    pcfg.validate().map_err(config_error)?;
    cfg.output_dir = None;

    let outcome = run_pipeline(&cfg, &pcfg)?;
    let report = &outcome.report;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    fs::write(out.join("pipeline.json"), serde_json::to_string_pretty(&pcfg)?)?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    outcome.state.save(&out.join("final.ckpt"))?;
    let mut rows = Vec::new();
    for (phase, m) in [
        ("before", &report.metrics_before),
        ("after", &report.metrics_after),
        ("control", &report.metrics_control),
    ] {
        if let Some(m) = m {
            rows.extend(phase_rows(phase, m));
        }
    }
    write_csv(File::create(out.join("metrics.csv"))?, "propagation metrics", PHASE_CSV_HEADER, rows)?;

    if report.f1_defined() {
        eprintln!(
            "{} of {} mixed pairs predicted related: precision {:.3}, recall {:.3}, F1 {:.3}",
            report.n_predicted, report.n_mixed, report.precision, report.recall, report.f1
        );
    } else {
        eprintln!("no related pairs in the mixed pool; F1 undefined");
    }
    eprintln!("report written to {}", out.join("report.json").display());
    Ok(())
}

/// Returns whether every check passed.
fn oracle_check_cmd(config: Option<&Path>, out: Option<&Path>) -> Result<bool> {
    let cfg: SandwichConfig = match config {
        Some(p) => load_json(p)?,
        None => SandwichConfig::default(),
    };
    let r = oracle_check(&cfg)?;
    let s = &r.sandwich;
    println!(
        "means over {} items (K={}): elbo {:.4}  iwae {:.4}  exact {:.4}  cubo {:.4}",
        cfg.items, cfg.k, s.elbo.mean, s.iwae.mean, s.exact.mean, s.cubo.mean
    );
    for g in &s.gaps {
        let verdict = if g.passed { "ok" } else { "FAIL" };
        println!("  {} - {}: {:.4} ± {:.4}  {verdict}", g.upper, g.lower, g.mean, g.se);
    }
    let t = &r.tightness;
    println!(
        "exact encoder: max |elbo - log p| {:.2e}, max |cubo - log p| {:.2e}  {}",
        t.max_abs_elbo,
        t.max_abs_cubo,
        if t.passed() { "ok" } else { "FAIL" }
    );
    let m = &r.monotonicity;
    let means: Vec<String> = m.ks.iter().zip(&m.iwae).map(|(k, s)| format!("K={k}: {:.4}", s.mean)).collect();
    println!("iwae by K: {}  {}", means.join(", "), if m.passed(cfg.z) { "ok" } else { "FAIL" });
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&r)?)?;
    }
    Ok(r.passed(cfg.z))
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out, resume } => train_cmd(&config, out, resume)?,
        Command::Eval { checkpoint, config, out } => eval_cmd(&checkpoint, &config, out.as_deref())?,
        Command::SweepGamma { config, gammas, sweep } => {
            let cfg = load_config(&config)?;
            if gammas.iter().any(|g| !(*g >= 1.0)) {
                bail!(ConfigError("γ values must be ≥ 1".into()));
            }
            let rows = sweep_gamma(&cfg, &gammas, &seeds(&sweep, &cfg))?;
            write_csv(sink(sweep.out.as_deref())?, "gamma sweep", GAMMA_CSV_HEADER, rows.iter().map(|r| r.csv_row()))?;
        }
        Command::SweepData { config, percents, variants, sweep } => {
            let cfg = load_config(&config)?;
            if percents.iter().any(|p| !(*p > 0.0 && *p <= 100.0)) {
                bail!(ConfigError("percents must lie in (0, 100]".into()));
            }
            let rows = sweep_data_fraction(&cfg, &percents, &variants, &seeds(&sweep, &cfg))?;
            write_csv(
                sink(sweep.out.as_deref())?,
                "data fraction sweep",
                FRACTION_CSV_HEADER,
                rows.iter().flat_map(|r| r.csv_rows()),
            )?;
        }
        Command::Propagate {
            config,
            pipeline,
            pretrain_percent,
            variant,
            control,
            out,
        } => propagate_cmd(&config, pipeline.as_deref(), pretrain_percent, variant, control, &out)?,
        Command::OracleCheck { config, out } => return oracle_check_cmd(config.as_deref(), out.as_deref()),
    }
    Ok(true)
}

/// 2 for configuration problems, 3 for a numerical abort, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            match e {
                Error::NumericalAbort { .. } | Error::NonFinite(_) => return 3,
                Error::Stage { stage: "config", .. } => return 2,
                _ => {}
            }
        }
    }
    1
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

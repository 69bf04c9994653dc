//! The two sweeps: contrastive weight γ, and training-data fraction across
//! objective variants. Seeds are paired: every cell of a sweep trains on the
//! same data and initialization for a given seed.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::metrics::fmt;
use crate::eval::Metrics;
use crate::objective::{ObjectiveConfig, Variant};
use crate::train::{train, RunConfig};

/// `cfg` with both the run seed and the data seed set to `seed`.
pub fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.data.seed = seed;
    c
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

pub const GAMMA_CSV_HEADER: &str = "gamma,seed,latent_acc_m1,latent_acc_m2,joint_coh,cross_coh_12,cross_coh_21,synergy_coh,mean_pmi_related,mean_pmi_unrelated,test_loglik";

impl GammaRow {
    pub fn csv_row(&self) -> String {
        let mut cols = vec![fmt(self.gamma), self.seed.to_string()];
        for (name, v) in self.metrics.named() {
            if name != "cross_coh_mean" {
                cols.push(v.map(fmt).unwrap_or_default());
            }
        }
        cols.join(",")
    }
}

/// One train-and-evaluate run per `(γ, seed)`, the rest of the objective
/// taken from `cfg`. A baseline objective is swept as cI.
pub fn sweep_gamma(cfg: &RunConfig, gammas: &[f64], seeds: &[u64]) -> Result<Vec<GammaRow>> {
    if let Some(g) = gammas.iter().find(|g| !(**g >= 1.0)) {
        return Err(Error::invalid(format!("γ must be ≥ 1, got {g}")));
    }
    let mut rows = Vec::with_capacity(gammas.len() * seeds.len());
    for &seed in seeds {
        for &gamma in gammas {
            let mut c = with_seed(cfg, seed);
            let base = &cfg.objective;
            c.objective = if base.is_baseline() {
                ObjectiveConfig::contrastive_iwae(gamma, ObjectiveConfig::default().num_negatives, base.term1.k)
            } else {
                ObjectiveConfig { gamma, ..*base }
            };
            c.run_id = format!("{}-gamma{gamma}-seed{seed}", cfg.run_id);
            c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(&c.run_id));
            let metrics = final_metrics(&c)?;
            rows.push(GammaRow { gamma, seed, metrics });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct FractionRow {
    pub variant: Variant,
    pub percent: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

pub const FRACTION_CSV_HEADER: &str = "variant,percent,seed,metric,value";

impl FractionRow {
    /// Long format: one line per metric.
    pub fn csv_rows(&self) -> Vec<String> {
        self.metrics
            .named()
            .into_iter()
            .map(|(name, v)| format!("{},{},{},{name},{}", self.variant, fmt(self.percent), self.seed, v.map(fmt).unwrap_or_default()))
            .collect()
    }
}

/// Every `(variant, percent, seed)` cell, the objective's γ, N and K taken
/// from `cfg`.
pub fn sweep_data_fraction(cfg: &RunConfig, percents: &[f64], variants: &[Variant], seeds: &[u64]) -> Result<Vec<FractionRow>> {
    if let Some(p) = percents.iter().find(|p| !(**p > 0.0 && **p <= 100.0)) {
        return Err(Error::invalid(format!("percent must be in (0, 100], got {p}")));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for &percent in percents {
            for &variant in variants {
                let mut c = with_seed(cfg, seed);
                c.data.percent = percent;
                c.objective = objective_for(&cfg.objective, variant);
                c.run_id = format!("{}-{variant}-p{percent}-seed{seed}", cfg.run_id);
                c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(&c.run_id));
                let metrics = final_metrics(&c)?;
                rows.push(FractionRow { variant, percent, seed, metrics });
            }
        }
    }
    Ok(rows)
}

/// `variant` with γ, N and K taken from `base`; a baseline `base` supplies
/// only K.
pub fn objective_for(base: &ObjectiveConfig, variant: Variant) -> ObjectiveConfig {
    let defaults = ObjectiveConfig::default();
    let gamma = if base.is_baseline() { defaults.gamma } else { base.gamma };
    let n = if base.num_negatives == 0 { defaults.num_negatives } else { base.num_negatives };
    ObjectiveConfig::for_variant(variant, gamma, n, base.term1.k)
}

fn final_metrics(cfg: &RunConfig) -> Result<Metrics> {
    let (outcome, _) = train(cfg)?;
    outcome
        .final_metrics()
        .cloned()
        .ok_or_else(|| Error::invalid("run finished without an evaluation"))
}

/// Writes the schema comment, header and rows.
pub fn write_csv<W: Write>(mut out: W, kind: &str, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    writeln!(out, "{}", crate::train::schema_comment(kind))?;
    writeln!(out, "{header}")?;
    for r in rows {
        writeln!(out, "{r}")?;
    }
    Ok(())
}

//! Bound checks against the linear-Gaussian testbed: the ordering
//! ELBO ≤ IWAE ≤ log p ≤ CUBO under a perturbed encoder, exactness under the
//! analytic one, and IWAE growth with K.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorSpec};
use crate::eval::oracle::{EncoderChoice, LinearGaussianOracle};
use crate::model::JointKind;
use crate::numerics::DenseArray;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandwichConfig {
    pub items: usize,
    pub k: usize,
    /// Encoder perturbation δ; see [`EncoderChoice::Perturbed`].
    pub perturbation: f64,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub noise_var: f64,
    pub joint_kind: JointKind,
    /// Gaps must exceed this many standard errors.
    pub z: f64,
    pub seed: u64,
}

impl Default for SandwichConfig {
    fn default() -> Self {
        Self {
            items: 200,
            k: 30,
            perturbation: 0.3,
            latent_dim: 4,
            obs_dim: 6,
            noise_var: 0.5,
            joint_kind: JointKind::ExplicitJoint,
            z: 3.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
}

impl Summary {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, se: (var / n).sqrt() }
    }
}

/// `upper − lower`, with the standard error of the per-item difference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub lower: String,
    pub upper: String,
    pub mean: f64,
    pub se: f64,
    pub passed: bool,
}

fn gap(lower: (&str, &[f64]), upper: (&str, &[f64]), z: f64) -> Gap {
    let d: Vec<f64> = upper.1.iter().zip(lower.1).map(|(u, l)| u - l).collect();
    let s = Summary::of(&d);
    Gap {
        lower: lower.0.into(),
        upper: upper.0.into(),
        mean: s.mean,
        se: s.se,
        passed: s.mean > z * s.se && s.mean > 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub elbo: Summary,
    pub iwae: Summary,
    pub exact: Summary,
    pub cubo: Summary,
    pub gaps: Vec<Gap>,
}

impl SandwichReport {
    pub fn passed(&self) -> bool {
        self.gaps.iter().all(|g| g.passed)
    }
}

struct Testbed {
    oracle: LinearGaussianOracle,
    obs: Vec<DenseArray>,
    exact: Vec<f64>,
}

fn testbed(cfg: &SandwichConfig) -> Result<Testbed> {
    if cfg.items < 2 || cfg.k == 0 {
        return Err(Error::invalid("oracle check needs ≥ 2 items and K ≥ 1"));
    }
    let oracle = LinearGaussianOracle::isotropic_example(cfg.latent_dim, cfg.obs_dim, cfg.noise_var, seed::derive(cfg.seed, 0))?;
    let obs = oracle.sample(cfg.items, seed::derive(cfg.seed, 1))?;
    let exact = oracle.exact_logp_rows(&obs)?;
    Ok(Testbed { oracle, obs, exact })
}

/// ELBO, IWAE_K and CUBO_K under the perturbed encoder against the exact
/// log-likelihood.
pub fn sandwich(cfg: &SandwichConfig) -> Result<SandwichReport> {
    let tb = testbed(cfg)?;
    let model = tb.oracle.model(cfg.joint_kind, EncoderChoice::Perturbed(cfg.perturbation))?;
    let noise = seed::derive(cfg.seed, 2);
    let e = estimate(&model, &tb.obs, EstimatorSpec::elbo(cfg.k), noise)?;
    let i = estimate(&model, &tb.obs, EstimatorSpec::iwae(cfg.k), noise)?;
    let c = estimate(&model, &tb.obs, EstimatorSpec::cubo(cfg.k), noise)?;
    Ok(SandwichReport {
        elbo: Summary::of(&e),
        iwae: Summary::of(&i),
        exact: Summary::of(&tb.exact),
        cubo: Summary::of(&c),
        gaps: vec![
            gap(("elbo", &e), ("iwae", &i), cfg.z),
            gap(("iwae", &i), ("exact", &tb.exact), cfg.z),
            gap(("exact", &tb.exact), ("cubo", &c), cfg.z),
        ],
    })
}

/// Largest per-item `|estimate − log p|` for ELBO and CUBO under the
/// analytic encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    pub max_abs_elbo: f64,
    pub max_abs_cubo: f64,
    pub tolerance: f64,
}

impl TightnessReport {
    pub fn passed(&self) -> bool {
        self.max_abs_elbo < self.tolerance && self.max_abs_cubo < self.tolerance
    }
}

pub fn tightness(cfg: &SandwichConfig) -> Result<TightnessReport> {
    let tb = testbed(cfg)?;
    let model = tb.oracle.model(cfg.joint_kind, EncoderChoice::Exact)?;
    let noise = seed::derive(cfg.seed, 3);
    let worst = |spec| -> Result<f64> {
        let v = estimate(&model, &tb.obs, spec, noise)?;
        Ok(v.iter().zip(&tb.exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    };
    Ok(TightnessReport {
        max_abs_elbo: worst(EstimatorSpec::elbo(cfg.k))?,
        max_abs_cubo: worst(EstimatorSpec::cubo(cfg.k))?,
        tolerance: 1e-9,
    })
}

/// Mean IWAE per K under the perturbed encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub ks: Vec<usize>,
    pub iwae: Vec<Summary>,
    /// Consecutive differences with their standard errors.
    pub steps: Vec<Gap>,
}

impl MonotonicityReport {
    /// Non-decreasing within `z` standard errors of each difference.
    pub fn passed(&self, z: f64) -> bool {
        self.steps.iter().all(|g| g.mean >= -z * g.se)
    }
}

pub fn iwae_monotonicity(cfg: &SandwichConfig, ks: &[usize]) -> Result<MonotonicityReport> {
    let tb = testbed(cfg)?;
    let model = tb.oracle.model(cfg.joint_kind, EncoderChoice::Perturbed(cfg.perturbation))?;
    let runs = ks
        .iter()
        .map(|&k| estimate(&model, &tb.obs, EstimatorSpec::iwae(k), seed::derive(cfg.seed, 4 + k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let steps = ks
        .windows(2)
        .zip(runs.windows(2))
        .map(|(k, r)| gap((&format!("iwae{}", k[0]), &r[0]), (&format!("iwae{}", k[1]), &r[1]), cfg.z))
        .collect();
    Ok(MonotonicityReport {
        ks: ks.to_vec(),
        iwae: runs.iter().map(|r| Summary::of(r)).collect(),
        steps,
    })
}

/// All three checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub sandwich: SandwichReport,
    pub tightness: TightnessReport,
    pub monotonicity: MonotonicityReport,
}

impl OracleCheck {
    pub fn passed(&self, z: f64) -> bool {
        self.sandwich.passed() && self.tightness.passed() && self.monotonicity.passed(z)
    }
}

pub fn oracle_check(cfg: &SandwichConfig) -> Result<OracleCheck> {
    Ok(OracleCheck {
        sandwich: sandwich(cfg)?,
        tightness: tightness(cfg)?,
        monotonicity: iwae_monotonicity(cfg, &[1, 5, 30])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_constant_has_zero_se() {
        let s = Summary::of(&[2.0; 5]);
        assert_eq!((s.mean, s.se), (2.0, 0.0));
    }

    #[test]
    fn small_suite_orders_the_bounds() {
        let cfg = SandwichConfig { items: 60, ..SandwichConfig::default() };
        let r = sandwich(&cfg).unwrap();
        assert!(r.elbo.mean < r.iwae.mean && r.iwae.mean < r.exact.mean && r.exact.mean < r.cubo.mean, "{r:?}");
        assert!(tightness(&cfg).unwrap().passed());
    }

    #[test]
    fn rejects_tiny_inputs() {
        assert!(sandwich(&SandwichConfig { items: 1, ..SandwichConfig::default() }).is_err());
    }
}

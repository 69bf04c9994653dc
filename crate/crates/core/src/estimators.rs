//! Monte Carlo estimates of `log p(x_1, .., x_M)` from `K` importance samples
//! of the joint posterior:
//!
//! * ELBO: mean of the log-weights,
//! * IWAE: `logsumexp(w) − ln K`,
//! * CUBO: `½ (logsumexp(2w) − ln K)`, i.e. the log of the root-mean-square
//!   weight. The expectation sits outside the log, so for finite `K` this is
//!   a (downward) biased estimate of the χ² upper bound.
//!
//! All estimates are per item; reductions over a batch live in the objective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MultimodalModel;
use crate::numerics::{Bound, DenseArray, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Elbo,
    Iwae,
    Cubo,
}

/// Which bound approximates a `log p` term, and with how many samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub k: usize,
}

impl EstimatorSpec {
    pub const fn elbo(k: usize) -> Self {
        Self { kind: EstimatorKind::Elbo, k }
    }

    pub const fn iwae(k: usize) -> Self {
        Self { kind: EstimatorKind::Iwae, k }
    }

    pub const fn cubo(k: usize) -> Self {
        Self { kind: EstimatorKind::Cubo, k }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("estimator sample count K must be ≥ 1"));
        }
        Ok(())
    }

    /// Reduces `[P, K]` log-weights to `[P]` estimates.
    pub fn reduce<'t>(&self, log_weights: Var<'t>) -> Result<Var<'t>> {
        match self.kind {
            EstimatorKind::Elbo => log_weights.row_mean(),
            EstimatorKind::Iwae => log_weights.row_logmeanexp(),
            EstimatorKind::Cubo => Ok(log_weights.scale(2.0).row_logmeanexp()?.scale(0.5)),
        }
    }
}

impl EstimatorSpec {
    /// Reduces `[P, K]` log-weights whose columns form `strata` equal blocks,
    /// one per mixture component: IWAE and CUBO are taken within each block
    /// and averaged over blocks, so every component's draws carry their own
    /// gradient. With one stratum this is [`Self::reduce`].
    pub fn reduce_stratified<'t>(&self, log_weights: Var<'t>, strata: usize) -> Result<Var<'t>> {
        let shape = log_weights.shape();
        let (p, k) = (shape[0], shape.get(1).copied().unwrap_or(1));
        if strata <= 1 || self.kind == EstimatorKind::Elbo {
            return self.reduce(log_weights);
        }
        if k % strata != 0 {
            return Err(Error::invalid(format!("{k} samples do not split into {strata} strata")));
        }
        let blocks = self.reduce(log_weights.reshape(&[p * strata, k / strata])?)?;
        blocks.reshape(&[p, strata])?.row_mean()
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            EstimatorKind::Elbo => "elbo",
            EstimatorKind::Iwae => "iwae",
            EstimatorKind::Cubo => "cubo",
        };
        write!(f, "{name}:{}", self.k)
    }
}

impl FromStr for EstimatorSpec {
    type Err = Error;

    /// Parses `iwae:30`, `cubo:30`, `elbo:1`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("estimator `{s}` is not `kind:K`")))?;
        let k: usize = k.parse().map_err(|_| Error::invalid(format!("bad sample count in `{s}`")))?;
        let spec = match name {
            "elbo" => Self::elbo(k),
            "iwae" => Self::iwae(k),
            "cubo" => Self::cubo(k),
            other => return Err(Error::invalid(format!("unknown estimator `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Joint estimates for arbitrary tuples drawn from per-modality pools,
/// recorded on `p`'s tape. Shape `[P]`.
pub fn joint_estimates<'t>(
    model: &MultimodalModel,
    p: &Bound<'t>,
    pools: &[DenseArray],
    tuples: &[Vec<usize>],
    spec: EstimatorSpec,
    seed: u64,
) -> Result<Var<'t>> {
    spec.validate()?;
    let draws = model.joint_log_weights(p, pools, tuples, spec.k, seed)?;
    spec.reduce_stratified(draws.log_weights, draws.strata)
}

fn aligned_tuples(model: &MultimodalModel, obs: &[DenseArray]) -> Result<Vec<Vec<usize>>> {
    let n = obs.first().ok_or(Error::Empty("estimator observations"))?.rows();
    if obs.iter().any(|o| o.rows() != n) {
        return Err(Error::invalid("modalities have different item counts"));
    }
    Ok((0..n).map(|i| vec![i; model.num_modalities()]).collect())
}

/// Tuples per tape when estimating without gradients; bounds memory.
const CHUNK: usize = 2048;

/// Per-item estimate of `log p(x_1, .., x_M)` for row-aligned observations.
pub fn estimate(model: &MultimodalModel, obs: &[DenseArray], spec: EstimatorSpec, seed: u64) -> Result<Vec<f64>> {
    let tuples = aligned_tuples(model, obs)?;
    estimate_tuples(model, obs, &tuples, spec, seed)
}

/// Per-tuple estimate for tuples indexing per-modality pools. Each tuple's
/// value depends only on its members' contents, not on the other tuples.
pub fn estimate_tuples(
    model: &MultimodalModel,
    pools: &[DenseArray],
    tuples: &[Vec<usize>],
    spec: EstimatorSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tuples.len());
    for chunk in tuples.chunks(CHUNK) {
        let tape = Tape::new();
        let p = model.params().bind_frozen(&tape);
        out.extend(joint_estimates(model, &p, pools, chunk, spec, seed)?.value().into_data());
    }
    Ok(out)
}

pub fn elbo(model: &MultimodalModel, obs: &[DenseArray], s: usize, seed: u64) -> Result<Vec<f64>> {
    estimate(model, obs, EstimatorSpec::elbo(s), seed)
}

pub fn iwae(model: &MultimodalModel, obs: &[DenseArray], k: usize, seed: u64) -> Result<Vec<f64>> {
    estimate(model, obs, EstimatorSpec::iwae(k), seed)
}

pub fn cubo(model: &MultimodalModel, obs: &[DenseArray], k: usize, seed: u64) -> Result<Vec<f64>> {
    estimate(model, obs, EstimatorSpec::cubo(k), seed)
}

/// IWAE estimate of `log p(x_m)` using `q_m(z | x_m)` and modality `m`'s
/// decoder only.
pub fn unimodal_marginal(model: &MultimodalModel, modality: &str, obs: &DenseArray, k: usize, seed: u64) -> Result<Vec<f64>> {
    let m = model.modality_index(modality)?;
    let items: Vec<usize> = (0..obs.rows()).collect();
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        let tape = Tape::new();
        let p = model.params().bind_frozen(&tape);
        let w = model.marginal_log_weights(&p, m, obs, chunk, k, seed)?;
        out.extend(EstimatorSpec::iwae(k).reduce(w)?.value().into_data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::oracle::{EncoderChoice, LinearGaussianOracle};
    use crate::model::JointKind;
    use approx::assert_relative_eq;

    fn mean_se(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn stratified_reduction_averages_block_estimates() {
        use crate::numerics::logsumexp;
        let w = [-1.0, 0.5, -3.0, 2.0, 0.0, -0.5];
        let t = Tape::new();
        let lw = t.constant(DenseArray::matrix(1, 6, w.to_vec()).unwrap());
        let iwae = EstimatorSpec::iwae(6).reduce_stratified(lw, 2).unwrap().value().item();
        let block = |b: &[f64]| logsumexp(b).unwrap() - 3f64.ln();
        assert_relative_eq!(iwae, 0.5 * (block(&w[..3]) + block(&w[3..])), epsilon = 1e-12);
        let cubo = EstimatorSpec::cubo(6).reduce_stratified(lw, 2).unwrap().value().item();
        let sq = |b: &[f64]| 0.5 * (logsumexp(&b.iter().map(|v| 2.0 * v).collect::<Vec<_>>()).unwrap() - 3f64.ln());
        assert_relative_eq!(cubo, 0.5 * (sq(&w[..3]) + sq(&w[3..])), epsilon = 1e-12);
        let elbo = EstimatorSpec::elbo(6).reduce_stratified(lw, 2).unwrap().value().item();
        assert_relative_eq!(elbo, w.iter().sum::<f64>() / 6.0, epsilon = 1e-12);
        assert_eq!(
            EstimatorSpec::iwae(6).reduce_stratified(lw, 1).unwrap().value(),
            EstimatorSpec::iwae(6).reduce(lw).unwrap().value()
        );
        assert!(EstimatorSpec::iwae(6).reduce_stratified(lw, 4).is_err());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("iwae:30".parse::<EstimatorSpec>().unwrap(), EstimatorSpec::iwae(30));
        assert_eq!("cubo:5".parse::<EstimatorSpec>().unwrap().to_string(), "cubo:5");
        assert!("iwae:0".parse::<EstimatorSpec>().is_err());
        assert!("dreg:3".parse::<EstimatorSpec>().is_err());
    }

    #[test]
    fn prior_posterior_with_blind_decoders() {
        // q = p(z) = N(0,1); unit-Gaussian likelihoods that ignore z; x = y = 0.
        let oracle = LinearGaussianOracle::new(vec![DenseArray::zeros(&[1, 1]), DenseArray::zeros(&[1, 1])], 1.0).unwrap();
        let model = oracle.model(JointKind::ExplicitJoint, EncoderChoice::Exact).unwrap();
        let obs = [DenseArray::zeros(&[1, 1]), DenseArray::zeros(&[1, 1])];
        for v in elbo(&model, &obs, 7, 3).unwrap() {
            assert_relative_eq!(v, -1.837877, epsilon = 5e-7);
        }
    }

    #[test]
    fn single_sample_estimators_coincide() {
        let oracle = LinearGaussianOracle::isotropic_example(2, 3, 0.5, 5).unwrap();
        let model = oracle.model(JointKind::ExplicitJoint, EncoderChoice::Perturbed(0.4)).unwrap();
        let obs = oracle.sample(12, 9).unwrap();
        let a = elbo(&model, &obs, 1, 77).unwrap();
        let b = iwae(&model, &obs, 1, 77).unwrap();
        let c = cubo(&model, &obs, 1, 77).unwrap();
        for i in 0..a.len() {
            assert_eq!(a[i], b[i]);
            assert_relative_eq!(a[i], c[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_posterior_gives_exact_likelihood_for_every_estimator() {
        let oracle = LinearGaussianOracle::isotropic_example(2, 3, 0.5, 5).unwrap();
        let model = oracle.model(JointKind::ExplicitJoint, EncoderChoice::Exact).unwrap();
        let obs = oracle.sample(20, 1).unwrap();
        let exact = oracle.exact_logp_rows(&obs).unwrap();
        for spec in [EstimatorSpec::elbo(3), EstimatorSpec::iwae(5), EstimatorSpec::cubo(4)] {
            let est = estimate(&model, &obs, spec, 2).unwrap();
            for (e, x) in est.iter().zip(&exact) {
                assert!((e - x).abs() < 1e-9, "{spec}: {e} vs {x}");
            }
        }
    }

    #[test]
    fn unimodal_marginal_matches_closed_form() {
        // L = 1, A = 1, σ² = 1: x ~ N(0, 2), log p(0) = −½ ln(2π·2).
        let oracle = LinearGaussianOracle::new(vec![DenseArray::full(&[1, 1], 1.0), DenseArray::full(&[1, 1], 1.0)], 1.0).unwrap();
        let exact_model = oracle.model(JointKind::ExplicitJoint, EncoderChoice::Exact).unwrap();
        let x = DenseArray::zeros(&[1, 1]);
        let v = unimodal_marginal(&exact_model, "m0", &x, 10, 4).unwrap()[0];
        assert_relative_eq!(v, -1.265512, epsilon = 5e-7);
        assert_relative_eq!(oracle.marginal_logp(0, &[0.0]).unwrap(), -1.265512, epsilon = 5e-7);

        // Perturbed proposal: estimates over independent seeds bracket the truth.
        let model = oracle.model(JointKind::ExplicitJoint, EncoderChoice::Perturbed(0.5)).unwrap();
        let xs = DenseArray::zeros(&[1, 1]);
        let draws: Vec<f64> = (0..200).map(|s| unimodal_marginal(&model, "m0", &xs, 30, s).unwrap()[0]).collect();
        let (m, se) = mean_se(&draws);
        assert!((m - -1.265512).abs() < 3.0 * se + 1e-3, "{m} ± {se}");

        let k1: Vec<f64> = (0..200).map(|s| unimodal_marginal(&model, "m0", &xs, 1, s).unwrap()[0]).collect();
        assert!(m >= mean_se(&k1).0);
    }

    #[test]
    fn blind_decoder_marginal_is_exact_with_zero_variance() {
        let oracle = LinearGaussianOracle::new(vec![DenseArray::zeros(&[2, 1]), DenseArray::zeros(&[2, 1])], 0.7).unwrap();
        let model = oracle.model(JointKind::ExplicitJoint, EncoderChoice::Exact).unwrap();
        let x = DenseArray::matrix(1, 2, vec![0.3, -0.4]).unwrap();
        let a = unimodal_marginal(&model, "m0", &x, 30, 1).unwrap()[0];
        let b = unimodal_marginal(&model, "m0", &x, 30, 2).unwrap()[0];
        assert_relative_eq!(a, b, epsilon = 1e-12);
        assert_relative_eq!(a, oracle.marginal_logp(0, x.data()).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn estimates_are_batch_permutation_invariant_and_seeded() {
        let oracle = LinearGaussianOracle::isotropic_example(2, 3, 0.5, 5).unwrap();
        for kind in [JointKind::ExplicitJoint, JointKind::MixtureOfExperts, JointKind::ProductOfExperts] {
            let model = oracle.model(kind, EncoderChoice::Perturbed(0.3)).unwrap();
            let obs = oracle.sample(8, 3).unwrap();
            let perm = [5, 2, 7, 0, 1, 6, 3, 4];
            let permuted: Vec<_> = obs.iter().map(|o| o.gather_rows(&perm).unwrap()).collect();
            for spec in [EstimatorSpec::elbo(4), EstimatorSpec::iwae(4), EstimatorSpec::cubo(4)] {
                let a = estimate(&model, &obs, spec, 17).unwrap();
                let b = estimate(&model, &permuted, spec, 17).unwrap();
                for (j, &src) in perm.iter().enumerate() {
                    assert_eq!(a[src].to_bits(), b[j].to_bits());
                }
                assert_eq!(a, estimate(&model, &obs, spec, 17).unwrap());
            }
        }
    }
}

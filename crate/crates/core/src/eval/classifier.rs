//! Bayes-optimal class read-out for the synthetic generator.
//!
//! Given class `c`, a Gaussian modality is `N(W_c, W_p W_pᵀ + σ²I)` with a
//! covariance shared across classes, so linear discriminant analysis with the
//! true parameters is the Bayes rule under equal priors. Bernoulli
//! modalities are mapped back through the logit first.

use nalgebra::{DMatrix, DVector};

use crate::data::{Generator, Unimodal};
use crate::error::{Error, Result};
use crate::model::LikelihoodKind;
use crate::numerics::DenseArray;

/// Added to the shared covariance so the noiseless, private-free case stays
/// invertible.
const COV_RIDGE: f64 = 1e-6;
const LOGIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug)]
struct Discriminant {
    likelihood: LikelihoodKind,
    /// `[C, D]` rows `Σ⁻¹ μ_c`.
    weights: DMatrix<f64>,
    /// `−½ μ_cᵀ Σ⁻¹ μ_c`.
    offsets: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct OracleClassifier {
    names: Vec<String>,
    heads: Vec<Discriminant>,
}

impl OracleClassifier {
    pub fn new(generator: &Generator) -> Result<Self> {
        let spec = generator.spec();
        let (c, f) = (spec.num_classes, spec.factor_dim());
        let var = spec.noise_scale * spec.noise_scale + COV_RIDGE;
        let mut heads = Vec::with_capacity(spec.modalities.len());
        for (m, ms) in spec.modalities.iter().enumerate() {
            let d = ms.obs_dim;
            let map = generator.map(m);
            let w = DMatrix::from_row_slice(d, f, map.data());
            let means = w.columns(0, c).into_owned();
            let private = w.columns(c, f - c);
            let cov = private * private.transpose() + DMatrix::identity(d, d) * var;
            let chol = cov
                .cholesky()
                .ok_or_else(|| Error::Degenerate(format!("class covariance of `{}` is not positive definite", ms.name)))?;
            let solved = chol.solve(&means);
            let offsets = DVector::from_fn(c, |k, _| -0.5 * means.column(k).dot(&solved.column(k)));
            heads.push(Discriminant {
                likelihood: ms.likelihood,
                weights: solved.transpose(),
                offsets,
            });
        }
        Ok(Self {
            names: spec.modalities.iter().map(|m| m.name.clone()).collect(),
            heads,
        })
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    /// Most probable class of every row.
    pub fn classify(&self, modality: usize, obs: &DenseArray) -> Result<Vec<usize>> {
        let head = self
            .heads
            .get(modality)
            .ok_or(Error::OutOfBounds { index: modality, bound: self.heads.len() })?;
        let d = head.weights.ncols();
        if obs.shape().len() != 2 || obs.cols() != d {
            return Err(Error::shape("classify", obs.shape(), &[obs.rows(), d]));
        }
        let mut out = Vec::with_capacity(obs.rows());
        let mut x = DVector::zeros(d);
        for i in 0..obs.rows() {
            for (j, &v) in obs.row(i).iter().enumerate() {
                x[j] = match head.likelihood {
                    LikelihoodKind::Bernoulli => {
                        let p = v.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
                        (p / (1.0 - p)).ln()
                    }
                    LikelihoodKind::Gaussian => v,
                };
            }
            let scores = &head.weights * &x + &head.offsets;
            out.push(scores.argmax().0);
        }
        Ok(out)
    }

    /// Percent of `pool` classified as its label.
    pub fn accuracy(&self, modality: usize, pool: &Unimodal) -> Result<f64> {
        let pred = self.classify(modality, &pool.obs)?;
        Ok(percent_equal(&pred, &pool.labels))
    }
}

pub(crate) fn percent_equal(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    100.0 * a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FactorSpec;

    #[test]
    fn oracle_is_nearly_perfect_at_default_noise() {
        let g = Generator::new(FactorSpec::default(), 11).unwrap();
        let clf = OracleClassifier::new(&g).unwrap();
        for m in 0..2 {
            let pool = g.generate(m, 2000, 12).unwrap();
            let acc = clf.accuracy(m, &pool).unwrap();
            assert!(acc >= 99.0, "modality {m}: {acc}");
        }
    }

    #[test]
    fn noiseless_prototypes_are_classified_exactly() {
        let spec = FactorSpec {
            noise_scale: 0.0,
            private_dim: 0,
            ..FactorSpec::default()
        };
        let g = Generator::new(spec, 2).unwrap();
        let clf = OracleClassifier::new(&g).unwrap();
        for m in 0..2 {
            assert_eq!(clf.accuracy(m, &g.generate(m, 100, 3).unwrap()).unwrap(), 100.0);
        }
    }

    #[test]
    fn wrong_width_is_rejected() {
        let g = Generator::new(FactorSpec::default(), 2).unwrap();
        let clf = OracleClassifier::new(&g).unwrap();
        assert!(clf.classify(0, &DenseArray::zeros(&[3, 5])).is_err());
        assert!(clf.modality_index("nope").is_err());
    }
}

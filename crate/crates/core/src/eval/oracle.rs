//! Linear-Gaussian testbed with closed-form likelihoods.
//!
//! `z ~ N(0, I_L)`, `x_m | z ~ N(A_m z, σ² I)`. The joint marginal is
//! Gaussian with covariance blocks `A_i A_jᵀ + δ_ij σ² I`. When every `A_m`
//! has orthogonal columns the exact posteriors are diagonal, so they can be
//! written into a [`MultimodalModel`] with no hidden layers.

use nalgebra::{DMatrix, DVector};

use crate::distributions::LN_2PI;
use crate::error::{Error, Result};
use crate::model::{JointKind, LikelihoodKind, ModalitySpec, ModelConfig, MultimodalModel};
use crate::numerics::DenseArray;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EncoderChoice {
    /// The analytic posterior.
    Exact,
    /// Means shrunk by `(1 − δ)` and log-variances raised by `δ`.
    Perturbed(f64),
}

#[derive(Clone, Debug)]
pub struct LinearGaussianOracle {
    latent_dim: usize,
    /// Per modality, `[obs_dim, latent_dim]`.
    loadings: Vec<DenseArray>,
    noise_var: f64,
}

fn to_matrix(a: &DenseArray) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

impl LinearGaussianOracle {
    pub fn new(loadings: Vec<DenseArray>, noise_var: f64) -> Result<Self> {
        let first = loadings.first().ok_or(Error::Empty("LinearGaussianOracle::new"))?;
        let latent_dim = first.cols();
        if latent_dim == 0 || loadings.len() < 2 {
            return Err(Error::invalid("oracle needs ≥ 2 modalities and latent_dim ≥ 1"));
        }
        for a in &loadings {
            if a.shape().len() != 2 || a.cols() != latent_dim || a.rows() == 0 {
                return Err(Error::shape("LinearGaussianOracle::new", first.shape(), a.shape()));
            }
        }
        if !(noise_var > 0.0) {
            return Err(Error::invalid("noise variance must be positive"));
        }
        let oracle = Self {
            latent_dim,
            loadings,
            noise_var,
        };
        oracle.cholesky()?;
        Ok(oracle)
    }

    /// Two modalities with orthogonal-column loadings whose column norms
    /// decrease from 2 towards 1.
    pub fn isotropic_example(latent_dim: usize, obs_dim: usize, noise_var: f64, seed_value: u64) -> Result<Self> {
        if obs_dim < latent_dim {
            return Err(Error::invalid("obs_dim must be ≥ latent_dim for orthogonal loadings"));
        }
        let loadings = (0..2u64)
            .map(|m| {
                let raw = DMatrix::from_row_slice(
                    obs_dim,
                    latent_dim,
                    &seed::standard_normals(seed::derive(seed_value, m), obs_dim * latent_dim),
                );
                let q = raw.qr().q();
                let mut a = DMatrix::zeros(obs_dim, latent_dim);
                for l in 0..latent_dim {
                    let norm = 2.0 - l as f64 / latent_dim.max(1) as f64;
                    a.set_column(l, &(q.column(l) * norm));
                }
                let mut data = Vec::with_capacity(obs_dim * latent_dim);
                for r in 0..obs_dim {
                    for c in 0..latent_dim {
                        data.push(a[(r, c)]);
                    }
                }
                DenseArray::matrix(obs_dim, latent_dim, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(loadings, noise_var)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn obs_dims(&self) -> Vec<usize> {
        self.loadings.iter().map(DenseArray::rows).collect()
    }

    fn stacked(&self, which: &[usize]) -> DMatrix<f64> {
        let rows: usize = which.iter().map(|&m| self.loadings[m].rows()).sum();
        let mut s = DMatrix::zeros(rows, self.latent_dim);
        let mut r0 = 0;
        for &m in which {
            let a = to_matrix(&self.loadings[m]);
            s.view_mut((r0, 0), (a.nrows(), a.ncols())).copy_from(&a);
            r0 += a.nrows();
        }
        s
    }

    /// Marginal covariance of the chosen modalities, stacked in order.
    pub fn covariance(&self, which: &[usize]) -> DMatrix<f64> {
        let a = self.stacked(which);
        let n = a.nrows();
        &a * a.transpose() + DMatrix::identity(n, n) * self.noise_var
    }

    fn cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let all: Vec<usize> = (0..self.loadings.len()).collect();
        self.covariance(&all)
            .cholesky()
            .ok_or_else(|| Error::Degenerate("joint covariance is not positive definite".into()))
    }

    fn gaussian_logpdf(cov: DMatrix<f64>, v: &[f64]) -> Result<f64> {
        if v.len() != cov.nrows() {
            return Err(Error::shape("exact_logp", &[cov.nrows()], &[v.len()]));
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Degenerate("covariance is not positive definite".into()))?;
        let x = DVector::from_column_slice(v);
        let sol = chol.solve(&x);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(-0.5 * (v.len() as f64 * LN_2PI + log_det + x.dot(&sol)))
    }

    /// `log p(x_1, .., x_M)` for one item, one slice per modality.
    pub fn exact_logp(&self, obs: &[&[f64]]) -> Result<f64> {
        if obs.len() != self.loadings.len() {
            return Err(Error::invalid("exact_logp needs one observation per modality"));
        }
        let all: Vec<usize> = (0..obs.len()).collect();
        let v: Vec<f64> = obs.iter().flat_map(|o| o.iter().copied()).collect();
        Self::gaussian_logpdf(self.covariance(&all), &v)
    }

    /// Exact joint log-likelihood of row-aligned observations.
    pub fn exact_logp_rows(&self, obs: &[DenseArray]) -> Result<Vec<f64>> {
        (0..obs[0].rows())
            .map(|i| self.exact_logp(&obs.iter().map(|o| o.row(i)).collect::<Vec<_>>()))
            .collect()
    }

    pub fn marginal_logp(&self, m: usize, x: &[f64]) -> Result<f64> {
        if m >= self.loadings.len() {
            return Err(Error::OutOfBounds {
                index: m,
                bound: self.loadings.len(),
            });
        }
        Self::gaussian_logpdf(self.covariance(&[m]), x)
    }

    /// `log p(x, y) − log p(x) − log p(y)` for one two-modality item.
    pub fn exact_pmi(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.exact_logp(&[x, y])? - self.marginal_logp(0, x)? - self.marginal_logp(1, y)?)
    }

    /// Draws `n` items from the generative process.
    pub fn sample(&self, n: usize, seed_value: u64) -> Result<Vec<DenseArray>> {
        let l = self.latent_dim;
        let z = seed::standard_normals(seed::derive(seed_value, 0), n * l);
        let sd = self.noise_var.sqrt();
        self.loadings
            .iter()
            .enumerate()
            .map(|(m, a)| {
                let d = a.rows();
                let eps = seed::standard_normals(seed::derive(seed_value, 1 + m as u64), n * d);
                let mut data = Vec::with_capacity(n * d);
                for i in 0..n {
                    for r in 0..d {
                        let mean: f64 = (0..l).map(|c| a.get(r, c) * z[i * l + c]).sum();
                        data.push(mean + sd * eps[i * d + r]);
                    }
                }
                DenseArray::matrix(n, d, data)
            })
            .collect()
    }

    /// Diagonal posterior variances given the chosen modalities; errors when
    /// the exact posterior is not diagonal.
    fn posterior_variances(&self, which: &[usize]) -> Result<Vec<f64>> {
        let mut prec = DMatrix::<f64>::identity(self.latent_dim, self.latent_dim);
        for &m in which {
            let a = to_matrix(&self.loadings[m]);
            prec += a.transpose() * &a / self.noise_var;
        }
        for i in 0..self.latent_dim {
            for j in 0..self.latent_dim {
                if i != j && prec[(i, j)].abs() > 1e-10 * prec[(i, i)] {
                    return Err(Error::invalid("loadings do not have orthogonal columns"));
                }
            }
        }
        Ok((0..self.latent_dim).map(|i| 1.0 / prec[(i, i)]).collect())
    }

    /// `(mean weights [Σ obs_dim, L], log-variance bias [L])` of the posterior
    /// given `which`, with `mean = x · W`.
    fn posterior_head(&self, which: &[usize], choice: EncoderChoice) -> Result<(DenseArray, DenseArray)> {
        let var = self.posterior_variances(which)?;
        let (shrink, inflate) = match choice {
            EncoderChoice::Exact => (1.0, 0.0),
            EncoderChoice::Perturbed(d) => (1.0 - d, d),
        };
        let mut w = Vec::new();
        let mut rows = 0;
        for &m in which {
            let a = &self.loadings[m];
            for r in 0..a.rows() {
                for (l, v) in var.iter().enumerate() {
                    w.push(shrink * a.get(r, l) * v / self.noise_var);
                }
            }
            rows += a.rows();
        }
        Ok((
            DenseArray::matrix(rows, self.latent_dim, w)?,
            DenseArray::vector(var.iter().map(|v| v.ln() + inflate).collect()),
        ))
    }

    /// A [`MultimodalModel`] with linear decoders equal to the generative
    /// process and linear encoders set from the analytic posteriors.
    /// Modalities are named `m0`, `m1`, ...
    pub fn model(&self, joint_kind: JointKind, encoder: EncoderChoice) -> Result<MultimodalModel> {
        let l = self.latent_dim;
        let config = ModelConfig {
            latent_dim: l,
            hidden: vec![],
            joint_kind,
            modalities: self
                .loadings
                .iter()
                .enumerate()
                .map(|(m, a)| ModalitySpec::new(format!("m{m}"), a.rows(), LikelihoodKind::Gaussian))
                .collect(),
        };
        let mut model = MultimodalModel::new(config, 0)?;
        let lv = self.noise_var.ln();
        for (m, a) in self.loadings.iter().enumerate() {
            let d = a.rows();
            let mut wt = Vec::with_capacity(l * d);
            for c in 0..l {
                for r in 0..d {
                    wt.push(a.get(r, c));
                }
            }
            model.set_param(&format!("dec.m{m}.l0.w"), DenseArray::matrix(l, d, wt)?)?;
            model.set_param(&format!("dec.m{m}.l0.b"), DenseArray::zeros(&[d]))?;
            model.set_param(&format!("dec.m{m}.log_var"), DenseArray::full(&[d], lv))?;

            let (w, b) = self.posterior_head(&[m], encoder)?;
            model.set_param(&format!("enc.m{m}.mean.w"), w)?;
            model.set_param(&format!("enc.m{m}.log_var.b"), b)?;
        }
        if joint_kind == JointKind::ExplicitJoint {
            let all: Vec<usize> = (0..self.loadings.len()).collect();
            let (w, b) = self.posterior_head(&all, encoder)?;
            model.set_param("joint.mean.w", w)?;
            model.set_param("joint.log_var.b", b)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_1d(a: f64) -> LinearGaussianOracle {
        LinearGaussianOracle::new(vec![DenseArray::full(&[1, 1], a), DenseArray::full(&[1, 1], a)], 1.0).unwrap()
    }

    #[test]
    fn marginal_at_origin() {
        // x ~ N(0, 2)
        assert_relative_eq!(unit_1d(1.0).marginal_logp(0, &[0.0]).unwrap(), -1.265512, epsilon = 5e-7);
    }

    #[test]
    fn zero_loadings_factorize() {
        let o = LinearGaussianOracle::new(vec![DenseArray::zeros(&[2, 1]), DenseArray::zeros(&[3, 1])], 0.5).unwrap();
        let (x, y) = ([0.3, -1.0], [2.0, 0.1, 0.0]);
        let joint = o.exact_logp(&[&x, &y]).unwrap();
        let iso = |v: &[f64]| v.iter().map(|t| -0.5 * (LN_2PI + 0.5f64.ln()) - t * t / (2.0 * 0.5)).sum::<f64>();
        assert_relative_eq!(joint, iso(&x) + iso(&y), epsilon = 1e-12);
        assert_relative_eq!(o.exact_pmi(&x, &y).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pmi_at_origin_matches_bivariate_formula() {
        // a² / (a² + σ²) = ρ = 0.8 ⇒ a = 2 with σ² = 1.
        let o = unit_1d(2.0);
        let expected = -0.5 * (1.0f64 - 0.64).ln();
        assert_relative_eq!(o.exact_pmi(&[0.0], &[0.0]).unwrap(), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.510826, epsilon = 5e-7);
    }

    #[test]
    fn joint_density_integrates_to_one() {
        let o = unit_1d(0.8);
        let (n, lim) = (801, 9.0);
        let h = 2.0 * lim / (n - 1) as f64;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (-lim + i as f64 * h, -lim + j as f64 * h);
                mass += o.exact_logp(&[&[x], &[y]]).unwrap().exp() * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }

    #[test]
    fn non_orthogonal_loadings_cannot_be_exact() {
        let a = DenseArray::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let o = LinearGaussianOracle::new(vec![a.clone(), a], 1.0).unwrap();
        assert!(o.model(JointKind::ExplicitJoint, EncoderChoice::Exact).is_err());
    }

    #[test]
    fn exact_encoder_matches_conjugate_posterior() {
        let o = unit_1d(1.0);
        let m = o.model(JointKind::ExplicitJoint, EncoderChoice::Exact).unwrap();
        // p(z | x) = N(x / 2, 1 / 2)
        let q = m.encode_unimodal("m0", &DenseArray::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        assert_relative_eq!(q.mean.item(), 1.5, epsilon = 1e-12);
        assert_relative_eq!(q.log_var.item(), 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn sample_covariance_matches() {
        let o = LinearGaussianOracle::isotropic_example(2, 3, 0.5, 1).unwrap();
        let s = o.sample(20_000, 3).unwrap();
        let cov = o.covariance(&[0, 1]);
        let n = s[0].rows() as f64;
        let e01: f64 = (0..s[0].rows()).map(|i| s[0].get(i, 0) * s[1].get(i, 0)).sum::<f64>() / n;
        assert!((e01 - cov[(0, 3)]).abs() < 0.08, "{e01} vs {}", cov[(0, 3)]);
    }
}

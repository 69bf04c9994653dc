//! Diagonal Gaussians and factorized Bernoullis recorded on a tape.
//!
//! Every distribution is batched: parameters are `[rows, dim]` matrices and
//! log-densities come back as one value per row.

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Tape, Var};

pub use crate::numerics::LN_2PI;

/// Logits are clamped to this magnitude before any Bernoulli evaluation.
pub const LOGIT_CLAMP: f64 = 15.0;

/// Lower bound on a decoder's observation log-variance.
pub const LOG_VAR_FLOOR: f64 = -6.0;

#[derive(Clone, Copy, Debug)]
pub struct DiagonalGaussian<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
}

impl<'t> DiagonalGaussian<'t> {
    pub fn new(mean: Var<'t>, log_var: Var<'t>) -> Result<Self> {
        let (ms, ls) = (mean.shape(), log_var.shape());
        if ms != ls || ms.len() != 2 {
            return Err(Error::shape("DiagonalGaussian::new", &ms, &ls));
        }
        Ok(Self { mean, log_var })
    }

    /// `N(0, I)` repeated over `rows`.
    pub fn standard(tape: &'t Tape, rows: usize, dim: usize) -> Self {
        Self {
            mean: tape.constant(DenseArray::zeros(&[rows, dim])),
            log_var: tape.constant(DenseArray::zeros(&[rows, dim])),
        }
    }

    pub fn rows(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mean.shape()[1]
    }

    /// Σ_i [−½ ln 2π − ½ log σ²_i − (v_i − μ_i)² / 2σ²_i], one value per row.
    pub fn log_prob(&self, value: Var<'t>) -> Result<Var<'t>> {
        let diff = value.sub(self.mean)?;
        let scaled = diff.square().mul(self.log_var.neg().exp())?;
        self.log_var
            .add(scaled)?
            .scale(-0.5)
            .add_scalar(-0.5 * LN_2PI)
            .row_sum()
    }

    /// `μ + exp(½ log σ²) · ε` with caller-supplied standard-normal `noise`.
    pub fn rsample(&self, noise: &DenseArray) -> Result<Var<'t>> {
        let tape = self.mean.tape();
        if noise.shape() != self.mean.shape() {
            return Err(Error::shape("rsample", &self.mean.shape(), noise.shape()));
        }
        let eps = tape.constant(noise.clone());
        self.mean.add(self.log_var.scale(0.5).exp().mul(eps)?)
    }

    /// Selects rows, e.g. to repeat one posterior per importance sample.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            mean: self.mean.gather_rows(idx)?,
            log_var: self.log_var.gather_rows(idx)?,
        })
    }

    /// Precision-weighted product of experts, optionally with a `N(0, I)` expert.
    pub fn product(components: &[DiagonalGaussian<'t>], include_standard_prior: bool) -> Result<Self> {
        let first = components.first().ok_or(Error::Empty("gaussian_product"))?;
        let shape = first.mean.shape();
        for c in components {
            if c.mean.shape() != shape {
                return Err(Error::shape("gaussian_product", &shape, &c.mean.shape()));
            }
        }
        let mut precision: Option<Var<'t>> = None;
        let mut weighted: Option<Var<'t>> = None;
        for c in components {
            let lam = c.log_var.neg().exp();
            let lm = lam.mul(c.mean)?;
            precision = Some(match precision {
                Some(p) => p.add(lam)?,
                None => lam,
            });
            weighted = Some(match weighted {
                Some(w) => w.add(lm)?,
                None => lm,
            });
        }
        let mut precision = precision.expect("non-empty");
        if include_standard_prior {
            precision = precision.add_scalar(1.0);
        }
        let log_var = precision.log().neg();
        let mean = weighted.expect("non-empty").mul(log_var.exp())?;
        Self::new(mean, log_var)
    }

    /// KL(self ‖ other), one value per row.
    pub fn kl(&self, other: &DiagonalGaussian<'t>) -> Result<Var<'t>> {
        // ½ Σ [lv₂ − lv₁ + (σ₁² + (μ₁ − μ₂)²) / σ₂² − 1]
        let var_ratio = self.log_var.sub(other.log_var)?.exp();
        let mahal = self.mean.sub(other.mean)?.square().mul(other.log_var.neg().exp())?;
        other
            .log_var
            .sub(self.log_var)?
            .add(var_ratio)?
            .add(mahal)?
            .add_scalar(-1.0)
            .scale(0.5)
            .row_sum()
    }
}

/// `log N(z; 0, I)` per row.
pub fn standard_normal_log_prob<'t>(z: Var<'t>) -> Result<Var<'t>> {
    z.square().scale(-0.5).add_scalar(-0.5 * LN_2PI).row_sum()
}

/// Independent Bernoulli factors parameterized by clamped logits.
#[derive(Clone, Copy, Debug)]
pub struct FactorBernoulli<'t> {
    logits: Var<'t>,
}

impl<'t> FactorBernoulli<'t> {
    pub fn new(logits: Var<'t>) -> Self {
        Self {
            logits: logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP),
        }
    }

    pub fn logits(&self) -> Var<'t> {
        self.logits
    }

    /// Σ_i [x_i l_i − softplus(l_i)]; targets may be fractional in `[0, 1]`.
    pub fn log_prob(&self, target: Var<'t>) -> Result<Var<'t>> {
        target.mul(self.logits)?.sub(self.logits.softplus())?.row_sum()
    }

    pub fn mean(&self) -> Var<'t> {
        self.logits.sigmoid()
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            logits: self.logits.gather_rows(idx)?,
        })
    }
}

/// A decoder's observation model for one modality.
#[derive(Clone, Copy, Debug)]
pub enum Likelihood<'t> {
    Bernoulli(FactorBernoulli<'t>),
    Gaussian(DiagonalGaussian<'t>),
}

impl<'t> Likelihood<'t> {
    pub fn log_prob(&self, target: Var<'t>) -> Result<Var<'t>> {
        match self {
            Likelihood::Bernoulli(b) => b.log_prob(target),
            Likelihood::Gaussian(g) => g.log_prob(target),
        }
    }

    pub fn mean(&self) -> Var<'t> {
        match self {
            Likelihood::Bernoulli(b) => b.mean(),
            Likelihood::Gaussian(g) => g.mean,
        }
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        Ok(match self {
            Likelihood::Bernoulli(b) => Likelihood::Bernoulli(b.gather_rows(idx)?),
            Likelihood::Gaussian(g) => Likelihood::Gaussian(g.gather_rows(idx)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gaussian<'t>(t: &'t Tape, mean: &[f64], log_var: &[f64]) -> DiagonalGaussian<'t> {
        let d = mean.len();
        DiagonalGaussian::new(
            t.var(DenseArray::matrix(1, d, mean.to_vec()).unwrap()),
            t.var(DenseArray::matrix(1, d, log_var.to_vec()).unwrap()),
        )
        .unwrap()
    }

    fn point<'t>(t: &'t Tape, v: &[f64]) -> Var<'t> {
        t.constant(DenseArray::matrix(1, v.len(), v.to_vec()).unwrap())
    }

    #[test]
    fn log_prob_reference_values() {
        let t = Tape::new();
        let std = gaussian(&t, &[0.0], &[0.0]);
        assert_relative_eq!(std.log_prob(point(&t, &[0.0])).unwrap().item(), -0.918_938_533_204_672_8, epsilon = 1e-12);
        assert_relative_eq!(std.log_prob(point(&t, &[1.0])).unwrap().item(), -1.418_938_533_204_673, epsilon = 1e-12);
        // var 4: −½ ln 2π − ½ ln 4
        let wide = gaussian(&t, &[0.0], &[4f64.ln()]);
        let expected = -0.5 * LN_2PI - 0.5 * 4f64.ln();
        let got = wide.log_prob(point(&t, &[0.0])).unwrap().item();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        assert_relative_eq!(got, -1.612086, epsilon = 5e-7);
    }

    #[test]
    fn log_prob_dimension_mismatch() {
        let t = Tape::new();
        let g = gaussian(&t, &[0.0, 0.0], &[0.0, 0.0]);
        assert!(matches!(g.log_prob(point(&t, &[0.0])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn density_integrates_to_one_on_a_grid() {
        let t = Tape::new();
        let n = 20_001;
        let (lo, hi) = (-12.0, 12.0);
        let step = (hi - lo) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
        let g = DiagonalGaussian::new(
            t.constant(DenseArray::full(&[n, 1], 0.7)),
            t.constant(DenseArray::full(&[n, 1], 0.3)),
        )
        .unwrap();
        let lp = g.log_prob(t.constant(DenseArray::matrix(n, 1, xs).unwrap())).unwrap().value();
        let mass: f64 = lp.data().iter().map(|v| v.exp() * step).sum();
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }

    #[test]
    fn rsample_values_and_gradients() {
        let t = Tape::new();
        let g = gaussian(&t, &[5.0], &[0.0]);
        assert_eq!(g.rsample(&DenseArray::matrix(1, 1, vec![0.0]).unwrap()).unwrap().item(), 5.0);

        let g = gaussian(&t, &[0.0], &[2.0 * 2f64.ln()]);
        let z = g.rsample(&DenseArray::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_relative_eq!(z.item(), 2.0, epsilon = 1e-12);

        let lv = 0.4;
        let eps = -1.3;
        let g = gaussian(&t, &[0.2], &[lv]);
        let z = g.rsample(&DenseArray::matrix(1, 1, vec![eps]).unwrap()).unwrap();
        let grads = t.backward(z.sum()).unwrap();
        assert_eq!(grads.wrt(g.mean).item(), 1.0);
        assert_relative_eq!(grads.wrt(g.log_var).item(), 0.5 * (0.5 * lv).exp() * eps, epsilon = 1e-14);
    }

    #[test]
    fn product_of_two_unit_gaussians_and_prior() {
        let t = Tape::new();
        let p = DiagonalGaussian::product(&[gaussian(&t, &[1.0], &[0.0]), gaussian(&t, &[3.0], &[0.0])], true).unwrap();
        assert_relative_eq!(p.mean.item(), 4.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(p.log_var.item().exp(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn product_single_component_is_identity() {
        let t = Tape::new();
        let g = gaussian(&t, &[0.3, -2.0], &[0.1, -0.7]);
        let p = DiagonalGaussian::product(&[g], false).unwrap();
        for (a, b) in p.mean.value().data().iter().zip(g.mean.value().data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in p.log_var.value().data().iter().zip(g.log_var.value().data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn very_broad_expert_leaves_the_prior() {
        let t = Tape::new();
        let p = DiagonalGaussian::product(&[gaussian(&t, &[3.0], &[1e8f64.ln()])], true).unwrap();
        assert!(p.mean.item().abs() < 1e-6);
        assert!((p.log_var.item().exp() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_product_without_prior_is_an_error() {
        assert!(matches!(DiagonalGaussian::product(&[], false), Err(Error::Empty(_))));
    }

    #[test]
    fn kl_against_itself_is_zero_and_known_value() {
        let t = Tape::new();
        let a = gaussian(&t, &[0.5, -1.0], &[0.2, -0.3]);
        assert!(a.kl(&a).unwrap().item().abs() < 1e-14);
        let std = gaussian(&t, &[0.0], &[0.0]);
        let b = gaussian(&t, &[1.0], &[0.0]);
        assert_relative_eq!(b.kl(&std).unwrap().item(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn bernoulli_probabilities_stay_inside_open_interval() {
        let t = Tape::new();
        let b = FactorBernoulli::new(t.var(DenseArray::matrix(1, 3, vec![-100.0, 0.0, 100.0]).unwrap()));
        let m = b.mean().value();
        assert!(m.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let lp = b.log_prob(point(&t, &[1.0, 1.0, 0.0])).unwrap().item();
        assert!(lp.is_finite());
        // −softplus(15) − ln 2 − softplus(15)
        let sp15 = 15.0 + (-15f64).exp().ln_1p();
        assert_relative_eq!(lp, -2.0 * sp15 - 2f64.ln(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn product_is_commutative_and_associative(
            m in proptest::collection::vec(-5.0f64..5.0, 3),
            lv in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let t = Tape::new();
            let g: Vec<_> = (0..3).map(|i| gaussian(&t, &[m[i]], &[lv[i]])).collect();
            let abc = DiagonalGaussian::product(&[g[0], g[1], g[2]], false).unwrap();
            let cba = DiagonalGaussian::product(&[g[2], g[1], g[0]], false).unwrap();
            let ab = DiagonalGaussian::product(&[g[0], g[1]], false).unwrap();
            let ab_c = DiagonalGaussian::product(&[ab, g[2]], false).unwrap();
            for other in [cba, ab_c] {
                prop_assert!((abc.mean.item() - other.mean.item()).abs() < 1e-12 * (1.0 + abc.mean.item().abs()));
                let (p1, p2) = ((-abc.log_var.item()).exp(), (-other.log_var.item()).exp());
                prop_assert!((p1 - p2).abs() < 1e-12 * p1);
            }
        }

        #[test]
        fn antithetic_draws_average_to_the_mean(
            mu in -10.0f64..10.0, lv in -4.0f64..4.0, e in -3.0f64..3.0,
        ) {
            let t = Tape::new();
            let g = gaussian(&t, &[mu], &[lv]);
            let a = g.rsample(&DenseArray::matrix(1, 1, vec![e]).unwrap()).unwrap().item();
            let b = g.rsample(&DenseArray::matrix(1, 1, vec![-e]).unwrap()).unwrap().item();
            prop_assert!(((a + b) / 2.0 - mu).abs() <= 1e-12 * (1.0 + mu.abs()));
        }
    }
}

//! The γ-weighted contrastive objective.
//!
//! For a batch of related tuples the loss is the batch mean of
//!
//! ```text
//! −γ·L̂₁(x, y) + ½ [ logsumexp_i L̂₂(x'_i, y) + logsumexp_i L̂₂(x, y'_i) ]
//! ```
//!
//! where `L̂₁`, `L̂₂` estimate `log p(x, y)` and the primed observations are
//! unrelated items re-paired from within the batch. With more than two
//! modalities the bracket averages one term per replaced modality;
//! [`multimodal_objective`] instead draws whole negative tuples from an
//! index matrix so the cost per anchor stays at `N + 1` estimates.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, EstimatorSpec};
use crate::model::MultimodalModel;
use crate::numerics::{logsumexp, Bound, DenseArray, Tape, Var};
use crate::seed::{self, tag};

/// Training objective family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// ELBO only, no negatives.
    #[serde(rename = "baseline")]
    Baseline,
    /// Contrastive, IWAE for both terms.
    #[serde(rename = "cI")]
    ContrastiveIwae,
    /// Contrastive, IWAE for the related term and CUBO for the negatives.
    #[serde(rename = "cC")]
    ContrastiveCubo,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::ContrastiveIwae => "cI",
            Variant::ContrastiveCubo => "cC",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "cI" | "ci" => Ok(Variant::ContrastiveIwae),
            "cC" | "cc" => Ok(Variant::ContrastiveCubo),
            other => Err(Error::invalid(format!("unknown variant `{other}` (baseline, cI, cC)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight on the related term; `+∞` selects baseline training.
    #[serde(serialize_with = "ser_gamma", deserialize_with = "de_gamma")]
    pub gamma: f64,
    pub num_negatives: usize,
    pub term1: EstimatorSpec,
    pub term2: EstimatorSpec,
    pub variant: Variant,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self::contrastive_iwae(2.0, 5, 30)
    }
}

impl ObjectiveConfig {
    pub fn baseline(k: usize) -> Self {
        Self {
            gamma: f64::INFINITY,
            num_negatives: 0,
            term1: EstimatorSpec::elbo(k),
            term2: EstimatorSpec::elbo(k),
            variant: Variant::Baseline,
        }
    }

    pub fn contrastive_iwae(gamma: f64, num_negatives: usize, k: usize) -> Self {
        Self {
            gamma,
            num_negatives,
            term1: EstimatorSpec::iwae(k),
            term2: EstimatorSpec::iwae(k),
            variant: Variant::ContrastiveIwae,
        }
    }

    pub fn contrastive_cubo(gamma: f64, num_negatives: usize, k: usize) -> Self {
        Self {
            gamma,
            num_negatives,
            term1: EstimatorSpec::iwae(k),
            term2: EstimatorSpec::cubo(k),
            variant: Variant::ContrastiveCubo,
        }
    }

    /// Canonical configuration for `variant`; `gamma` and `n` are ignored
    /// for the baseline.
    pub fn for_variant(variant: Variant, gamma: f64, num_negatives: usize, k: usize) -> Self {
        match variant {
            Variant::Baseline => Self::baseline(k),
            Variant::ContrastiveIwae => Self::contrastive_iwae(gamma, num_negatives, k),
            Variant::ContrastiveCubo => Self::contrastive_cubo(gamma, num_negatives, k),
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.variant == Variant::Baseline
    }

    pub fn validate(&self) -> Result<()> {
        self.term1.validate()?;
        self.term2.validate()?;
        if self.gamma.is_nan() || self.gamma < 1.0 {
            return Err(Error::invalid(format!("gamma must be ≥ 1, got {}", self.gamma)));
        }
        let term2 = match self.variant {
            Variant::Baseline => {
                if self.gamma.is_finite() {
                    return Err(Error::invalid("baseline objective takes gamma = inf"));
                }
                if self.term1.kind != EstimatorKind::Elbo {
                    return Err(Error::invalid("baseline objective uses the ELBO"));
                }
                return Ok(());
            }
            Variant::ContrastiveIwae => EstimatorKind::Iwae,
            Variant::ContrastiveCubo => EstimatorKind::Cubo,
        };
        if self.gamma.is_infinite() {
            return Err(Error::invalid(format!("{} objective needs a finite gamma", self.variant)));
        }
        if self.term1.kind != EstimatorKind::Iwae || self.term2.kind != term2 {
            return Err(Error::invalid(format!(
                "{} objective expects iwae / {:?} estimators, got {} / {}",
                self.variant, term2, self.term1, self.term2
            )));
        }
        if self.num_negatives == 0 {
            return Err(Error::invalid("contrastive objective needs N ≥ 1 negatives"));
        }
        Ok(())
    }
}

fn ser_gamma<S: Serializer>(g: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if g.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*g)
    }
}

fn de_gamma<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if matches!(t.as_str(), "inf" | "+inf" | "infinity") => Ok(f64::INFINITY),
        Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
    }
}

/// Within-batch negatives: `replace[m][i]` lists the `N` batch items whose
/// modality `m` is paired with anchor `i`'s other modalities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSet {
    pub replace: Vec<Vec<Vec<usize>>>,
}

impl NegativeSet {
    pub fn num_modalities(&self) -> usize {
        self.replace.len()
    }

    pub fn batch_size(&self) -> usize {
        self.replace.first().map_or(0, Vec::len)
    }

    pub fn num_negatives(&self) -> usize {
        self.replace.first().and_then(|r| r.first()).map_or(0, Vec::len)
    }

    fn check(&self, batch: usize, modalities: usize, n: usize) -> Result<()> {
        if self.num_modalities() != modalities {
            return Err(Error::shape("negatives", &[modalities], &[self.num_modalities()]));
        }
        for per in &self.replace {
            if per.len() != batch {
                return Err(Error::shape("negatives", &[batch, n], &[per.len(), n]));
            }
            for (i, neg) in per.iter().enumerate() {
                if neg.len() != n {
                    return Err(Error::shape("negatives", &[batch, n], &[batch, neg.len()]));
                }
                for &j in neg {
                    if j >= batch {
                        return Err(Error::OutOfBounds { index: j, bound: batch });
                    }
                    if j == i {
                        return Err(Error::invalid(format!("anchor {i} paired with itself")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `n` distinct indices from `0..batch` excluding `anchor`.
fn others(rng: &mut impl Rng, batch: usize, anchor: usize, n: usize) -> Vec<usize> {
    index::sample(rng, batch - 1, n)
        .into_iter()
        .map(|j| if j >= anchor { j + 1 } else { j })
        .collect()
}

/// Uniform without-replacement negatives for every anchor and modality.
/// Modality `m` uses its own stream, so reversing `replace` gives the set a
/// model with reversed modalities would draw.
pub fn draw_negatives(batch: usize, modalities: usize, n: usize, seed: u64) -> Result<NegativeSet> {
    if batch < n + 1 {
        return Err(Error::invalid(format!("batch of {batch} cannot supply {n} negatives per anchor")));
    }
    let base = seed::derive(seed, tag::NEGATIVES);
    let replace = (0..modalities)
        .map(|m| {
            let mut rng = seed::rng(seed::derive(base, m as u64));
            (0..batch).map(|i| others(&mut rng, batch, i, n)).collect()
        })
        .collect();
    Ok(NegativeSet { replace })
}

/// `J[m][n]`: the item supplying modality `m` of negative tuple `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMatrix {
    modalities: usize,
    n: usize,
    entries: Vec<usize>,
}

impl IndexMatrix {
    pub fn new(modalities: usize, n: usize, entries: Vec<usize>) -> Result<Self> {
        if entries.len() != modalities * n {
            return Err(Error::shape("IndexMatrix", &[modalities, n], &[entries.len()]));
        }
        Ok(Self { modalities, n, entries })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.modalities, self.n)
    }

    pub fn get(&self, m: usize, n: usize) -> usize {
        self.entries[m * self.n + n]
    }

    /// Negative tuple `n`.
    pub fn column(&self, n: usize) -> Vec<usize> {
        (0..self.modalities).map(|m| self.get(m, n)).collect()
    }
}

/// One index matrix per anchor, entries uniform over the batch excluding the
/// anchor itself, drawn independently per modality.
pub fn draw_index_matrices(batch: usize, modalities: usize, n: usize, seed: u64) -> Result<Vec<IndexMatrix>> {
    if batch < 2 {
        return Err(Error::invalid("index matrices need a batch of at least 2"));
    }
    let mut rng = seed::rng(seed::derive(seed, tag::NEGATIVES ^ 0x4a));
    (0..batch)
        .map(|i| {
            let entries = (0..modalities * n)
                .map(|_| {
                    let j = rng.gen_range(0..batch - 1);
                    if j >= i {
                        j + 1
                    } else {
                        j
                    }
                })
                .collect();
            IndexMatrix::new(modalities, n, entries)
        })
        .collect()
}

/// Objective recorded on a tape.
pub struct ObjectiveValue<'t> {
    pub loss: Var<'t>,
    /// Batch mean of the related-tuple estimate.
    pub term1: f64,
    /// Batch mean of the negative term; `None` for the baseline.
    pub term2: Option<f64>,
    /// Number of tuples passed to the joint estimator.
    pub joint_evaluations: usize,
}

impl ObjectiveValue<'_> {
    pub fn report(&self) -> ObjectiveReport {
        ObjectiveReport {
            loss: self.loss.item(),
            term1: self.term1,
            term2: self.term2,
            joint_evaluations: self.joint_evaluations,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObjectiveReport {
    pub loss: f64,
    pub term1: f64,
    pub term2: Option<f64>,
    pub joint_evaluations: usize,
}

/// Estimates for positive tuples (`term1`) and negative tuples (`term2`).
/// Shares one proposal pass when both specs use the same `K`.
fn estimates<'t>(
    model: &MultimodalModel,
    p: &Bound<'t>,
    pools: &[DenseArray],
    positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    if negatives.is_empty() {
        let d = model.joint_log_weights(p, pools, positives, cfg.term1.k, seed)?;
        return Ok((cfg.term1.reduce_stratified(d.log_weights, d.strata)?, None));
    }
    if cfg.term1.k == cfg.term2.k {
        let all: Vec<Vec<usize>> = positives.iter().chain(negatives).cloned().collect();
        let d = model.joint_log_weights(p, pools, &all, cfg.term1.k, seed)?;
        let b = positives.len();
        let pos = d.log_weights.gather_rows(&(0..b).collect::<Vec<_>>())?;
        let neg = d.log_weights.gather_rows(&(b..all.len()).collect::<Vec<_>>())?;
        return Ok((
            cfg.term1.reduce_stratified(pos, d.strata)?,
            Some(cfg.term2.reduce_stratified(neg, d.strata)?),
        ));
    }
    let pos = model.joint_log_weights(p, pools, positives, cfg.term1.k, seed)?;
    let neg = model.joint_log_weights(p, pools, negatives, cfg.term2.k, seed)?;
    Ok((
        cfg.term1.reduce_stratified(pos.log_weights, pos.strata)?,
        Some(cfg.term2.reduce_stratified(neg.log_weights, neg.strata)?),
    ))
}

/// `loss = −γ·mean(t1) + mean(Σ_g w_g · lse_n neg_g)` from `[B]` positive
/// estimates and groups of `[B, N]` negative estimates.
fn assemble<'t>(gamma: f64, t1: Var<'t>, groups: &[Var<'t>], weight: f64) -> Result<(Var<'t>, f64, f64)> {
    let mut bracket: Option<Var<'t>> = None;
    for g in groups {
        let l = g.row_logsumexp()?;
        bracket = Some(match bracket {
            Some(b) => b.add(l)?,
            None => l,
        });
    }
    let t2 = bracket.ok_or(Error::Empty("negative groups"))?.scale(weight).mean();
    let t1 = t1.mean();
    let loss = t2.add(t1.scale(-gamma))?;
    Ok((loss, t1.item(), t2.item()))
}

/// Symmetrized contrastive objective on a row-aligned batch, recorded on
/// `p`'s tape.
pub fn final_objective_on<'t>(
    model: &MultimodalModel,
    p: &Bound<'t>,
    batch: &[DenseArray],
    negatives: &NegativeSet,
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<ObjectiveValue<'t>> {
    cfg.validate()?;
    let mm = model.num_modalities();
    let b = batch.first().ok_or(Error::Empty("objective batch"))?.rows();
    let positives: Vec<Vec<usize>> = (0..b).map(|i| vec![i; mm]).collect();
    if cfg.is_baseline() {
        let (t1, _) = estimates(model, p, batch, &positives, &[], cfg, seed)?;
        let t1 = t1.mean();
        return Ok(ObjectiveValue {
            loss: t1.neg(),
            term1: t1.item(),
            term2: None,
            joint_evaluations: b,
        });
    }
    let n = cfg.num_negatives;
    if b <= n {
        return Err(Error::invalid(format!("batch of {b} needs more than N={n} items")));
    }
    negatives.check(b, mm, n)?;
    let mut neg_tuples = Vec::with_capacity(mm * b * n);
    for (m, per) in negatives.replace.iter().enumerate() {
        for (i, js) in per.iter().enumerate() {
            for &j in js {
                let mut t = vec![i; mm];
                t[m] = j;
                neg_tuples.push(t);
            }
        }
    }
    let (t1, t2) = estimates(model, p, batch, &positives, &neg_tuples, cfg, seed)?;
    let t2 = t2.expect("negatives present");
    let groups = (0..mm)
        .map(|m| t2.gather_rows(&((m * b * n)..((m + 1) * b * n)).collect::<Vec<_>>())?.reshape(&[b, n]))
        .collect::<Result<Vec<_>>>()?;
    let (loss, term1, term2) = assemble(cfg.gamma, t1, &groups, 1.0 / mm as f64)?;
    Ok(ObjectiveValue {
        loss,
        term1,
        term2: Some(term2),
        joint_evaluations: positives.len() + neg_tuples.len(),
    })
}

/// Evaluates the objective with frozen parameters, drawing negatives from
/// `seed`.
pub fn final_objective(model: &MultimodalModel, batch: &[DenseArray], cfg: &ObjectiveConfig, seed: u64) -> Result<ObjectiveReport> {
    let b = batch.first().ok_or(Error::Empty("objective batch"))?.rows();
    let negatives = if cfg.is_baseline() {
        NegativeSet { replace: vec![vec![Vec::new(); b]; model.num_modalities()] }
    } else {
        draw_negatives(b, model.num_modalities(), cfg.num_negatives, seed)?
    };
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape);
    Ok(final_objective_on(model, &p, batch, &negatives, cfg, seed)?.report())
}

/// Index-matrix objective: per anchor, `−γ·L̂₁(tuple_i) + lse_n L̂₂(J_i[:, n])`,
/// batch mean. Exactly `N + 1` joint estimates per anchor for any `M`.
pub fn multimodal_objective_on<'t>(
    model: &MultimodalModel,
    p: &Bound<'t>,
    batch: &[DenseArray],
    index: &[IndexMatrix],
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<ObjectiveValue<'t>> {
    cfg.validate()?;
    if cfg.is_baseline() {
        return Err(Error::invalid("index-matrix objective is contrastive only"));
    }
    let mm = model.num_modalities();
    let b = batch.first().ok_or(Error::Empty("objective batch"))?.rows();
    let n = cfg.num_negatives;
    if index.len() != b {
        return Err(Error::shape("index matrices", &[b], &[index.len()]));
    }
    let mut neg_tuples = Vec::with_capacity(b * n);
    for j in index {
        if j.shape() != (mm, n) {
            return Err(Error::shape("IndexMatrix", &[mm, n], &[j.shape().0, j.shape().1]));
        }
        for col in 0..n {
            let t = j.column(col);
            if let Some(&bad) = t.iter().find(|&&e| e >= b) {
                return Err(Error::OutOfBounds { index: bad, bound: b });
            }
            neg_tuples.push(t);
        }
    }
    let positives: Vec<Vec<usize>> = (0..b).map(|i| vec![i; mm]).collect();
    let (t1, t2) = estimates(model, p, batch, &positives, &neg_tuples, cfg, seed)?;
    let t2 = t2.expect("negatives present").reshape(&[b, n])?;
    let (loss, term1, term2) = assemble(cfg.gamma, t1, &[t2], 1.0)?;
    Ok(ObjectiveValue {
        loss,
        term1,
        term2: Some(term2),
        joint_evaluations: positives.len() + neg_tuples.len(),
    })
}

pub fn multimodal_objective(
    model: &MultimodalModel,
    batch: &[DenseArray],
    index: &[IndexMatrix],
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<ObjectiveReport> {
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape);
    Ok(multimodal_objective_on(model, &p, batch, index, cfg, seed)?.report())
}

/// One-directional contrastive loss for a single anchor:
/// `−L̂₁(x, y) + logsumexp_i L̂₂(x, y'_i)`. `x` and `y` are single rows of
/// modalities 0 and 1; `negatives` holds the `N` replacement rows for `y`.
pub fn contrastive_asymmetric(
    model: &MultimodalModel,
    x: &DenseArray,
    y: &DenseArray,
    negatives: &DenseArray,
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<f64> {
    if model.num_modalities() != 2 {
        return Err(Error::invalid("asymmetric loss is defined for two modalities"));
    }
    if x.rows() != 1 || y.rows() != 1 {
        return Err(Error::invalid("asymmetric loss takes one anchor row per modality"));
    }
    if negatives.rows() == 0 {
        return Err(Error::Empty("negatives"));
    }
    let mut ys = y.data().to_vec();
    ys.extend_from_slice(negatives.data());
    let pool_y = DenseArray::matrix(negatives.rows() + 1, y.cols(), ys)?;
    let pools = [x.clone(), pool_y];
    let positives = vec![vec![0, 0]];
    let neg_tuples: Vec<Vec<usize>> = (1..=negatives.rows()).map(|j| vec![0, j]).collect();
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape);
    let (t1, t2) = estimates(model, &p, &pools, &positives, &neg_tuples, cfg, seed)?;
    asymmetric_from_estimates(t1.item(), t2.expect("negatives present").value().data())
}

/// `−positive + logsumexp(negatives)`.
pub fn asymmetric_from_estimates(positive: f64, negatives: &[f64]) -> Result<f64> {
    Ok(logsumexp(negatives)? - positive)
}

/// The symmetrized objective from precomputed estimates: `positives[i]` and
/// `negatives[m][i][n]`, with the same arithmetic as [`final_objective_on`].
pub fn objective_from_estimates(gamma: f64, positives: &[f64], negatives: &[Vec<Vec<f64>>]) -> Result<ObjectiveReport> {
    let b = positives.len();
    let tape = Tape::new();
    let t1 = tape.constant(DenseArray::vector(positives.to_vec()));
    let mut groups = Vec::with_capacity(negatives.len());
    for per in negatives {
        if per.len() != b {
            return Err(Error::shape("negative estimates", &[b], &[per.len()]));
        }
        let n = per.first().map_or(0, Vec::len);
        let data: Vec<f64> = per.iter().flatten().copied().collect();
        groups.push(tape.constant(DenseArray::matrix(b, n, data)?));
    }
    let (loss, term1, term2) = assemble(gamma, t1, &groups, 1.0 / negatives.len().max(1) as f64)?;
    Ok(ObjectiveReport {
        loss: loss.item(),
        term1,
        term2: Some(term2),
        joint_evaluations: 0,
    })
}

//! Relatedness scoring by pointwise mutual information and the
//! label-propagation loop built on it.

use serde::{Deserialize, Serialize};

use crate::data::{pair_random_with, pair_related, split_pools, Generator, PairedDataset};
use crate::error::{Error, Result};
use crate::estimators;
use crate::eval::{evaluate, Metrics, OracleClassifier};
use crate::model::MultimodalModel;
use crate::numerics::DenseArray;
use crate::seed;
use crate::train::{held_out, run, RunConfig, TrainState, Trainer};

/// `log p(x_1..x_M) − Σ_m log p(x_m)`, every term an IWAE estimate with `k`
/// samples. Rows of `obs` are aligned tuples.
pub fn pmi(model: &MultimodalModel, obs: &[DenseArray], k: usize, seed: u64) -> Result<Vec<f64>> {
    let joint = estimators::iwae(model, obs, k, seed)?;
    let marginals = model
        .config()
        .modalities
        .iter()
        .zip(obs)
        .map(|(ms, o)| estimators::unimodal_marginal(model, &ms.name, o, k, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(joint
        .iter()
        .enumerate()
        .map(|(i, j)| j - sorted_sum(marginals.iter().map(|m| m[i])))
        .collect())
}

/// [`pmi`] for every tuple of `ds`; each distinct item's marginal is
/// estimated once. Equal to [`pmi`] on the aligned rows.
pub fn pmi_tuples(model: &MultimodalModel, ds: &PairedDataset, k: usize, seed: u64) -> Result<Vec<f64>> {
    let pools: Vec<DenseArray> = ds.pools.iter().map(|p| p.obs.clone()).collect();
    let mut out = estimators::estimate_tuples(model, &pools, &ds.pairs, estimators::EstimatorSpec::iwae(k), seed)?;
    let marginals = model
        .config()
        .modalities
        .iter()
        .zip(&pools)
        .map(|(ms, pool)| estimators::unimodal_marginal(model, &ms.name, pool, k, seed))
        .collect::<Result<Vec<_>>>()?;
    for (v, t) in out.iter_mut().zip(&ds.pairs) {
        *v -= sorted_sum(marginals.iter().zip(t).map(|(m, &i)| m[i]));
    }
    Ok(out)
}

/// Sum in ascending order, so the marginal total does not depend on
/// modality order.
fn sorted_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    #[default]
    MaxF1,
    MaxAccuracy,
}

/// Precision, recall and F1 of a prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl Scores {
    /// Empty predictions have precision 0; F1 is 0 when precision and recall
    /// are both 0.
    pub fn of(predicted: &[bool], truth: &[bool]) -> Self {
        let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => tn += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            accuracy: ratio(tp + tn, predicted.len()),
        }
    }

    pub fn statistic(&self, rule: ThresholdRule) -> f64 {
        match rule {
            ThresholdRule::MaxF1 => self.f1,
            ThresholdRule::MaxAccuracy => self.accuracy,
        }
    }
}

/// Sweeps every midpoint between adjacent distinct sorted scores and returns
/// the one maximizing `rule`, predicting related when `score > threshold`.
/// Ties go to the larger threshold. Identical scores leave no midpoint and
/// are reported as degenerate.
pub fn estimate_threshold(scores: &[f64], truth: &[bool], rule: ThresholdRule) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::shape("estimate_threshold", &[scores.len()], &[truth.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("relatedness score".into()));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 || positives == truth.len() {
        return Err(Error::Degenerate("threshold estimation needs both related and unrelated pairs".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk thresholds upwards: everything above the cut is predicted related.
    let total_pos = positives;
    let total = truth.len();
    let mut tp = total_pos;
    let mut fp = total - total_pos;
    let mut best: Option<(f64, f64)> = None;
    for w in 0..order.len() - 1 {
        let i = order[w];
        if truth[i] {
            tp -= 1;
        } else {
            fp -= 1;
        }
        let (lo, hi) = (scores[i], scores[order[w + 1]]);
        if lo == hi {
            continue;
        }
        let threshold = lo + 0.5 * (hi - lo);
        let tn = total - total_pos - fp;
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / total_pos as f64;
        let stat = match rule {
            ThresholdRule::MaxF1 if precision + recall > 0.0 => 2.0 * precision * recall / (precision + recall),
            ThresholdRule::MaxF1 => 0.0,
            ThresholdRule::MaxAccuracy => (tp + tn) as f64 / total as f64,
        };
        if best.is_none_or(|(s, _)| stat >= s) {
            best = Some((stat, threshold));
        }
    }
    best.map(|(_, t)| t)
        .ok_or_else(|| Error::Degenerate("all relatedness scores are equal; no threshold separates them".into()))
}

/// Pairs scoring strictly above `threshold` and the scores themselves.
pub fn predict(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropagationReport {
    /// Absent when there was nothing to score.
    pub threshold: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_predicted: usize,
    /// Size of the mixed pool scored; zero when nothing was left to mix.
    pub n_mixed: usize,
    /// Ground-truth related pairs in the mixed pool.
    pub n_related: usize,
    #[serde(skip)]
    pub predicted: Vec<bool>,
    pub metrics_before: Option<Metrics>,
    pub metrics_after: Option<Metrics>,
    /// Continued training on the related subset alone, for comparison.
    pub metrics_control: Option<Metrics>,
}

impl PropagationReport {
    /// F1 is meaningful only when the mixed pool had related pairs.
    pub fn f1_defined(&self) -> bool {
        self.n_related > 0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores every tuple of `mixed` and flags those above `threshold`. The
/// relatedness flags of `mixed` are used only for the report.
pub fn propagate(model: &MultimodalModel, mixed: &PairedDataset, threshold: f64, k: usize, seed: u64) -> Result<PropagationReport> {
    if threshold.is_nan() {
        return Err(Error::invalid("threshold is NaN"));
    }
    let scores = if mixed.is_empty() { Vec::new() } else { pmi_tuples(model, mixed, k, seed)? };
    let predicted = predict(&scores, threshold);
    let truth = &mixed.related;
    let s = Scores::of(&predicted, truth);
    Ok(PropagationReport {
        threshold: Some(threshold),
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        n_predicted: predicted.iter().filter(|&&p| p).count(),
        n_mixed: mixed.len(),
        n_related: truth.iter().filter(|&&t| t).count(),
        predicted,
        metrics_before: None,
        metrics_after: None,
        metrics_control: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    /// Percent of each unimodal pool kept as known related data.
    pub pretrain_percent: f64,
    pub pmi_k: usize,
    pub threshold_rule: ThresholdRule,
    pub continue_training: bool,
    /// Extra optimizer steps after propagation.
    pub continue_steps: usize,
    /// Random partners drawn per item when mixing the remainder.
    pub mixed_pairs_per_instance: usize,
    /// Also continue training without the propagated pairs.
    pub control: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            pretrain_percent: 10.0,
            pmi_k: 30,
            threshold_rule: ThresholdRule::MaxF1,
            continue_training: true,
            continue_steps: 2000,
            mixed_pairs_per_instance: 30,
            control: false,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pretrain_percent > 0.0 && self.pretrain_percent <= 100.0) {
            return Err(Error::invalid("pretrain_percent must be in (0, 100]"));
        }
        if self.pmi_k == 0 {
            return Err(Error::invalid("pmi_k must be ≥ 1"));
        }
        if self.mixed_pairs_per_instance == 0 {
            return Err(Error::invalid("mixed_pairs_per_instance must be ≥ 1"));
        }
        Ok(())
    }
}

/// Result of [`run_pipeline`]: the report and the final model state.
pub struct PipelineOutcome {
    pub report: PropagationReport,
    pub state: TrainState,
}

/// Pretrains on a known-related share of the data, scores the randomly
/// mixed remainder by PMI against a threshold fitted on mixed pairs of the
/// known share, and continues training with the pairs predicted related.
/// Any failure is tagged with the stage it occurred in.
pub fn run_pipeline(cfg: &RunConfig, pcfg: &PropagationConfig) -> Result<PipelineOutcome> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    pcfg.validate().map_err(|e| e.at_stage("config"))?;
    let data = &cfg.data;

    // (1) Known related pairs from n% of each pool; the rest is mixed.
    let (oracle, known, mixed, eval) = (|| {
        let generator = Generator::new(data.spec.clone(), data.seed)?;
        let oracle = OracleClassifier::new(&generator)?;
        let pools = generator.generate_all(seed::derive(data.seed, 1))?;
        let (kept, rest) = split_pools(&pools, pcfg.pretrain_percent, data.seed)?;
        let known = pair_related(kept, data.pairs_per_instance, data.seed)?;
        let mixed = if rest.iter().all(|p| !p.is_empty()) {
            Some(pair_random_with(rest, pcfg.mixed_pairs_per_instance, seed::derive(data.seed, 5))?)
        } else {
            None
        };
        let eval = held_out(&generator, data)?;
        Ok::<_, Error>((oracle, known, mixed, eval))
    })()
    .map_err(|e| e.at_stage("data"))?;

    // (2) Pretraining.
    let pretrained = run(Trainer::fresh(cfg.clone(), known.clone())?, Some((&oracle, &eval)))
        .map_err(|e| e.at_stage("pretrain"))?;
    let before = match pretrained.final_metrics() {
        Some(m) => m.clone(),
        None => evaluate(&pretrained.state.model, &oracle, &eval, &cfg.eval).map_err(|e| e.at_stage("pretrain"))?,
    };
    let model = &pretrained.state.model;

    let Some(mixed) = mixed else {
        let report = PropagationReport {
            metrics_after: Some(before.clone()),
            metrics_before: Some(before),
            ..PropagationReport::default()
        };
        return Ok(PipelineOutcome { report, state: pretrained.state });
    };

    // (3, 4) Threshold from random matches within the known share.
    let threshold = (|| {
        let shuffled = pair_random_with(known.pools.clone(), pcfg.mixed_pairs_per_instance, seed::derive(data.seed, 4))?;
        let scores = pmi_tuples(model, &shuffled, pcfg.pmi_k, seed::derive(cfg.seed, seed::tag::EVAL ^ 1))?;
        estimate_threshold(&scores, &shuffled.related, pcfg.threshold_rule)
    })()
    .map_err(|e| e.at_stage("threshold"))?;

    // (5) Propagation.
    let mut report = propagate(
        model,
        &mixed,
        threshold,
        pcfg.pmi_k,
        seed::derive(cfg.seed, seed::tag::EVAL ^ 2),
    )
    .map_err(|e| e.at_stage("propagate"))?;
    report.metrics_before = Some(before.clone());

    // (6, 7) Continued training and re-evaluation.
    let continued = |data: PairedDataset| -> Result<(TrainState, Metrics)> {
        let mut next = cfg.clone();
        next.optimizer.steps = pretrained.state.step + pcfg.continue_steps;
        next.output_dir = None;
        let outcome = run(Trainer::new(next, pretrained.state.clone(), data)?, None)?;
        let metrics = evaluate(&outcome.state.model, &oracle, &eval, &cfg.eval)?;
        Ok((outcome.state, metrics))
    };
    if pcfg.control && pcfg.continue_training {
        let (_, m) = continued(known.clone()).map_err(|e| e.at_stage("control"))?;
        report.metrics_control = Some(m);
    }
    let state = if pcfg.continue_training {
        let (state, m) = (|| continued(known.union(&mixed, &report.predicted)?))().map_err(|e| e.at_stage("continue"))?;
        report.metrics_after = Some(m);
        state
    } else {
        report.metrics_after = Some(before);
        pretrained.state.clone()
    };
    Ok(PipelineOutcome { report, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{EncoderChoice, LinearGaussianOracle};
    use crate::model::JointKind;
    use approx::assert_relative_eq;

    #[test]
    fn separable_scores() {
        let s = [2.0, 3.0, -1.0, 0.0];
        let t = [true, true, false, false];
        let th = estimate_threshold(&s, &t, ThresholdRule::MaxF1).unwrap();
        assert_relative_eq!(th, 1.0);
        assert_eq!(Scores::of(&predict(&s, th), &t).f1, 1.0);
        assert_relative_eq!(estimate_threshold(&s, &t, ThresholdRule::MaxAccuracy).unwrap(), 1.0);
    }

    /// Exhaustive check against direct evaluation at every midpoint.
    #[test]
    fn interleaved_scores_match_brute_force() {
        let s = [0.1, 0.4, 0.2, 0.9, 0.5, 0.3, 0.7, 0.8];
        let t = [true, false, false, true, true, false, false, true];
        for rule in [ThresholdRule::MaxF1, ThresholdRule::MaxAccuracy] {
            let th = estimate_threshold(&s, &t, rule).unwrap();
            let mut sorted = s.to_vec();
            sorted.sort_by(f64::total_cmp);
            let best = sorted
                .windows(2)
                .map(|w| w[0] + 0.5 * (w[1] - w[0]))
                .map(|c| Scores::of(&predict(&s, c), &t).statistic(rule))
                .fold(f64::NEG_INFINITY, f64::max);
            let got = Scores::of(&predict(&s, th), &t);
            assert_relative_eq!(got.statistic(rule), best);
        }
        let f1 = Scores::of(&predict(&s, estimate_threshold(&s, &t, ThresholdRule::MaxF1).unwrap()), &t).f1;
        assert!(f1 < 1.0);
    }

    #[test]
    fn ties_prefer_the_larger_threshold() {
        // Cutting at 0.5 or 2.5 both give accuracy 0.75.
        let s = [0.0, 1.0, 2.0, 3.0];
        let t = [false, true, false, true];
        let th = estimate_threshold(&s, &t, ThresholdRule::MaxAccuracy).unwrap();
        assert_relative_eq!(th, 2.5);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            estimate_threshold(&[1.0, 1.0, 1.0], &[true, false, true], ThresholdRule::MaxF1),
            Err(Error::Degenerate(_))
        ));
        assert!(estimate_threshold(&[1.0, 2.0], &[true, true], ThresholdRule::MaxF1).is_err());
    }

    #[test]
    fn monotone_transform_keeps_the_partition() {
        let s = [0.3, -1.2, 2.2, 0.9, 1.7, -0.4];
        let t = [false, false, true, true, true, false];
        let a = predict(&s, estimate_threshold(&s, &t, ThresholdRule::MaxF1).unwrap());
        let e: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        let b = predict(&e, estimate_threshold(&e, &t, ThresholdRule::MaxF1).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn infinite_thresholds() {
        let t = [true, false, true, false];
        let all = Scores::of(&[true; 4], &t);
        assert_eq!((all.recall, all.precision), (1.0, 0.5));
        let none = Scores::of(&[false; 4], &t);
        assert_eq!((none.precision, none.f1), (0.0, 0.0));
    }

    #[test]
    fn pmi_matches_oracle_for_exact_posterior() {
        let o = LinearGaussianOracle::isotropic_example(2, 3, 0.5, 4).unwrap();
        let model = o.model(JointKind::ProductOfExperts, EncoderChoice::Exact).unwrap();
        let data = o.sample(20, 5).unwrap();
        let est = pmi(&model, &data, 30, 6).unwrap();
        for i in 0..20 {
            let exact = o.exact_pmi(data[0].row(i), data[1].row(i)).unwrap();
            // The joint term is exact; the marginals are IWAE estimates.
            assert!((est[i] - exact).abs() < 0.5, "{} vs {exact}", est[i]);
        }
    }

    #[test]
    fn tuple_pmi_equals_aligned_pmi() {
        let cfg = crate::train::tests::tiny();
        let g = Generator::new(cfg.data.spec.clone(), 2).unwrap();
        let ds = pair_random_with(g.generate_all(3).unwrap(), 3, 4).unwrap();
        let model = MultimodalModel::new(cfg.model.clone(), 5).unwrap();
        let a = pmi_tuples(&model, &ds, 6, 7).unwrap();
        let b = pmi(&model, &ds.aligned().unwrap(), 6, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-10);
        }
    }

    fn tiny_pipeline() -> (RunConfig, PropagationConfig) {
        let mut cfg = crate::train::tests::tiny();
        cfg.eval_every = 0;
        let pcfg = PropagationConfig {
            pretrain_percent: 20.0,
            pmi_k: 4,
            continue_steps: 5,
            mixed_pairs_per_instance: 2,
            control: true,
            ..PropagationConfig::default()
        };
        (cfg, pcfg)
    }

    #[test]
    fn full_share_leaves_nothing_to_propagate() {
        let (cfg, pcfg) = tiny_pipeline();
        let out = run_pipeline(&cfg, &PropagationConfig { pretrain_percent: 100.0, ..pcfg }).unwrap();
        let r = &out.report;
        assert_eq!((r.n_mixed, r.n_related, r.threshold), (0, 0, None));
        assert!(!r.f1_defined());
        assert_eq!(r.metrics_before, r.metrics_after);
        assert_eq!(out.state.step, cfg.optimizer.steps);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let (cfg, pcfg) = tiny_pipeline();
        let a = run_pipeline(&cfg, &pcfg).unwrap();
        let b = run_pipeline(&cfg, &pcfg).unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        assert_eq!(a.report.predicted, b.report.predicted);
        assert_eq!(a.state.model.params().arrays(), b.state.model.params().arrays());
        let r = &a.report;
        assert!(r.threshold.is_some() && r.f1_defined());
        assert_eq!(r.n_mixed, 48 * 2);
        assert!(r.metrics_control.is_some());
        assert_eq!(a.state.step, cfg.optimizer.steps + pcfg.continue_steps);
    }

    #[test]
    fn failures_carry_their_stage() {
        let (cfg, pcfg) = tiny_pipeline();
        let bad = PropagationConfig { pmi_k: 0, ..pcfg };
        assert!(matches!(run_pipeline(&cfg, &bad), Err(Error::Stage { stage: "config", .. })));
    }
}

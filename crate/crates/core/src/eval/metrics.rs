//! Latent accuracy and generative coherence, scored by the oracle classifier.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{pair_random, pair_related, PairedDataset, Unimodal};
use crate::error::{Error, Result};
use crate::estimators;
use crate::eval::classifier::{percent_equal, OracleClassifier};
use crate::model::{JointKind, MultimodalModel};
use crate::numerics::DenseArray;
use crate::pipeline::pmi;
use crate::seed::{self, tag};

/// Ridge strength of the latent probe.
pub const PROBE_RIDGE: f64 = 1e-3;
/// Fraction of items the probe is fitted on.
pub const PROBE_TRAIN_FRACTION: f64 = 0.8;

/// Held-out accuracy (percent) of a ridge-regularized one-vs-rest linear
/// classifier fitted in closed form on an 80/20 split of `features`.
pub fn linear_probe_accuracy(features: &DenseArray, labels: &[usize], seed: u64) -> Result<f64> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::shape("linear probe", &[n], &[labels.len()]));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Degenerate("linear probe needs at least two classes".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, tag::EVAL ^ 0x5052)));
    let n_train = ((n as f64) * PROBE_TRAIN_FRACTION).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!("{n} items are too few for an 80/20 split")));
    }
    let (train, test) = order.split_at(n_train);

    let d = features.cols() + 1;
    let design = |rows: &[usize]| DMatrix::from_fn(rows.len(), d, |i, j| if j + 1 == d { 1.0 } else { features.get(rows[i], j) });
    let x = design(train);
    let y = DMatrix::from_fn(train.len(), classes.len(), |i, c| f64::from(labels[train[i]] == classes[c]));
    let gram = x.transpose() * &x + DMatrix::identity(d, d) * PROBE_RIDGE;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("probe normal equations are singular".into()))?
        .solve(&(x.transpose() * y));
    let scores = design(test) * w;
    let pred: Vec<usize> = (0..test.len()).map(|i| classes[scores.row(i).transpose().argmax().0]).collect();
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    Ok(percent_equal(&pred, &truth))
}

/// One draw from `q_m(z | x_m)` per item.
pub fn unimodal_latents(model: &MultimodalModel, modality: &str, obs: &DenseArray, seed: u64) -> Result<DenseArray> {
    let q = model.encode_unimodal(modality, obs)?;
    let noise = crate::model::row_keyed_noise(obs, 1, model.latent_dim(), seed::derive(seed, tag::EVAL))?;
    let data = q
        .mean
        .data()
        .iter()
        .zip(q.log_var.data())
        .zip(noise.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    DenseArray::matrix(obs.rows(), model.latent_dim(), data)
}

/// Latent linear-probe accuracy for the unimodal encoder of `pool`'s modality.
pub fn latent_accuracy(model: &MultimodalModel, pool: &Unimodal, seed: u64) -> Result<f64> {
    let z = unimodal_latents(model, &pool.spec.name, &pool.obs, seed)?;
    linear_probe_accuracy(&z, &pool.labels, seed)
}

/// Percent of prior samples whose decoded modalities all get the same class.
pub fn joint_coherence(model: &MultimodalModel, n: usize, oracle: &OracleClassifier, seed: u64) -> Result<f64> {
    if n == 0 {
        return Ok(0.0);
    }
    let gen = model.joint_generate(n, seed)?;
    let preds = classify_all(model, oracle, &gen)?;
    let agree = (0..n).filter(|&i| preds.iter().all(|p| p[i] == preds[0][i])).count();
    Ok(100.0 * agree as f64 / n as f64)
}

fn classify_all(model: &MultimodalModel, oracle: &OracleClassifier, obs: &[DenseArray]) -> Result<Vec<Vec<usize>>> {
    model
        .config()
        .modalities
        .iter()
        .zip(obs)
        .map(|(ms, o)| oracle.classify(oracle.modality_index(&ms.name)?, o))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCoherence {
    pub source: String,
    pub target: String,
    pub percent: f64,
}

/// For every ordered modality pair, percent of source items whose
/// cross-generation is classified as the source item's class.
pub fn cross_coherence(model: &MultimodalModel, pools: &[Unimodal], oracle: &OracleClassifier, seed: u64) -> Result<Vec<CrossCoherence>> {
    let mut out = Vec::new();
    for src in pools {
        for tgt in &model.config().modalities {
            if tgt.name == src.spec.name {
                continue;
            }
            let gen = model.cross_generate(&src.spec.name, &tgt.name, &src.obs, seed)?;
            let pred = oracle.classify(oracle.modality_index(&tgt.name)?, &gen)?;
            out.push(CrossCoherence {
                source: src.spec.name.clone(),
                target: tgt.name.clone(),
                percent: percent_equal(&pred, &src.labels),
            });
        }
    }
    Ok(out)
}

/// Percent of related tuples whose joint-posterior reconstruction is
/// classified as the true class in every modality. Undefined for a mixture
/// of experts.
pub fn synergy_coherence(model: &MultimodalModel, related: &PairedDataset, oracle: &OracleClassifier, seed: u64) -> Result<f64> {
    if model.joint_kind() == JointKind::MixtureOfExperts {
        return Err(Error::Unsupported(
            "synergy coherence is not meaningful for a mixture-of-experts posterior".into(),
        ));
    }
    let obs = related.aligned()?;
    let recon = model.joint_reconstruct(&obs, seed)?;
    let preds = classify_all(model, oracle, &recon)?;
    let truth = related.labels(0);
    let hits = (0..truth.len()).filter(|&i| preds.iter().all(|p| p[i] == truth[i])).count();
    Ok(100.0 * hits as f64 / truth.len().max(1) as f64)
}

/// Held-out data for evaluation: one pool per modality plus related and
/// randomly mixed pairings of it.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub pools: Vec<Unimodal>,
    pub related: PairedDataset,
    pub mixed: PairedDataset,
}

impl EvalSet {
    pub fn new(pools: Vec<Unimodal>, seed: u64) -> Result<Self> {
        Ok(Self {
            related: pair_related(pools.clone(), 1, seed)?,
            mixed: pair_random(pools.clone(), seed)?,
            pools,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub joint_samples: usize,
    pub pmi_k: usize,
    pub loglik_k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            joint_samples: 1000,
            pmi_k: 30,
            loglik_k: 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Per modality, in model order.
    pub latent_acc: Vec<f64>,
    pub joint_coh: f64,
    pub cross_coh: Vec<CrossCoherence>,
    pub synergy_coh: Option<f64>,
    pub mean_pmi_related: f64,
    pub mean_pmi_unrelated: f64,
    /// Mean IWAE estimate of `log p` on related held-out tuples.
    pub test_loglik: f64,
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

pub const METRICS_CSV_HEADER: &str = "run_id,step,latent_acc_m1,latent_acc_m2,joint_coh,cross_coh_12,cross_coh_21,synergy_coh,mean_pmi_related,mean_pmi_unrelated";

impl Metrics {
    /// Cross coherence from the first modality to the second (`12`) or back.
    pub fn cross(&self, source: usize, target: usize) -> Option<f64> {
        let names: Vec<&str> = self.cross_coh.iter().map(|c| c.source.as_str()).collect();
        let mut seen: Vec<&str> = Vec::new();
        for n in names {
            if !seen.contains(&n) {
                seen.push(n);
            }
        }
        let (s, t) = (seen.get(source)?, seen.get(target)?);
        self.cross_coh.iter().find(|c| c.source == *s && c.target == *t).map(|c| c.percent)
    }

    /// Mean over both directions between the first two modalities.
    pub fn mean_cross(&self) -> f64 {
        match (self.cross(0, 1), self.cross(1, 0)) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            _ => f64::NAN,
        }
    }

    /// Every scalar metric by name, including those outside the CSV schema.
    /// Absent values (synergy for a mixture) are `None`.
    pub fn named(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("latent_acc_m1", self.latent_acc.first().copied()),
            ("latent_acc_m2", self.latent_acc.get(1).copied()),
            ("joint_coh", Some(self.joint_coh)),
            ("cross_coh_12", self.cross(0, 1)),
            ("cross_coh_21", self.cross(1, 0)),
            ("cross_coh_mean", Some(self.mean_cross())),
            ("synergy_coh", self.synergy_coh),
            ("mean_pmi_related", Some(self.mean_pmi_related)),
            ("mean_pmi_unrelated", Some(self.mean_pmi_unrelated)),
            ("test_loglik", Some(self.test_loglik)),
        ]
    }

    pub fn csv_row(&self, run_id: &str, step: usize) -> String {
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
        [
            run_id.to_string(),
            step.to_string(),
            opt(self.latent_acc.first().copied()),
            opt(self.latent_acc.get(1).copied()),
            fmt(self.joint_coh),
            opt(self.cross(0, 1)),
            opt(self.cross(1, 0)),
            opt(self.synergy_coh),
            fmt(self.mean_pmi_related),
            fmt(self.mean_pmi_unrelated),
        ]
        .join(",")
    }
}

/// Fixed-precision formatting so CSV output is stable across platforms.
pub fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// All metrics on `eval`.
pub fn evaluate(model: &MultimodalModel, oracle: &OracleClassifier, eval: &EvalSet, cfg: &EvalConfig) -> Result<Metrics> {
    let seed = cfg.seed;
    let latent_acc = eval
        .pools
        .iter()
        .map(|p| latent_accuracy(model, p, seed))
        .collect::<Result<Vec<_>>>()?;
    let joint_coh = joint_coherence(model, cfg.joint_samples, oracle, seed)?;
    let cross_coh = cross_coherence(model, &eval.pools, oracle, seed)?;
    let synergy_coh = match model.joint_kind() {
        JointKind::MixtureOfExperts => None,
        _ => Some(synergy_coherence(model, &eval.related, oracle, seed)?),
    };
    let scores = pmi(model, &eval.mixed.aligned()?, cfg.pmi_k, seed)?;
    let pick = |want: bool| mean(scores.iter().zip(&eval.mixed.related).filter(|(_, &r)| r == want).map(|(s, _)| *s));
    let ll = estimators::iwae(model, &eval.related.aligned()?, cfg.loglik_k, seed)?;
    Ok(Metrics {
        latent_acc,
        joint_coh,
        cross_coh,
        synergy_coh,
        mean_pmi_related: pick(true),
        mean_pmi_unrelated: pick(false),
        test_loglik: mean(ll.into_iter()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FactorSpec, Generator};
    use crate::model::ModelConfig;

    #[test]
    fn probe_on_clustered_latents_is_perfect() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let onehot: Vec<f64> = labels.iter().flat_map(|&l| (0..4).map(move |c| f64::from(c == l))).collect();
        let y = DenseArray::matrix(200, 4, onehot).unwrap();
        assert_eq!(linear_probe_accuracy(&y, &labels, 1).unwrap(), 100.0);
    }

    #[test]
    fn probe_on_noise_is_near_chance() {
        let n = 5000;
        let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let x = DenseArray::matrix(n, 3, seed::standard_normals(4, n * 3)).unwrap();
        let acc = linear_probe_accuracy(&x, &labels, 2).unwrap();
        let se = 100.0 * (0.2f64 * 0.8 / 1000.0).sqrt();
        assert!((acc - 20.0).abs() < 4.0 * se, "{acc}");
    }

    #[test]
    fn single_class_probe_is_an_error() {
        let x = DenseArray::zeros(&[10, 2]);
        assert!(matches!(linear_probe_accuracy(&x, &[1; 10], 0), Err(Error::Degenerate(_))));
    }

    /// Decoders ignoring `z` and emitting the class-0 prototype.
    fn prototype_model(g: &Generator, kind: JointKind) -> MultimodalModel {
        let spec = g.spec();
        let cfg = ModelConfig {
            latent_dim: 2,
            hidden: vec![],
            joint_kind: kind,
            modalities: spec.modalities.clone(),
        };
        let mut model = MultimodalModel::new(cfg, 1).unwrap();
        for (m, ms) in spec.modalities.iter().enumerate() {
            let map = g.map(m);
            let proto: Vec<f64> = (0..ms.obs_dim).map(|r| map.get(r, 0)).collect();
            model.set_param(&format!("dec.{}.l0.w", ms.name), DenseArray::zeros(&[2, ms.obs_dim])).unwrap();
            model.set_param(&format!("dec.{}.l0.b", ms.name), DenseArray::vector(proto)).unwrap();
        }
        model
    }

    fn setup() -> (Generator, OracleClassifier, EvalSet) {
        let spec = FactorSpec {
            items_per_modality: 300,
            ..FactorSpec::default()
        };
        let g = Generator::new(spec, 5).unwrap();
        let oracle = OracleClassifier::new(&g).unwrap();
        let eval = EvalSet::new(g.generate_all(6).unwrap(), 7).unwrap();
        (g, oracle, eval)
    }

    #[test]
    fn fixed_prototype_is_fully_coherent() {
        let (g, oracle, eval) = setup();
        let model = prototype_model(&g, JointKind::ProductOfExperts);
        assert_eq!(joint_coherence(&model, 200, &oracle, 1).unwrap(), 100.0);
        let syn = synergy_coherence(&model, &eval.related, &oracle, 1).unwrap();
        // Everything decodes to class 0, so exactly the class-0 tuples hit.
        let share = 100.0 * eval.related.labels(0).iter().filter(|&&l| l == 0).count() as f64 / eval.related.len() as f64;
        assert!((syn - share).abs() < 1e-9);
    }

    #[test]
    fn synergy_is_unsupported_for_mixtures() {
        let (g, oracle, eval) = setup();
        let model = prototype_model(&g, JointKind::MixtureOfExperts);
        assert!(matches!(
            synergy_coherence(&model, &eval.related, &oracle, 1),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn untrained_metrics_are_valid_percentages_and_deterministic() {
        let (g, oracle, eval) = setup();
        let cfg = ModelConfig {
            latent_dim: 4,
            hidden: vec![16],
            joint_kind: JointKind::ProductOfExperts,
            modalities: g.spec().modalities.clone(),
        };
        let model = MultimodalModel::new(cfg, 3).unwrap();
        let ec = EvalConfig {
            joint_samples: 200,
            pmi_k: 4,
            loglik_k: 4,
            seed: 9,
        };
        let a = evaluate(&model, &oracle, &eval, &ec).unwrap();
        let b = evaluate(&model, &oracle, &eval, &ec).unwrap();
        assert_eq!(a, b);
        let mut all = a.latent_acc.clone();
        all.extend([a.joint_coh, a.synergy_coh.unwrap()]);
        all.extend(a.cross_coh.iter().map(|c| c.percent));
        assert!(all.iter().all(|v| (0.0..=100.0).contains(v)));
        assert_eq!(a.cross_coh.len(), 2);
        let row = a.csv_row("r", 0);
        assert_eq!(row.split(',').count(), METRICS_CSV_HEADER.split(',').count());
    }

    #[test]
    fn blank_synergy_column_for_mixtures() {
        let m = Metrics {
            latent_acc: vec![1.0, 2.0],
            cross_coh: vec![
                CrossCoherence { source: "a".into(), target: "b".into(), percent: 3.0 },
                CrossCoherence { source: "b".into(), target: "a".into(), percent: 4.0 },
            ],
            ..Metrics::default()
        };
        let row = m.csv_row("x", 5);
        assert_eq!(row, "x,5,1.000000,2.000000,0.000000,3.000000,4.000000,,0.000000,0.000000");
        assert_eq!(m.mean_cross(), 3.5);
    }
}

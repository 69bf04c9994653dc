//! Run configuration, Adam, the training loop and checkpoints.
//!
//! Every random draw of step `t` (batch, negatives, estimator noise) is a
//! pure function of `(seed, t)`, so a checkpoint only needs the step, the
//! parameters and the moment estimates to resume bit-exactly.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{pair_related, subset, FactorSpec, Generator, PairedDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalSet, Metrics, OracleClassifier};
use crate::eval::metrics::{METRICS_CSV_HEADER, METRICS_SCHEMA_VERSION};
use crate::model::{JointKind, ModelConfig, MultimodalModel};
use crate::numerics::{DenseArray, ParamId, ParamStore, Tape};
use crate::objective::{draw_negatives, final_objective_on, ObjectiveConfig};
use crate::seed::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 5000,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub spec: FactorSpec,
    /// Fixes the mixing maps and every generated item.
    pub seed: u64,
    /// Held-out items per modality for evaluation.
    pub test_items: usize,
    pub pairs_per_instance: usize,
    /// Percent of each unimodal pool used for training.
    pub percent: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: FactorSpec::default(),
            seed: 1,
            test_items: 500,
            pairs_per_instance: 30,
            percent: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Seeds model initialization, batches, negatives and estimator noise.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
    /// Evaluate every this many steps (and after the last); 0 evaluates only
    /// at the end.
    pub eval_every: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Weight of the unimodal-to-joint KL term for an explicit joint encoder.
    pub alignment_weight: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
            eval_every: 500,
            checkpoint_every: 0,
            alignment_weight: 1.0,
            output_dir: None,
        }
    }
}

pub const SEED_ENV: &str = "CMVAE_SEED";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `CMVAE_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.data.spec.validate()?;
        if self.model.modalities != self.data.spec.modalities {
            return Err(Error::invalid("model and data disagree on the modalities"));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.epsilon <= 0.0 {
            return Err(Error::invalid("Adam needs β₁, β₂ in [0, 1) and ε > 0"));
        }
        if o.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        if !self.objective.is_baseline() && o.batch_size <= self.objective.num_negatives {
            return Err(Error::invalid(format!(
                "batch of {} cannot supply {} negatives",
                o.batch_size, self.objective.num_negatives
            )));
        }
        if !(self.data.percent > 0.0 && self.data.percent <= 100.0) {
            return Err(Error::invalid("data percent must be in (0, 100]"));
        }
        if self.alignment_weight < 0.0 {
            return Err(Error::invalid("alignment_weight must be ≥ 0"));
        }
        Ok(())
    }
}

/// Generated data and the classifier that scores it.
pub struct Experiment {
    pub generator: Generator,
    pub oracle: OracleClassifier,
    /// Related training tuples, after subsetting.
    pub train: PairedDataset,
    pub eval: EvalSet,
}

impl Experiment {
    pub fn build(data: &DataConfig) -> Result<Self> {
        let generator = Generator::new(data.spec.clone(), data.seed)?;
        let oracle = OracleClassifier::new(&generator)?;
        let pools = generator.generate_all(seed::derive(data.seed, 1))?;
        let full = pair_related(pools, data.pairs_per_instance, data.seed)?;
        let train = if data.percent < 100.0 { subset(&full, data.percent, data.seed)? } else { full };
        let eval = held_out(&generator, data)?;
        Ok(Self { generator, oracle, train, eval })
    }
}

/// Test pools and their pairings, independent of the training split.
pub fn held_out(generator: &Generator, data: &DataConfig) -> Result<EvalSet> {
    let test = (0..data.spec.modalities.len())
        .map(|m| generator.generate(m, data.test_items, seed::derive(data.seed, 2)))
        .collect::<Result<Vec<_>>>()?;
    EvalSet::new(test, seed::derive(data.seed, 3))
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<DenseArray>,
    pub v: Vec<DenseArray>,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<DenseArray> = params.arrays().iter().map(|a| DenseArray::zeros(a.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[DenseArray], cfg: &OptimizerConfig) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let id = ParamId(i);
            let g = grads[i].data();
            let mut value = params.get(id).clone();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, p) in value.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                *p -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.epsilon);
            }
            params.set(id, value)?;
        }
        Ok(())
    }
}

/// Everything needed to resume training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub model: MultimodalModel,
    pub adam: Adam,
}

const CKPT_MAGIC: &[u8; 8] = b"CMVAECKP";
const CKPT_VERSION: u32 = 1;

impl TrainState {
    pub fn new(model: MultimodalModel) -> Self {
        let adam = Adam::new(model.params());
        Self { step: 0, model, adam }
    }

    /// Little-endian: magic, version, step, Adam count, model config JSON,
    /// then per parameter its name, shape, values and both moments.
    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        out.write_all(CKPT_MAGIC)?;
        out.write_all(&CKPT_VERSION.to_le_bytes())?;
        out.write_all(&(self.step as u64).to_le_bytes())?;
        out.write_all(&self.adam.t.to_le_bytes())?;
        let cfg = serde_json::to_vec(self.model.config())?;
        out.write_all(&(cfg.len() as u32).to_le_bytes())?;
        out.write_all(&cfg)?;
        let params = self.model.params();
        out.write_all(&(params.len() as u32).to_le_bytes())?;
        for (i, (name, a)) in params.names().iter().zip(params.arrays()).enumerate() {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(a.shape().len() as u32).to_le_bytes())?;
            for &d in a.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for arr in [a, &self.adam.m[i], &self.adam.v[i]] {
                for v in arr.data() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = BufReader::new(input);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = read_u64(&mut r)? as usize;
        let t = read_u64(&mut r)?;
        let len = read_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; len];
        r.read_exact(&mut cfg)?;
        let config: ModelConfig = serde_json::from_slice(&cfg)?;
        let count = read_u32(&mut r)? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| Ok(read_u64(&mut r)? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut arrays = (0..3).map(|_| {
                let data = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
                DenseArray::new(shape.clone(), data)
            });
            params.add(name, arrays.next().expect("3")?);
            m.push(arrays.next().expect("3")?);
            v.push(arrays.next().expect("3")?);
        }
        let model = MultimodalModel::with_params(config, params)?;
        Ok(Self { step, model, adam: Adam { m, v, t } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        self.write(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub term1: f64,
    pub term2: Option<f64>,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,term1,term2";

impl StepLog {
    pub fn csv_row(&self) -> String {
        use crate::eval::metrics::fmt;
        format!("{},{},{},{}", self.step, fmt(self.loss), fmt(self.term1), self.term2.map(fmt).unwrap_or_default())
    }
}

/// The header comment carried by every CSV this crate writes.
pub fn schema_comment(kind: &str) -> String {
    format!("# cmvae {kind} schema v{METRICS_SCHEMA_VERSION}")
}

/// Drives optimization of one model on one dataset.
pub struct Trainer {
    pub cfg: RunConfig,
    pub state: TrainState,
    pub data: PairedDataset,
}

impl Trainer {
    pub fn new(cfg: RunConfig, state: TrainState, data: PairedDataset) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        Ok(Self { cfg, state, data })
    }

    /// A freshly initialized model for `cfg`.
    pub fn fresh(cfg: RunConfig, data: PairedDataset) -> Result<Self> {
        let model = MultimodalModel::new(cfg.model.clone(), seed::derive(cfg.seed, tag::INIT))?;
        Self::new(cfg, TrainState::new(model), data)
    }

    pub fn model(&self) -> &MultimodalModel {
        &self.state.model
    }

    /// Tuple indices of step `t`'s batch.
    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.data.len();
        let b = self.cfg.optimizer.batch_size.min(n);
        let mut rng = seed::rng(seed::derive(seed::derive(self.cfg.seed, tag::BATCH), step as u64));
        index::sample(&mut rng, n, b).into_vec()
    }

    /// Objective value and per-parameter gradients at the current step
    /// without updating anything.
    pub fn loss_and_gradients(&self) -> Result<(StepLog, Vec<DenseArray>)> {
        let step = self.state.step;
        let idx = self.batch_indices(step);
        let batch = self.data.gather(&idx)?;
        let model = &self.state.model;
        let obj = &self.cfg.objective;
        let noise = seed::derive(seed::derive(self.cfg.seed, tag::JOINT), step as u64);
        let negatives = if obj.is_baseline() {
            crate::objective::NegativeSet { replace: vec![vec![Vec::new(); idx.len()]; model.num_modalities()] }
        } else {
            draw_negatives(idx.len(), model.num_modalities(), obj.num_negatives, noise)?
        };
        let tape = Tape::new();
        let p = model.params().bind(&tape);
        let value = final_objective_on(model, &p, &batch, &negatives, obj, noise)?;
        let mut loss = value.loss;
        if model.joint_kind() == JointKind::ExplicitJoint && self.cfg.alignment_weight > 0.0 {
            loss = loss.add(model.unimodal_alignment(&p, &batch)?.scale(self.cfg.alignment_weight))?;
        }
        let grads = p.gradients(&tape.backward(loss)?);
        let log = StepLog {
            step,
            loss: value.loss.item(),
            term1: value.term1,
            term2: value.term2,
        };
        Ok((log, grads))
    }

    /// One Adam step. A non-finite loss or gradient leaves the state
    /// untouched and is reported as [`Error::NonFinite`].
    pub fn step(&mut self) -> Result<StepLog> {
        let (log, grads) = self.loss_and_gradients()?;
        if !log.loss.is_finite() || !grads.iter().all(DenseArray::all_finite) {
            return Err(Error::NonFinite(format!("loss or gradient at step {}", log.step)));
        }
        let opt = self.cfg.optimizer;
        self.state.adam.update(self.state.model.params_mut(), &grads, &opt)?;
        self.state.step += 1;
        Ok(log)
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepLog>,
    pub metrics: Vec<(usize, Metrics)>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.metrics.last().map(|(_, m)| m)
    }
}

/// Appends lines to a CSV, writing the schema comment and header first if
/// the file is new.
pub fn append_csv(path: &Path, kind: &str, header: &str, rows: &[String]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let fresh = !path.exists();
    let mut f = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(f, "{}", schema_comment(kind))?;
        writeln!(f, "{header}")?;
    }
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

/// Trains `trainer` up to `cfg.optimizer.steps` total steps, evaluating on
/// `eval` at the configured cadence and writing logs, metrics and
/// checkpoints under `output_dir` when set.
pub fn run(mut trainer: Trainer, exp: Option<(&OracleClassifier, &EvalSet)>) -> Result<TrainOutcome> {
    let cfg = trainer.cfg.clone();
    let out = cfg.output_dir.clone();
    let total = cfg.optimizer.steps;
    let mut log = Vec::new();
    let mut metrics = Vec::new();
    let ckpt = |dir: &Path, step: usize| dir.join("checkpoints").join(format!("step_{step:06}.ckpt"));

    if let Some(dir) = &out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), cfg.to_json()?)?;
    }
    let mut last_good: Option<PathBuf> = None;
    let save = |state: &TrainState, path: PathBuf| -> Result<PathBuf> {
        state.save(&path)?;
        Ok(path)
    };
    if let Some(dir) = &out {
        if trainer.state.step == 0 || total == trainer.state.step {
            last_good = Some(save(&trainer.state, ckpt(dir, trainer.state.step))?);
        }
    }

    let evaluate_now = |t: &Trainer| -> Result<Option<Metrics>> {
        match exp {
            Some((oracle, eval)) => Ok(Some(evaluate(t.model(), oracle, eval, &cfg.eval)?)),
            None => Ok(None),
        }
    };

    while trainer.state.step < total {
        let entry = match trainer.step() {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => {
                let step = trainer.state.step;
                let path = match (&out, &last_good) {
                    (_, Some(p)) => p.clone(),
                    (Some(dir), None) => save(&trainer.state, dir.join("last_good.ckpt"))?,
                    (None, None) => {
                        let p = std::env::temp_dir().join(format!("cmvae-{}-last-good.ckpt", cfg.run_id));
                        save(&trainer.state, p)?
                    }
                };
                return Err(Error::NumericalAbort {
                    step,
                    checkpoint: path.display().to_string(),
                });
            }
            Err(e) => return Err(e),
        };
        if let Some(dir) = &out {
            append_csv(&dir.join("train_log.csv"), "train log", TRAIN_LOG_HEADER, &[entry.csv_row()])?;
        }
        log.push(entry);
        let step = trainer.state.step;
        let due_eval = step == total || (cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every));
        if due_eval {
            if let Some(m) = evaluate_now(&trainer)? {
                if let Some(dir) = &out {
                    append_csv(&dir.join("metrics.csv"), "metrics", METRICS_CSV_HEADER, &[m.csv_row(&cfg.run_id, step)])?;
                }
                metrics.push((step, m));
            }
        }
        if let Some(dir) = &out {
            let due_ckpt = step == total || (cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every));
            if due_ckpt {
                last_good = Some(save(&trainer.state, ckpt(dir, step))?);
            }
        }
    }
    if let Some(dir) = &out {
        trainer.state.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        state: trainer.state,
        log,
        metrics,
    })
}

/// Builds the data for `cfg`, trains a fresh model and evaluates it.
pub fn train(cfg: &RunConfig) -> Result<(TrainOutcome, Experiment)> {
    cfg.validate()?;
    let exp = Experiment::build(&cfg.data)?;
    let trainer = Trainer::fresh(cfg.clone(), exp.train.clone())?;
    let outcome = run(trainer, Some((&exp.oracle, &exp.eval)))?;
    Ok((outcome, exp))
}

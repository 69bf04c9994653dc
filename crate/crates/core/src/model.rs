//! Multimodal VAEs built from small tanh perceptrons.
//!
//! One Gaussian encoder and one decoder per modality, plus an optional joint
//! encoder. The joint posterior `q(z | x_1..x_M)` is one of
//!
//! * [`JointKind::ExplicitJoint`]: a separate network over the concatenated
//!   observations,
//! * [`JointKind::ProductOfExperts`]: the product of the unimodal posteriors
//!   and the `N(0, I)` prior,
//! * [`JointKind::MixtureOfExperts`]: the uniform mixture of the unimodal
//!   posteriors, sampled stratified (`K / M` draws per component).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distributions::{
    standard_normal_log_prob, DiagonalGaussian, FactorBernoulli, Likelihood, LOG_VAR_FLOOR,
};
use crate::error::{Error, Result};
use crate::numerics::{Bound, DenseArray, ParamId, ParamStore, Tape, Var};
use crate::seed::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    Bernoulli,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub obs_dim: usize,
    pub likelihood: LikelihoodKind,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, obs_dim: usize, likelihood: LikelihoodKind) -> Self {
        Self {
            name: name.into(),
            obs_dim,
            likelihood,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    ExplicitJoint,
    ProductOfExperts,
    MixtureOfExperts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub joint_kind: JointKind,
    pub modalities: Vec<ModalitySpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: vec![64, 64],
            joint_kind: JointKind::MixtureOfExperts,
            modalities: vec![
                ModalitySpec::new("m1", 16, LikelihoodKind::Bernoulli),
                ModalitySpec::new("m2", 16, LikelihoodKind::Gaussian),
            ],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be ≥ 1"));
        }
        if self.modalities.len() < 2 {
            return Err(Error::invalid("a multimodal model needs at least two modalities"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.obs_dim == 0 {
                return Err(Error::invalid(format!("modality `{}` has obs_dim 0", m.name)));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::invalid(format!("duplicate modality name `{}`", m.name)));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.affine(p.var(self.w), p.var(self.b))
    }
}

/// Affine layers with `tanh` between them (none after the last).
#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn forward<'t>(&self, p: &Bound<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(p, x)?;
            if i + 1 < n {
                x = x.tanh();
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct GaussianEncoder {
    trunk: Mlp,
    mean: Linear,
    log_var: Linear,
}

impl GaussianEncoder {
    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<DiagonalGaussian<'t>> {
        let mut h = self.trunk.forward(p, x)?;
        if !self.trunk.layers.is_empty() {
            h = h.tanh();
        }
        DiagonalGaussian::new(self.mean.forward(p, h)?, self.log_var.forward(p, h)?)
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    net: Mlp,
    kind: LikelihoodKind,
    log_var: Option<ParamId>,
}

impl Decoder {
    fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Likelihood<'t>> {
        let out = self.net.forward(p, z)?;
        Ok(match self.kind {
            LikelihoodKind::Bernoulli => Likelihood::Bernoulli(FactorBernoulli::new(out)),
            LikelihoodKind::Gaussian => {
                let lv = p.var(self.log_var.expect("gaussian decoder has log_var"));
                let shape = out.shape();
                let zeros = z.tape().constant(DenseArray::zeros(&shape));
                let log_var = zeros.add_row(lv.clamp(LOG_VAR_FLOOR, f64::INFINITY))?;
                Likelihood::Gaussian(DiagonalGaussian::new(out, log_var)?)
            }
        })
    }

    /// Row `n` is `log p(target[target_rows[n]] | z[z_rows[n]])`, decoding
    /// each row of `z` once however often it is referenced.
    fn log_prob_indexed<'t>(
        &self,
        p: &Bound<'t>,
        z: Var<'t>,
        target: Var<'t>,
        z_rows: &[usize],
        target_rows: &[usize],
    ) -> Result<Var<'t>> {
        let out = self.net.forward(p, z)?;
        let tape = z.tape();
        match self.kind {
            LikelihoodKind::Bernoulli => {
                let logits = FactorBernoulli::new(out).logits();
                tape.indexed_bernoulli_log_prob(logits, target, z_rows, target_rows)
            }
            LikelihoodKind::Gaussian => {
                let lv = p.var(self.log_var.expect("gaussian decoder has log_var"));
                let lv = lv.clamp(LOG_VAR_FLOOR, f64::INFINITY);
                tape.indexed_gaussian_log_prob(out, lv, target, z_rows, target_rows)
            }
        }
    }
}

struct Init {
    rng_seed: u64,
    counter: u64,
}

impl Init {
    fn weights(&mut self, inp: usize, out: usize, zero: bool) -> DenseArray {
        self.counter += 1;
        if zero {
            return DenseArray::zeros(&[inp, out]);
        }
        let std = (1.0 / inp as f64).sqrt();
        let data = seed::standard_normals(seed::derive(self.rng_seed, self.counter), inp * out)
            .into_iter()
            .map(|v| v * std)
            .collect();
        DenseArray::matrix(inp, out, data).expect("sized")
    }
}

fn build_linear(params: &mut ParamStore, init: &mut Init, name: &str, inp: usize, out: usize, zero: bool) -> Linear {
    Linear {
        w: params.add(format!("{name}.w"), init.weights(inp, out, zero)),
        b: params.add(format!("{name}.b"), DenseArray::zeros(&[out])),
    }
}

fn build_mlp(params: &mut ParamStore, init: &mut Init, prefix: &str, widths: &[usize]) -> Mlp {
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| build_linear(params, init, &format!("{prefix}.l{i}"), w[0], w[1], false))
        .collect();
    Mlp { layers }
}

fn build_encoder(params: &mut ParamStore, init: &mut Init, prefix: &str, input: usize, hidden: &[usize], latent: usize) -> GaussianEncoder {
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    let trunk = build_mlp(params, init, prefix, &widths);
    let last = *widths.last().expect("non-empty");
    GaussianEncoder {
        trunk,
        // Zero heads: every encoder starts at N(0, I).
        mean: build_linear(params, init, &format!("{prefix}.mean"), last, latent, true),
        log_var: build_linear(params, init, &format!("{prefix}.log_var"), last, latent, true),
    }
}

/// Plain-value Gaussian parameters, one row per item.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: DenseArray,
    pub log_var: DenseArray,
}

/// Draws from a joint proposal, laid out as `[tuples · K]` rows.
pub(crate) struct ProposalDraws<'t> {
    /// `log p(z) + Σ_m log p(x_m | z) − log q(z | ·)`, shape `[P, K]`.
    pub log_weights: Var<'t>,
    /// Number of equal contiguous column blocks drawn from separate mixture
    /// components; 1 for a single proposal.
    pub strata: usize,
}

#[derive(Clone, Debug)]
pub struct MultimodalModel {
    config: ModelConfig,
    params: ParamStore,
    encoders: Vec<GaussianEncoder>,
    decoders: Vec<Decoder>,
    joint_encoder: Option<GaussianEncoder>,
}

impl MultimodalModel {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            rng_seed: seed::derive(init_seed, tag::INIT),
            counter: 0,
        };
        let l = config.latent_dim;
        let mut encoders = Vec::new();
        for m in &config.modalities {
            encoders.push(build_encoder(&mut params, &mut init, &format!("enc.{}", m.name), m.obs_dim, &config.hidden, l));
        }
        let mut decoders = Vec::new();
        for m in &config.modalities {
            let mut widths = vec![l];
            widths.extend_from_slice(&config.hidden);
            widths.push(m.obs_dim);
            let net = build_mlp(&mut params, &mut init, &format!("dec.{}", m.name), &widths);
            let log_var = (m.likelihood == LikelihoodKind::Gaussian)
                .then(|| params.add(format!("dec.{}.log_var", m.name), DenseArray::zeros(&[m.obs_dim])));
            decoders.push(Decoder {
                net,
                kind: m.likelihood,
                log_var,
            });
        }
        let joint_encoder = (config.joint_kind == JointKind::ExplicitJoint).then(|| {
            let input = config.modalities.iter().map(|m| m.obs_dim).sum();
            build_encoder(&mut params, &mut init, "joint", input, &config.hidden, l)
        });
        Ok(Self {
            config,
            params,
            encoders,
            decoders,
            joint_encoder,
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.load_params(&params)?;
        Ok(model)
    }

    /// Copies every parameter of `self` from `source`, matching by name.
    pub fn load_params(&mut self, source: &ParamStore) -> Result<()> {
        let names = self.params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let src = source
                .by_name(name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            self.params.set(ParamId(i), source.get(src).clone())?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_modalities(&self) -> usize {
        self.config.modalities.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn joint_kind(&self) -> JointKind {
        self.config.joint_kind
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.config
            .modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    /// Sets one named parameter; used to build analytic test models.
    pub fn set_param(&mut self, name: &str, value: DenseArray) -> Result<()> {
        let id = self
            .params
            .by_name(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))?;
        self.params.set(id, value)
    }

    fn check_obs(&self, m: usize, obs: &DenseArray) -> Result<()> {
        let spec = self
            .config
            .modalities
            .get(m)
            .ok_or_else(|| Error::UnknownModality(format!("#{m}")))?;
        if obs.shape().len() != 2 || obs.cols() != spec.obs_dim {
            return Err(Error::shape("observations", obs.shape(), &[obs.rows(), spec.obs_dim]));
        }
        Ok(())
    }

    pub(crate) fn encode_var<'t>(&self, p: &Bound<'t>, m: usize, obs: Var<'t>) -> Result<DiagonalGaussian<'t>> {
        self.encoders[m].forward(p, obs)
    }

    pub(crate) fn decode_var<'t>(&self, p: &Bound<'t>, m: usize, z: Var<'t>) -> Result<Likelihood<'t>> {
        self.decoders[m].forward(p, z)
    }

    pub(crate) fn encode_joint_var<'t>(&self, p: &Bound<'t>, obs: &[Var<'t>]) -> Result<DiagonalGaussian<'t>> {
        let enc = self
            .joint_encoder
            .as_ref()
            .ok_or_else(|| Error::Unsupported("model has no joint encoder".into()))?;
        let x = obs[0].tape().concat_cols(obs)?;
        enc.forward(p, x)
    }

    /// The joint posterior for aligned rows of every modality.
    pub(crate) fn joint_posterior_var<'t>(&self, p: &Bound<'t>, obs: &[Var<'t>]) -> Result<DiagonalGaussian<'t>> {
        match self.config.joint_kind {
            JointKind::ExplicitJoint => self.encode_joint_var(p, obs),
            JointKind::ProductOfExperts => {
                let experts = obs
                    .iter()
                    .enumerate()
                    .map(|(m, o)| self.encode_var(p, m, *o))
                    .collect::<Result<Vec<_>>>()?;
                DiagonalGaussian::product(&experts, true)
            }
            JointKind::MixtureOfExperts => Err(Error::Unsupported(
                "a mixture-of-experts posterior is not a single Gaussian".into(),
            )),
        }
    }

    /// `q_m(z | obs)` for a batch.
    pub fn encode_unimodal(&self, modality: &str, obs: &DenseArray) -> Result<GaussianParams> {
        let m = self.modality_index(modality)?;
        self.check_obs(m, obs)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let q = self.encode_var(&p, m, tape.constant(obs.clone()))?;
        Ok(GaussianParams {
            mean: q.mean.value(),
            log_var: q.log_var.value(),
        })
    }

    /// Per-modality likelihood means at latent rows `z`.
    pub fn decode_all(&self, z: &DenseArray) -> Result<Vec<DenseArray>> {
        if z.shape().len() != 2 || z.cols() != self.latent_dim() {
            return Err(Error::shape("decode_all", z.shape(), &[z.rows(), self.latent_dim()]));
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let zv = tape.constant(z.clone());
        (0..self.num_modalities())
            .map(|m| Ok(self.decode_var(&p, m, zv)?.mean().value()))
            .collect()
    }

    /// `log p(x_m | z)` per modality, one value per row.
    pub fn decoder_log_likelihoods(&self, z: &DenseArray, obs: &[DenseArray]) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let zv = tape.constant(z.clone());
        obs.iter()
            .enumerate()
            .map(|(m, o)| {
                self.check_obs(m, o)?;
                let lp = self.decode_var(&p, m, zv)?.log_prob(tape.constant(o.clone()))?;
                Ok(lp.value().into_data())
            })
            .collect()
    }

    /// Decodes `z ~ N(0, I)` into likelihood means for every modality.
    pub fn joint_generate(&self, n: usize, seed: u64) -> Result<Vec<DenseArray>> {
        if n == 0 {
            return Ok(self
                .config
                .modalities
                .iter()
                .map(|m| DenseArray::zeros(&[0, m.obs_dim]))
                .collect());
        }
        let l = self.latent_dim();
        let z = DenseArray::matrix(n, l, seed::standard_normals(seed::derive(seed, tag::GENERATE), n * l))?;
        self.decode_all(&z)
    }

    /// One draw from `q_source(z | obs)` per row, decoded into the target's mean.
    pub fn cross_generate(&self, source: &str, target: &str, obs: &DenseArray, seed: u64) -> Result<DenseArray> {
        let s = self.modality_index(source)?;
        let t = self.modality_index(target)?;
        if s == t {
            return Err(Error::invalid("cross generation needs distinct modalities"));
        }
        self.check_obs(s, obs)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let q = self.encode_var(&p, s, tape.constant(obs.clone()))?;
        let noise = row_keyed_noise(obs, 1, self.latent_dim(), seed::derive(seed, tag::CROSS))?;
        let z = q.rsample(&noise)?;
        Ok(self.decode_var(&p, t, z)?.mean().value())
    }

    /// One joint-posterior draw per aligned row, decoded into every modality.
    /// Undefined for mixtures of experts.
    pub fn joint_reconstruct(&self, obs: &[DenseArray], seed: u64) -> Result<Vec<DenseArray>> {
        if self.joint_kind() == JointKind::MixtureOfExperts {
            return Err(Error::Unsupported(
                "joint-posterior reconstruction is not defined for a mixture of experts".into(),
            ));
        }
        self.check_aligned(obs)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let vars: Vec<_> = obs.iter().map(|o| tape.constant(o.clone())).collect();
        let q = self.joint_posterior_var(&p, &vars)?;
        let keys = tuple_keys(obs, &(0..obs[0].rows()).map(|i| vec![i; obs.len()]).collect::<Vec<_>>());
        let noise = keyed_noise(&keys, 1, self.latent_dim(), seed::derive(seed, tag::CROSS))?;
        let z = q.rsample(&noise)?;
        (0..self.num_modalities())
            .map(|m| Ok(self.decode_var(&p, m, z)?.mean().value()))
            .collect()
    }

    fn check_aligned(&self, obs: &[DenseArray]) -> Result<()> {
        if obs.len() != self.num_modalities() {
            return Err(Error::invalid(format!(
                "expected {} modalities, got {}",
                self.num_modalities(),
                obs.len()
            )));
        }
        for (m, o) in obs.iter().enumerate() {
            self.check_obs(m, o)?;
            if o.rows() != obs[0].rows() {
                return Err(Error::shape("aligned observations", obs[0].shape(), o.shape()));
            }
        }
        Ok(())
    }

    /// `S` draws from the joint posterior of a single item (one row per
    /// modality) and `log q(z | x_1..x_M)` at each draw. For a mixture the
    /// draws are stratified and `log q` is the mixture density.
    pub fn joint_posterior_samples(&self, item: &[DenseArray], s: usize, seed: u64) -> Result<(DenseArray, Vec<f64>)> {
        self.check_aligned(item)?;
        if item[0].rows() != 1 {
            return Err(Error::invalid("joint_posterior_samples takes one row per modality"));
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let tuples = vec![vec![0; self.num_modalities()]];
        let (z, log_q) = self.proposal(&p, item, &tuples, s, seed)?;
        Ok((z.value(), log_q.value().into_data()))
    }

    pub(crate) fn check_tuples(&self, obs: &[DenseArray], tuples: &[Vec<usize>], k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::invalid("sample count K must be ≥ 1"));
        }
        if obs.len() != self.num_modalities() {
            return Err(Error::invalid(format!(
                "expected {} modalities, got {}",
                self.num_modalities(),
                obs.len()
            )));
        }
        for (m, o) in obs.iter().enumerate() {
            self.check_obs(m, o)?;
        }
        for t in tuples {
            if t.len() != obs.len() {
                return Err(Error::invalid("tuple arity differs from modality count"));
            }
            for (m, &i) in t.iter().enumerate() {
                if i >= obs[m].rows() {
                    return Err(Error::OutOfBounds {
                        index: i,
                        bound: obs[m].rows(),
                    });
                }
            }
        }
        if self.joint_kind() == JointKind::MixtureOfExperts && !k.is_multiple_of(self.num_modalities()) {
            return Err(Error::invalid(format!(
                "mixture sampling needs K divisible by {} modalities, got K={k}",
                self.num_modalities()
            )));
        }
        Ok(())
    }

    /// Samples `K` latents per tuple from the joint proposal.
    ///
    /// Returns `z` as `[P·K, L]` rows (tuple-major) and `log q(z | tuple)`
    /// as `[P·K]`. Noise is keyed on observation content so every tuple's
    /// draws are independent of batch order.
    pub(crate) fn proposal<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[DenseArray],
        tuples: &[Vec<usize>],
        k: usize,
        seed: u64,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (z, log_q, _) = self.proposal_with_bank(p, obs, tuples, k, seed)?;
        Ok((z, log_q))
    }

    /// As [`Self::proposal`], additionally returning, for a mixture, the
    /// deduplicated latent bank and the row of each tuple sample in it so
    /// decoders run once per distinct draw.
    #[allow(clippy::type_complexity)]
    fn proposal_with_bank<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[DenseArray],
        tuples: &[Vec<usize>],
        k: usize,
        seed: u64,
    ) -> Result<(Var<'t>, Var<'t>, Option<(Var<'t>, Vec<usize>)>)> {
        self.check_tuples(obs, tuples, k)?;
        let tape = p.tape();
        let l = self.latent_dim();
        let mm = self.num_modalities();

        // Encode each distinct item of each modality once.
        let uniq: Vec<Unique> = (0..mm).map(|m| Unique::new(tuples.iter().map(|t| t[m]))).collect();
        let mut posteriors = Vec::with_capacity(mm);
        for m in 0..mm {
            if self.joint_kind() == JointKind::ExplicitJoint {
                break;
            }
            let sub = tape.constant(obs[m].gather_rows(&uniq[m].items)?);
            posteriors.push(self.encode_var(p, m, sub)?);
        }

        match self.joint_kind() {
            JointKind::MixtureOfExperts => {
                let per = k / mm;
                let mut blocks = Vec::with_capacity(mm);
                let mut offsets = Vec::with_capacity(mm);
                let mut offset = 0;
                for m in 0..mm {
                    let rows: Vec<usize> = (0..uniq[m].items.len()).flat_map(|j| std::iter::repeat_n(j, per)).collect();
                    let sub = obs[m].gather_rows(&uniq[m].items)?;
                    let noise = row_keyed_noise(&sub, per, l, seed::derive(seed, tag::MIXTURE))?;
                    blocks.push(posteriors[m].gather_rows(&rows)?.rsample(&noise)?);
                    offsets.push(offset);
                    offset += rows.len();
                }
                let bank = tape.concat_rows(&blocks)?;
                let mut rows = Vec::with_capacity(tuples.len() * k);
                for t in tuples {
                    for m in 0..mm {
                        let base = offsets[m] + uniq[m].pos[&t[m]] * per;
                        rows.extend(base..base + per);
                    }
                }
                let z = bank.gather_rows(&rows)?;
                let mut comps = Vec::with_capacity(mm);
                for m in 0..mm {
                    let idx: Vec<usize> = tuples
                        .iter()
                        .flat_map(|t| std::iter::repeat_n(uniq[m].pos[&t[m]], k))
                        .collect();
                    let q = &posteriors[m];
                    let lp = tape.indexed_gaussian_log_prob(q.mean, q.log_var, bank, &idx, &rows)?;
                    comps.push(lp.reshape(&[rows.len(), 1])?);
                }
                let log_q = tape
                    .concat_cols(&comps)?
                    .row_logsumexp()?
                    .add_scalar(-(mm as f64).ln());
                Ok((z, log_q, Some((bank, rows))))
            }
            kind => {
                let q = if kind == JointKind::ExplicitJoint {
                    let vars = (0..mm)
                        .map(|m| Ok(tape.constant(obs[m].gather_rows(&tuples.iter().map(|t| t[m]).collect::<Vec<_>>())?)))
                        .collect::<Result<Vec<_>>>()?;
                    self.encode_joint_var(p, &vars)?
                } else {
                    let experts = (0..mm)
                        .map(|m| posteriors[m].gather_rows(&tuples.iter().map(|t| uniq[m].pos[&t[m]]).collect::<Vec<_>>()))
                        .collect::<Result<Vec<_>>>()?;
                    DiagonalGaussian::product(&experts, true)?
                };
                let rep: Vec<usize> = (0..tuples.len()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
                let noise = keyed_noise(&tuple_keys(obs, tuples), k, l, seed::derive(seed, tag::JOINT))?;
                let z = q.gather_rows(&rep)?.rsample(&noise)?;
                let own: Vec<usize> = (0..rep.len()).collect();
                let log_q = tape.indexed_gaussian_log_prob(q.mean, q.log_var, z, &rep, &own)?;
                Ok((z, log_q, None))
            }
        }
    }

    /// Importance log-weights `log p(z, x_1..x_M) − log q(z | x_1..x_M)` for
    /// `K` draws per tuple, shape `[P, K]`.
    pub(crate) fn joint_log_weights<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[DenseArray],
        tuples: &[Vec<usize>],
        k: usize,
        seed: u64,
    ) -> Result<ProposalDraws<'t>> {
        let tape = p.tape();
        let (z, log_q, bank) = self.proposal_with_bank(p, obs, tuples, k, seed)?;
        let n = tuples.len() * k;
        let log_prior = match &bank {
            Some((b, rows)) => standard_normal_log_prob(*b)?.gather_rows(rows)?,
            None => standard_normal_log_prob(z)?,
        };
        let mut per_modality = Vec::with_capacity(obs.len());
        for (m, o) in obs.iter().enumerate() {
            let target_rows: Vec<usize> = tuples.iter().flat_map(|t| std::iter::repeat_n(t[m], k)).collect();
            let target = tape.constant(o.clone());
            let lp = match &bank {
                Some((b, rows)) => self.decoders[m].log_prob_indexed(p, *b, target, rows, &target_rows)?,
                None => self.decoders[m].log_prob_indexed(p, z, target, &(0..n).collect::<Vec<_>>(), &target_rows)?,
            };
            per_modality.push(lp.reshape(&[n, 1])?);
        }
        // Sorted so the sum does not depend on modality order.
        let log_lik = tape.concat_cols(&per_modality)?.row_sum_sorted()?;
        // Prior minus proposal first: it cancels exactly when q is the prior.
        let log_weights = log_lik.add(log_prior.sub(log_q)?)?.reshape(&[tuples.len(), k])?;
        let strata = if bank.is_some() { self.num_modalities() } else { 1 };
        Ok(ProposalDraws { log_weights, strata })
    }

    /// Log-weights for the unimodal marginal `p(x_m)` with `q_m(z | x_m)` as
    /// proposal, shape `[P, K]`.
    pub(crate) fn marginal_log_weights<'t>(
        &self,
        p: &Bound<'t>,
        m: usize,
        obs: &DenseArray,
        items: &[usize],
        k: usize,
        seed: u64,
    ) -> Result<Var<'t>> {
        if k == 0 {
            return Err(Error::invalid("sample count K must be ≥ 1"));
        }
        self.check_obs(m, obs)?;
        let tape = p.tape();
        let sub = obs.gather_rows(items)?;
        let q = self.encode_var(p, m, tape.constant(sub.clone()))?;
        let rep: Vec<usize> = (0..items.len()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let noise = row_keyed_noise(&sub, k, self.latent_dim(), seed::derive(seed, tag::MARGINAL))?;
        let z = q.gather_rows(&rep)?.rsample(&noise)?;
        let own: Vec<usize> = (0..rep.len()).collect();
        let log_lik = self.decoders[m].log_prob_indexed(p, z, tape.constant(sub), &own, &rep)?;
        let log_q = tape.indexed_gaussian_log_prob(q.mean, q.log_var, z, &rep, &own)?;
        log_lik.add(standard_normal_log_prob(z)?.sub(log_q)?)?.reshape(&[items.len(), k])
    }

    /// Σ_m KL(q(z | x_1..x_M) ‖ q_m(z | x_m)), batch mean. Ties the unimodal
    /// encoders of an explicit-joint model to its joint encoder.
    pub(crate) fn unimodal_alignment<'t>(&self, p: &Bound<'t>, obs: &[DenseArray]) -> Result<Var<'t>> {
        let tape = p.tape();
        let vars: Vec<_> = obs.iter().map(|o| tape.constant(o.clone())).collect();
        let joint = self.encode_joint_var(p, &vars)?;
        let mut total: Option<Var<'t>> = None;
        for (m, v) in vars.iter().enumerate() {
            let kl = joint.kl(&self.encode_var(p, m, *v)?)?;
            total = Some(match total {
                Some(t) => t.add(kl)?,
                None => kl,
            });
        }
        Ok(total.expect("≥ 2 modalities").mean())
    }
}

/// Distinct values in first-seen order with their positions.
struct Unique {
    items: Vec<usize>,
    pos: BTreeMap<usize, usize>,
}

impl Unique {
    fn new(it: impl Iterator<Item = usize>) -> Self {
        let mut items = Vec::new();
        let mut pos = BTreeMap::new();
        for i in it {
            pos.entry(i).or_insert_with(|| {
                items.push(i);
                items.len() - 1
            });
        }
        Self { items, pos }
    }
}

/// Order-insensitive content key of each tuple.
fn tuple_keys(obs: &[DenseArray], tuples: &[Vec<usize>]) -> Vec<u64> {
    tuples
        .iter()
        .map(|t| {
            t.iter()
                .enumerate()
                .fold(0u64, |acc, (m, &i)| acc.wrapping_add(seed::splitmix(seed::hash_row(obs[m].row(i)))))
        })
        .collect()
}

fn keyed_noise(keys: &[u64], per: usize, dim: usize, stream: u64) -> Result<DenseArray> {
    let mut data = Vec::with_capacity(keys.len() * per * dim);
    for &key in keys {
        data.extend(seed::standard_normals(seed::derive(stream, key), per * dim));
    }
    DenseArray::matrix(keys.len() * per, dim, data)
}

/// `per` standard-normal rows for every row of `obs`, keyed on its content.
pub(crate) fn row_keyed_noise(obs: &DenseArray, per: usize, dim: usize, stream: u64) -> Result<DenseArray> {
    let keys: Vec<u64> = (0..obs.rows()).map(|i| seed::hash_row(obs.row(i))).collect();
    keyed_noise(&keys, per, dim, stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small(kind: JointKind) -> MultimodalModel {
        let cfg = ModelConfig {
            latent_dim: 3,
            hidden: vec![5],
            joint_kind: kind,
            modalities: vec![
                ModalitySpec::new("x", 4, LikelihoodKind::Bernoulli),
                ModalitySpec::new("y", 2, LikelihoodKind::Gaussian),
            ],
        };
        MultimodalModel::new(cfg, 11).unwrap()
    }

    fn data(rows: usize, cols: usize, seed: u64) -> DenseArray {
        let v = seed::standard_normals(seed, rows * cols).into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        DenseArray::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn zero_heads_give_standard_normal_posteriors() {
        let model = small(JointKind::MixtureOfExperts);
        let q = model.encode_unimodal("x", &data(3, 4, 1)).unwrap();
        assert!(q.mean.data().iter().all(|&v| v == 0.0));
        assert!(q.log_var.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_modality_is_reported() {
        let model = small(JointKind::MixtureOfExperts);
        assert!(matches!(model.encode_unimodal("audio", &data(1, 4, 1)), Err(Error::UnknownModality(_))));
        assert!(matches!(model.cross_generate("x", "audio", &data(1, 4, 1), 0), Err(Error::UnknownModality(_))));
    }

    #[test]
    fn encoding_is_row_permutation_equivariant() {
        let mut model = small(JointKind::MixtureOfExperts);
        let id = model.params().by_name("enc.x.mean.w").unwrap();
        let w = DenseArray::matrix(5, 3, seed::standard_normals(9, 15)).unwrap();
        model.params_mut().set(id, w).unwrap();
        let x = data(4, 4, 2);
        let perm = [2, 0, 3, 1];
        let a = model.encode_unimodal("x", &x).unwrap();
        let b = model.encode_unimodal("x", &x.gather_rows(&perm).unwrap()).unwrap();
        assert_eq!(b.mean, a.mean.gather_rows(&perm).unwrap());
    }

    #[test]
    fn explicit_joint_has_a_joint_encoder_and_others_do_not() {
        assert!(small(JointKind::ExplicitJoint).params().by_name("joint.mean.w").is_some());
        assert!(small(JointKind::ProductOfExperts).params().by_name("joint.mean.w").is_none());
        assert!(small(JointKind::MixtureOfExperts).params().by_name("joint.mean.w").is_none());
    }

    #[test]
    fn duplicate_modality_names_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.modalities[1].name = cfg.modalities[0].name.clone();
        assert!(MultimodalModel::new(cfg, 0).is_err());
    }

    #[test]
    fn mixture_needs_divisible_sample_count() {
        let model = small(JointKind::MixtureOfExperts);
        let item = [data(1, 4, 1), data(1, 2, 2)];
        assert!(model.joint_posterior_samples(&item, 3, 0).is_err());
        let (z, lq) = model.joint_posterior_samples(&item, 4, 0).unwrap();
        assert_eq!(z.shape(), &[4, 3]);
        assert_eq!(lq.len(), 4);
    }

    #[test]
    fn explicit_joint_log_q_is_the_encoder_density() {
        let model = small(JointKind::ExplicitJoint);
        let item = [data(1, 4, 1), data(1, 2, 2)];
        let (z, lq) = model.joint_posterior_samples(&item, 5, 3).unwrap();
        // Zero heads: q = N(0, I).
        for (r, &v) in lq.iter().enumerate() {
            let expect: f64 = z.row(r).iter().map(|x| -0.5 * x * x - 0.5 * crate::distributions::LN_2PI).sum();
            assert_relative_eq!(v, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn generation_is_seeded_and_handles_empty_requests() {
        let model = small(JointKind::ProductOfExperts);
        let a = model.joint_generate(6, 42).unwrap();
        let b = model.joint_generate(6, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, model.joint_generate(6, 43).unwrap());
        let e = model.joint_generate(0, 1).unwrap();
        assert_eq!(e[0].shape(), &[0, 4]);
        let x = data(3, 4, 5);
        assert_eq!(model.cross_generate("x", "y", &x, 7).unwrap(), model.cross_generate("x", "y", &x, 7).unwrap());
        assert!(model.cross_generate("x", "x", &x, 7).is_err());
    }

    #[test]
    fn decoder_factorizes_across_modalities() {
        let model = small(JointKind::MixtureOfExperts);
        let z = DenseArray::matrix(2, 3, seed::standard_normals(4, 6)).unwrap();
        let obs = [data(2, 4, 1), data(2, 2, 2)];
        let lls = model.decoder_log_likelihoods(&z, &obs).unwrap();
        let single_x = model.decoder_log_likelihoods(&z, &obs[..1]).unwrap();
        assert_eq!(lls[0], single_x[0]);
        assert_eq!(model.decode_all(&z).unwrap(), model.decode_all(&z).unwrap());
    }

    #[test]
    fn mixture_joint_reconstruction_is_unsupported() {
        let model = small(JointKind::MixtureOfExperts);
        let r = model.joint_reconstruct(&[data(1, 4, 1), data(1, 2, 2)], 0);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }
}

//! Synthetic multimodal data with a known shared class factor.
//!
//! Each modality observes `h = [onehot(c); s_p]` through its own fixed random
//! linear map, where `c` is the shared class and `s_p ~ N(0, I)` is private
//! to the item. Gaussian modalities emit `W h + ε`; Bernoulli modalities emit
//! `sigmoid(W h + ε)` as per-pixel intensities in `[0, 1]`. Items of
//! different modalities are drawn independently and then paired.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LikelihoodKind, ModalitySpec};
use crate::numerics::DenseArray;
use crate::seed::{self, tag};

const MAGIC: &[u8; 4] = b"CMDS";
const FORMAT_VERSION: u32 = 1;
const MAX_ATTEMPTS: u64 = 5;
/// Scale of the class block of each mixing map.
const SHARED_SCALE: f64 = 2.0;
/// Scale of the private block.
const PRIVATE_SCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorSpec {
    pub num_classes: usize,
    pub private_dim: usize,
    pub noise_scale: f64,
    pub items_per_modality: usize,
    pub modalities: Vec<ModalitySpec>,
}

impl Default for FactorSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            private_dim: 3,
            noise_scale: 0.1,
            items_per_modality: 2000,
            modalities: vec![
                ModalitySpec::new("m1", 16, LikelihoodKind::Bernoulli),
                ModalitySpec::new("m2", 16, LikelihoodKind::Gaussian),
            ],
        }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.modalities.is_empty() {
            return Err(Error::Empty("data modalities"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid("noise_scale must be finite and ≥ 0"));
        }
        if self.modalities.iter().any(|m| m.obs_dim == 0) {
            return Err(Error::invalid("obs_dim must be ≥ 1"));
        }
        Ok(())
    }

    pub fn factor_dim(&self) -> usize {
        self.num_classes + self.private_dim
    }
}

/// Generator with mixing maps fixed by a dataset seed.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: FactorSpec,
    /// Per modality `[obs_dim, C + P]`, row-major.
    maps: Vec<DenseArray>,
}

impl Generator {
    /// Draws the mixing maps. A map whose class block is rank deficient is
    /// redrawn from the next derived seed, up to five attempts.
    pub fn new(spec: FactorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let c = spec.num_classes;
        let f = spec.factor_dim();
        let mut maps = Vec::with_capacity(spec.modalities.len());
        for (m, ms) in spec.modalities.iter().enumerate() {
            let d = ms.obs_dim;
            let mut found = None;
            for attempt in 0..MAX_ATTEMPTS {
                let s = seed::derive(seed::derive(seed, tag::DATA), ((m as u64) << 8) | attempt);
                let z = seed::standard_normals(s, d * f);
                let data: Vec<f64> = z
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * if i % f < c { SHARED_SCALE } else { PRIVATE_SCALE })
                    .collect();
                let map = DenseArray::matrix(d, f, data)?;
                if shared_rank(&map, c) == c {
                    found = Some(map);
                    break;
                }
            }
            maps.push(found.ok_or_else(|| {
                Error::Degenerate(format!(
                    "modality `{}`: class block of the mixing map stayed rank deficient after {MAX_ATTEMPTS} draws",
                    ms.name
                ))
            })?);
        }
        Ok(Self { spec, maps })
    }

    pub fn spec(&self) -> &FactorSpec {
        &self.spec
    }

    pub fn map(&self, modality: usize) -> &DenseArray {
        &self.maps[modality]
    }

    /// `n` items of `modality`, classes balanced to within one item.
    pub fn generate(&self, modality: usize, n: usize, seed: u64) -> Result<Unimodal> {
        let spec = &self.spec;
        let ms = spec
            .modalities
            .get(modality)
            .ok_or(Error::OutOfBounds { index: modality, bound: spec.modalities.len() })?;
        let c = spec.num_classes;
        if n < c {
            return Err(Error::invalid(format!("{n} items cannot cover {c} classes")));
        }
        let mut rng = seed::rng(seed::derive(seed::derive(seed, tag::GENERATE), modality as u64));
        let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        labels.shuffle(&mut rng);

        let (d, f) = (ms.obs_dim, spec.factor_dim());
        let map = &self.maps[modality];
        let mut data = Vec::with_capacity(n * d);
        let mut h = vec![0.0; f];
        for &label in &labels {
            h.iter_mut().for_each(|v| *v = 0.0);
            h[label] = 1.0;
            for v in &mut h[c..] {
                *v = rng.sample(rand_distr::StandardNormal);
            }
            for r in 0..d {
                let row = &map.data()[r * f..(r + 1) * f];
                let mut a: f64 = row.iter().zip(&h).map(|(w, x)| w * x).sum();
                if spec.noise_scale > 0.0 {
                    a += spec.noise_scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
                data.push(match ms.likelihood {
                    LikelihoodKind::Bernoulli => (1.0 / (1.0 + (-a).exp())).clamp(0.0, 1.0),
                    LikelihoodKind::Gaussian => a,
                });
            }
        }
        Ok(Unimodal {
            spec: ms.clone(),
            obs: DenseArray::matrix(n, d, data)?,
            labels,
        })
    }

    /// One pool per modality, `items_per_modality` items each.
    pub fn generate_all(&self, seed: u64) -> Result<Vec<Unimodal>> {
        (0..self.spec.modalities.len())
            .map(|m| self.generate(m, self.spec.items_per_modality, seed))
            .collect()
    }
}

fn shared_rank(map: &DenseArray, c: usize) -> usize {
    let (d, f) = (map.rows(), map.cols());
    let block = DMatrix::from_fn(d, c, |i, j| map.data()[i * f + j]);
    let sv = block.singular_values();
    let top = sv.max();
    sv.iter().filter(|&&s| s > 1e-8 * top.max(f64::MIN_POSITIVE)).count()
}

/// Maps drawn from `seed`, then `n` items of `modality`.
pub fn generate_unimodal(spec: &FactorSpec, n: usize, modality: usize, seed: u64) -> Result<Unimodal> {
    Generator::new(spec.clone(), seed)?.generate(modality, n, seed)
}

/// A pool of observations of one modality with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Unimodal {
    pub spec: ModalitySpec,
    pub obs: DenseArray,
    pub labels: Vec<usize>,
}

impl Unimodal {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    /// This pool's items followed by `other`'s.
    pub fn concat(&self, other: &Unimodal) -> Result<Self> {
        if self.spec != other.spec {
            return Err(Error::invalid(format!("cannot join pools `{}` and `{}`", self.spec.name, other.spec.name)));
        }
        let mut rows: Vec<&[f64]> = (0..self.len()).map(|i| self.obs.row(i)).collect();
        rows.extend((0..other.len()).map(|i| other.obs.row(i)));
        let obs = if rows.is_empty() { self.obs.clone() } else { DenseArray::from_rows(&rows)? };
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self { spec: self.spec.clone(), obs, labels })
    }

    fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            spec: self.spec.clone(),
            obs: self.obs.gather_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// How a dataset's tuples were formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    Related { per_instance: usize },
    Random,
}

/// Unimodal pools plus tuples of indices into them.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub pools: Vec<Unimodal>,
    /// `pairs[t][m]` indexes `pools[m]`.
    pub pairs: Vec<Vec<usize>>,
    /// True iff every member of the tuple shares a class.
    pub related: Vec<bool>,
    pub pairing: Pairing,
}

impl PairedDataset {
    fn new(pools: Vec<Unimodal>, pairs: Vec<Vec<usize>>, pairing: Pairing) -> Self {
        let related = pairs
            .iter()
            .map(|t| t.iter().enumerate().all(|(m, &i)| pools[m].labels[i] == pools[0].labels[t[0]]))
            .collect();
        Self { pools, pairs, related, pairing }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.pools.len()
    }

    /// This dataset plus the tuples of `other` flagged in `keep`, with the
    /// pools joined so indices stay valid. The pairing rule is this one's.
    pub fn union(&self, other: &PairedDataset, keep: &[bool]) -> Result<PairedDataset> {
        if other.num_modalities() != self.num_modalities() || keep.len() != other.len() {
            return Err(Error::shape("union", &[self.num_modalities(), other.len()], &[other.num_modalities(), keep.len()]));
        }
        let pools = self
            .pools
            .iter()
            .zip(&other.pools)
            .map(|(a, b)| a.concat(b))
            .collect::<Result<Vec<_>>>()?;
        let mut pairs = self.pairs.clone();
        for (t, _) in other.pairs.iter().zip(keep).filter(|(_, &k)| k) {
            pairs.push(t.iter().enumerate().map(|(m, &i)| i + self.pools[m].len()).collect());
        }
        Ok(PairedDataset::new(pools, pairs, self.pairing))
    }

    /// Row-aligned observation arrays for the selected tuples.
    pub fn gather(&self, tuples: &[usize]) -> Result<Vec<DenseArray>> {
        (0..self.pools.len())
            .map(|m| {
                let rows = tuples
                    .iter()
                    .map(|&t| self.pairs.get(t).map(|p| p[m]).ok_or(Error::OutOfBounds { index: t, bound: self.pairs.len() }))
                    .collect::<Result<Vec<_>>>()?;
                self.pools[m].obs.gather_rows(&rows)
            })
            .collect()
    }

    /// Every tuple, row-aligned.
    pub fn aligned(&self) -> Result<Vec<DenseArray>> {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Class label of each tuple member of modality `m`.
    pub fn labels(&self, m: usize) -> Vec<usize> {
        self.pairs.iter().map(|t| self.pools[m].labels[t[m]]).collect()
    }

    pub fn related_fraction(&self) -> f64 {
        self.related.iter().filter(|&&r| r).count() as f64 / self.len().max(1) as f64
    }

    /// One CSV line per tuple: index, member indices, relatedness, labels.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let m = self.pools.len();
        let mut header = vec!["pair".to_string()];
        header.extend((0..m).map(|i| format!("idx_{}", self.pools[i].spec.name)));
        header.push("related".into());
        header.extend((0..m).map(|i| format!("label_{}", self.pools[i].spec.name)));
        writeln!(out, "{}", header.join(","))?;
        for (t, tuple) in self.pairs.iter().enumerate() {
            let mut cells = vec![t.to_string()];
            cells.extend(tuple.iter().map(usize::to_string));
            cells.push(u8::from(self.related[t]).to_string());
            cells.extend(tuple.iter().enumerate().map(|(i, &j)| self.pools[i].labels[j].to_string()));
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    /// Binary export: `CMDS`, version, classes, pools, tuples; little endian.
    pub fn write_binary<W: Write>(&self, mut out: W, num_classes: usize) -> Result<()> {
        out.write_all(MAGIC)?;
        put_u32(&mut out, FORMAT_VERSION)?;
        put_u32(&mut out, num_classes as u32)?;
        put_u32(&mut out, self.pools.len() as u32)?;
        for pool in &self.pools {
            let name = pool.spec.name.as_bytes();
            put_u32(&mut out, name.len() as u32)?;
            out.write_all(name)?;
            out.write_all(&[match pool.spec.likelihood {
                LikelihoodKind::Bernoulli => 0,
                LikelihoodKind::Gaussian => 1,
            }])?;
            put_u32(&mut out, pool.spec.obs_dim as u32)?;
            put_u32(&mut out, pool.len() as u32)?;
            for &l in &pool.labels {
                put_u32(&mut out, l as u32)?;
            }
            for v in pool.obs.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        let (tag, per) = match self.pairing {
            Pairing::Related { per_instance } => (0u8, per_instance as u32),
            Pairing::Random => (1, 0),
        };
        out.write_all(&[tag])?;
        put_u32(&mut out, per)?;
        put_u32(&mut out, self.pairs.len() as u32)?;
        for t in &self.pairs {
            for &i in t {
                put_u32(&mut out, i as u32)?;
            }
        }
        Ok(())
    }

    /// Reads [`Self::write_binary`] output; returns the dataset and `C`.
    pub fn read_binary<R: Read>(mut input: R) -> Result<(Self, usize)> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a CMDS dataset file".into()));
        }
        let version = get_u32(&mut input)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let classes = get_u32(&mut input)? as usize;
        let m = get_u32(&mut input)? as usize;
        let mut pools = Vec::with_capacity(m);
        for _ in 0..m {
            let len = get_u32(&mut input)? as usize;
            let mut name = vec![0u8; len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let likelihood = match get_u8(&mut input)? {
                0 => LikelihoodKind::Bernoulli,
                1 => LikelihoodKind::Gaussian,
                other => return Err(Error::Format(format!("unknown likelihood tag {other}"))),
            };
            let d = get_u32(&mut input)? as usize;
            let n = get_u32(&mut input)? as usize;
            let labels = (0..n).map(|_| Ok(get_u32(&mut input)? as usize)).collect::<Result<Vec<_>>>()?;
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Format(format!("label {bad} outside {classes} classes")));
            }
            let data = (0..n * d).map(|_| get_f64(&mut input)).collect::<Result<Vec<_>>>()?;
            pools.push(Unimodal {
                spec: ModalitySpec::new(name, d, likelihood),
                obs: DenseArray::matrix(n, d, data)?,
                labels,
            });
        }
        let pairing = match get_u8(&mut input)? {
            0 => Pairing::Related { per_instance: get_u32(&mut input)? as usize },
            1 => {
                get_u32(&mut input)?;
                Pairing::Random
            }
            other => return Err(Error::Format(format!("unknown pairing tag {other}"))),
        };
        let count = get_u32(&mut input)? as usize;
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            let t = (0..m)
                .map(|j| {
                    let i = get_u32(&mut input)? as usize;
                    if i >= pools[j].len() {
                        return Err(Error::Format(format!("tuple index {i} outside pool of {}", pools[j].len())));
                    }
                    Ok(i)
                })
                .collect::<Result<Vec<_>>>()?;
            pairs.push(t);
        }
        Ok((Self::new(pools, pairs, pairing), classes))
    }
}

fn put_u32<W: Write>(out: &mut W, v: u32) -> Result<()> {
    Ok(out.write_all(&v.to_le_bytes())?)
}

fn get_u8<R: Read>(input: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    input.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Pairs every item of the first pool with `per_instance` same-class items
/// of each other pool, drawn with replacement.
pub fn pair_related(pools: Vec<Unimodal>, per_instance: usize, seed: u64) -> Result<PairedDataset> {
    if pools.len() < 2 {
        return Err(Error::invalid("pairing needs at least two modalities"));
    }
    if per_instance == 0 {
        return Err(Error::invalid("pairs per instance must be ≥ 1"));
    }
    let classes: Vec<BTreeMap<usize, Vec<usize>>> = pools.iter().map(Unimodal::by_class).collect();
    let mut rng = seed::rng(seed::derive(seed, tag::DATA ^ 0x5052));
    let mut pairs = Vec::with_capacity(pools[0].len() * per_instance);
    for (i, &label) in pools[0].labels.iter().enumerate() {
        let candidates = (1..pools.len())
            .map(|m| {
                classes[m].get(&label).ok_or_else(|| {
                    Error::invalid(format!("class {label} is absent from modality `{}`", pools[m].spec.name))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for _ in 0..per_instance {
            let mut t = Vec::with_capacity(pools.len());
            t.push(i);
            for c in &candidates {
                t.push(c[rng.gen_range(0..c.len())]);
            }
            pairs.push(t);
        }
    }
    Ok(PairedDataset::new(pools, pairs, Pairing::Related { per_instance }))
}

/// Pairs every item of the first pool with a uniformly random item of each
/// other pool; relatedness follows from the labels.
pub fn pair_random(pools: Vec<Unimodal>, seed: u64) -> Result<PairedDataset> {
    pair_random_with(pools, 1, seed)
}

/// As [`pair_random`], with `per_instance` independent partners per item of
/// the first pool.
pub fn pair_random_with(pools: Vec<Unimodal>, per_instance: usize, seed: u64) -> Result<PairedDataset> {
    if per_instance == 0 {
        return Err(Error::invalid("pairs per instance must be ≥ 1"));
    }
    if pools.len() < 2 {
        return Err(Error::invalid("pairing needs at least two modalities"));
    }
    if let Some(p) = pools.iter().find(|p| p.is_empty()) {
        return Err(Error::invalid(format!("modality `{}` has no items", p.spec.name)));
    }
    let mut rng = seed::rng(seed::derive(seed, tag::DATA ^ 0x524e));
    let pairs = (0..pools[0].len())
        .flat_map(|i| std::iter::repeat_n(i, per_instance))
        .map(|i| {
            let mut t = vec![i];
            t.extend(pools[1..].iter().map(|p| rng.gen_range(0..p.len())));
            t
        })
        .collect();
    Ok(PairedDataset::new(pools, pairs, Pairing::Random))
}

/// Stratified selection of `percent` of each pool (original order kept),
/// then re-pairing with the dataset's pairing rule.
pub fn subset(ds: &PairedDataset, percent: f64, seed: u64) -> Result<PairedDataset> {
    let (pools, _) = split_pools(&ds.pools, percent, seed)?;
    match ds.pairing {
        Pairing::Related { per_instance } => pair_related(pools, per_instance, seed),
        Pairing::Random => pair_random(pools, seed),
    }
}

/// Splits every pool into a stratified `percent` share (original order kept)
/// and the remainder.
pub fn split_pools(source: &[Unimodal], percent: f64, seed: u64) -> Result<(Vec<Unimodal>, Vec<Unimodal>)> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::invalid(format!("percent must be in (0, 100], got {percent}")));
    }
    let mut pools = Vec::with_capacity(source.len());
    let mut rest = Vec::with_capacity(source.len());
    for (m, pool) in source.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(seed::derive(seed, tag::DATA ^ 0x5355), m as u64));
        let mut keep = Vec::new();
        for (_, mut members) in pool.by_class() {
            let take = ((members.len() as f64) * percent / 100.0).round() as usize;
            members.shuffle(&mut rng);
            keep.extend_from_slice(&members[..take.min(members.len())]);
        }
        keep.sort_unstable();
        let classes = pool.by_class().len();
        if keep.len() < classes {
            return Err(Error::invalid(format!(
                "{percent}% of modality `{}` leaves {} items for {classes} classes",
                pool.spec.name,
                keep.len()
            )));
        }
        pools.push(pool.select(&keep)?);
        let kept: std::collections::BTreeSet<usize> = keep.into_iter().collect();
        let others: Vec<usize> = (0..pool.len()).filter(|i| !kept.contains(i)).collect();
        rest.push(pool.select(&others)?);
    }
    Ok((pools, rest))
}

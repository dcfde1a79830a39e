//! Synthetic few-shot benchmark: Gaussian categories behind a shared
//! nonlinear nuisance map, split into base / validation-novel / test-novel
//! categories.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{parse_kv, parse_value, render_kv, KvSection};
use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_base: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub examples_per_category: usize,
    pub input_dim: usize,
    /// Norm of every category center.
    pub center_scale: f64,
    /// Std of the isotropic within-category noise.
    pub noise_scale: f64,
    /// 0 leaves the latent space untouched; larger values stretch the axes
    /// unevenly and bend them through `tanh`.
    pub nuisance_strength: f64,
    /// Number of superclass directions the centers cluster around; 0 draws
    /// every center independently.
    pub superclasses: usize,
    /// Spread of a center around its superclass direction.
    pub superclass_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_base: 64,
            n_val: 16,
            n_test: 20,
            examples_per_category: 60,
            input_dim: 32,
            center_scale: 1.0,
            noise_scale: 0.2,
            nuisance_strength: 1.0,
            superclasses: 6,
            superclass_spread: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_categories(&self) -> usize {
        self.n_base + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_base == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("every split needs at least one category".into()));
        }
        if self.examples_per_category == 0 || self.input_dim == 0 {
            return Err(Error::Config("examples_per_category and input_dim must be positive".into()));
        }
        if !(self.center_scale > 0.0) || self.noise_scale < 0.0 || self.nuisance_strength < 0.0 {
            return Err(Error::Config("scales must be nonnegative (center_scale positive)".into()));
        }
        if self.superclass_spread < 0.0 {
            return Err(Error::Config("superclass_spread must be nonnegative".into()));
        }
        Ok(())
    }
}

impl KvSection for SynthConfig {
    fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_base" => self.n_base = parse_value(key, value)?,
            "n_val" => self.n_val = parse_value(key, value)?,
            "n_test" => self.n_test = parse_value(key, value)?,
            "examples_per_category" => self.examples_per_category = parse_value(key, value)?,
            "input_dim" => self.input_dim = parse_value(key, value)?,
            "center_scale" => self.center_scale = parse_value(key, value)?,
            "noise_scale" => self.noise_scale = parse_value(key, value)?,
            "nuisance_strength" => self.nuisance_strength = parse_value(key, value)?,
            "superclasses" => self.superclasses = parse_value(key, value)?,
            "superclass_spread" => self.superclass_spread = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_base", self.n_base.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("examples_per_category", self.examples_per_category.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("center_scale", self.center_scale.to_string()),
            ("noise_scale", self.noise_scale.to_string()),
            ("nuisance_strength", self.nuisance_strength.to_string()),
            ("superclasses", self.superclasses.to_string()),
            ("superclass_spread", self.superclass_spread.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Base,
    ValNovel,
    TestNovel,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(SplitKind::Base),
            "val" | "val_novel" => Ok(SplitKind::ValNovel),
            "test" | "test_novel" => Ok(SplitKind::TestNovel),
            other => Err(Error::Config(format!("unknown split `{other}` (base|val|test)"))),
        }
    }
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitKind::Base => "base",
            SplitKind::ValNovel => "val_novel",
            SplitKind::TestNovel => "test_novel",
        })
    }
}

/// Category ids of each split. Position in `base` is the base index used
/// for rows of `W_base`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub base: Vec<usize>,
    pub val_novel: Vec<usize>,
    pub test_novel: Vec<usize>,
}

impl Split {
    pub fn get(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Base => &self.base,
            SplitKind::ValNovel => &self.val_novel,
            SplitKind::TestNovel => &self.test_novel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    /// Per category, a `[n × input_dim]` matrix of examples.
    pub categories: Vec<Tensor>,
    pub split: Split,
}

/// Pre-nuisance coordinates, kept for oracle checks.
#[derive(Clone, Debug)]
pub struct Latents {
    pub centers: Vec<Vec<f64>>,
    pub examples: Vec<Tensor>,
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian rows.
fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows
}

/// Invertible map `x = h + s·tanh(h)` with `h = Q·diag(e^{s·a})·u`.
struct Nuisance {
    rotation: Vec<Vec<f64>>,
    log_scales: Vec<f64>,
    strength: f64,
}

impl Nuisance {
    fn new<R: Rng + ?Sized>(dim: usize, strength: f64, rng: &mut R) -> Self {
        let rotation = random_orthogonal(dim, rng);
        let log_scales = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            rotation,
            log_scales,
            strength,
        }
    }

    fn apply(&self, u: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = u
            .iter()
            .zip(&self.log_scales)
            .map(|(v, a)| v * (self.strength * a).exp())
            .collect();
        self.rotation
            .iter()
            .map(|row| {
                let h: f64 = row.iter().zip(&scaled).map(|(a, b)| a * b).sum();
                h + self.strength * h.tanh()
            })
            .collect()
    }
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    generate_with_latents(config).map(|(d, _)| d)
}

/// Generation is driven by the dataset stream of `config.seed` only.
pub fn generate_with_latents(config: &SynthConfig) -> Result<(Dataset, Latents)> {
    config.validate()?;
    let rng = &mut stream(config.seed, Stream::Dataset);
    let dim = config.input_dim;
    let n_cat = config.n_categories();

    let parents: Vec<Vec<f64>> = (0..config.superclasses).map(|_| random_unit(dim, rng)).collect();
    let centers: Vec<Vec<f64>> = (0..n_cat)
        .map(|c| {
            let dir = if parents.is_empty() {
                random_unit(dim, rng)
            } else {
                let parent = &parents[c % parents.len()];
                let offset = random_unit(dim, rng);
                let v: Vec<f64> = parent
                    .iter()
                    .zip(&offset)
                    .map(|(p, o)| p + config.superclass_spread * o)
                    .collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / n).collect()
            };
            dir.into_iter().map(|x| x * config.center_scale).collect()
        })
        .collect();

    let nuisance = Nuisance::new(dim, config.nuisance_strength, rng);
    let mut categories = Vec::with_capacity(n_cat);
    let mut latent_examples = Vec::with_capacity(n_cat);
    for center in &centers {
        let mut latent = Vec::with_capacity(config.examples_per_category * dim);
        let mut observed = Vec::with_capacity(config.examples_per_category * dim);
        for _ in 0..config.examples_per_category {
            let u: Vec<f64> = center
                .iter()
                .map(|c| {
                    let e: f64 = StandardNormal.sample(rng);
                    c + config.noise_scale * e
                })
                .collect();
            observed.extend(nuisance.apply(&u));
            latent.extend(u);
        }
        categories.push(Tensor::matrix(config.examples_per_category, dim, observed)?);
        latent_examples.push(Tensor::matrix(config.examples_per_category, dim, latent)?);
    }

    // Superclasses are assigned round-robin, so contiguous id ranges mix them.
    let ids: Vec<usize> = (0..n_cat).collect();
    let mut perm = ids.clone();
    perm.shuffle(rng);
    let split = Split {
        base: perm[..config.n_base].to_vec(),
        val_novel: perm[config.n_base..config.n_base + config.n_val].to_vec(),
        test_novel: perm[config.n_base + config.n_val..].to_vec(),
    };

    Ok((
        Dataset {
            config: config.clone(),
            categories,
            split,
        },
        Latents {
            centers,
            examples: latent_examples,
        },
    ))
}

const DATASET_MAGIC: &[u8; 4] = b"FSDS";
pub const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn examples(&self, category: usize) -> &Tensor {
        &self.categories[category]
    }

    pub fn example(&self, category: usize, index: usize) -> &[f64] {
        self.categories[category].row(index)
    }

    pub fn count(&self, category: usize) -> usize {
        self.categories[category].rows()
    }

    /// Stacks the given examples into a `[n × input_dim]` batch.
    pub fn batch(&self, refs: &[ExampleRef]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(refs.len() * self.input_dim());
        for r in refs {
            data.extend_from_slice(self.example(r.category, r.index));
        }
        Tensor::matrix(refs.len(), self.input_dim(), data)
    }

    pub fn check(&self) -> Result<()> {
        let mut seen = vec![false; self.n_categories()];
        for &c in self
            .split
            .base
            .iter()
            .chain(&self.split.val_novel)
            .chain(&self.split.test_novel)
        {
            if c >= seen.len() || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Format(format!("category {c} duplicated or out of range in split")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("split does not cover every category".into()));
        }
        if self.split.base.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (c, t) in self.categories.iter().enumerate() {
            if t.cols() != self.input_dim() {
                return Err(Error::Format(format!("category {c} has wrong input width")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
        w.str(&render_kv(&self.config.entries()));
        w.indices(&self.split.base);
        w.indices(&self.split.val_novel);
        w.indices(&self.split.test_novel);
        w.u64(self.categories.len() as u64);
        for t in &self.categories {
            w.tensor(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION, "dataset")?;
        let mut config = SynthConfig::default();
        for (k, v) in parse_kv(&r.str("metadata")?)? {
            if !config.set_kv(&k, &v)? {
                return Err(Error::UnknownKey(k));
            }
        }
        let split = Split {
            base: r.indices("base split")?,
            val_novel: r.indices("val split")?,
            test_novel: r.indices("test split")?,
        };
        let n = r.u64("category count")? as usize;
        if n != config.n_categories() {
            return Err(Error::Format(format!(
                "dataset: {n} categories stored, metadata says {}",
                config.n_categories()
            )));
        }
        let categories = (0..n)
            .map(|_| r.tensor("category examples"))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let d = Self {
            config,
            categories,
            split,
        };
        d.check()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One example: category id and row within that category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExampleRef {
    pub category: usize,
    pub index: usize,
}

/// Per-base-category partition of example rows into a training pool and a
/// held-out pool used to score base recognition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BaseViews {
    /// Indexed by base index; row indices within the category.
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl BaseViews {
    /// Every base example usable for training (holdout 0).
    pub fn all(dataset: &Dataset) -> Self {
        Self {
            train: dataset
                .split
                .base
                .iter()
                .map(|&c| (0..dataset.count(c)).collect())
                .collect(),
            test: vec![Vec::new(); dataset.split.base.len()],
        }
    }
}

pub fn base_holdout_split<R: Rng + ?Sized>(
    dataset: &Dataset,
    per_category_holdout: usize,
    rng: &mut R,
) -> Result<BaseViews> {
    let mut train = Vec::with_capacity(dataset.split.base.len());
    let mut test = Vec::with_capacity(dataset.split.base.len());
    for &c in &dataset.split.base {
        let n = dataset.count(c);
        // Keep at least one training example per category.
        if per_category_holdout >= n {
            return Err(Error::InsufficientExamples {
                category: c,
                available: n,
                required: per_category_holdout + 1,
            });
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let mut held = idx.split_off(n - per_category_holdout);
        idx.sort_unstable();
        held.sort_unstable();
        train.push(idx);
        test.push(held);
    }
    Ok(BaseViews { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            n_base: 6,
            n_val: 2,
            n_test: 3,
            examples_per_category: 8,
            input_dim: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_collapses_latents() {
        let cfg = SynthConfig {
            noise_scale: 0.0,
            ..tiny()
        };
        let (d, lat) = generate_with_latents(&cfg).unwrap();
        for (c, t) in lat.examples.iter().enumerate() {
            for i in 0..t.rows() {
                assert_eq!(t.row(i), lat.centers[c].as_slice());
            }
            let obs = d.examples(c);
            for i in 1..obs.rows() {
                assert_eq!(obs.row(i), obs.row(0));
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&tiny()).unwrap();
        let b = generate(&tiny()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate(&SynthConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn split_is_partition() {
        let d = generate(&tiny()).unwrap();
        d.check().unwrap();
        assert_eq!(d.split.base.len(), 6);
        assert_eq!(d.split.val_novel.len(), 2);
        assert_eq!(d.split.test_novel.len(), 3);
    }

    #[test]
    fn centers_have_configured_norm() {
        let (_, lat) = generate_with_latents(&tiny()).unwrap();
        for c in &lat.centers {
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bytes_round_trip() {
        let d = generate(&tiny()).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn truncated_and_versioned_files_fail() {
        let bytes = generate(&tiny()).unwrap().to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Dataset::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Dataset::from_bytes(&bad),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn holdout_zero_and_partition() {
        let d = generate(&tiny()).unwrap();
        let v = base_holdout_split(&d, 0, &mut stream(0, Stream::Holdout)).unwrap();
        assert!(v.test.iter().all(|t| t.is_empty()));
        assert_eq!(v, BaseViews::all(&d));

        let v = base_holdout_split(&d, 3, &mut stream(0, Stream::Holdout)).unwrap();
        for (b, &c) in d.split.base.iter().enumerate() {
            let mut all: Vec<usize> = v.train[b].iter().chain(&v.test[b]).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..d.count(c)).collect::<Vec<_>>());
            assert_eq!(v.test[b].len(), 3);
        }
        let again = base_holdout_split(&d, 3, &mut stream(0, Stream::Holdout)).unwrap();
        assert_eq!(v, again);
        assert!(base_holdout_split(&d, 8, &mut stream(0, Stream::Holdout)).is_err());
    }
}

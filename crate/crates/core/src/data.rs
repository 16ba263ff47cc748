//! Synthetic compositional image/text classification data with a
//! base/novel class split.
//!
//! Every class is a set of attributes. An attribute is a token in text and a
//! fixed patch pattern in images, so novel classes are unseen combinations of
//! attributes that base classes already cover. A fixed share of every image's
//! patches are class-irrelevant distractors.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub base_classes: usize,
    pub attributes: usize,
    pub attrs_per_class: usize,
    /// Training images per base class.
    pub shots: usize,
    /// Held-out images per class in each test pool.
    pub test_per_class: usize,
    pub noise_std: f64,
    pub distractor_fraction: f64,
    pub distractor_std: f64,
    pub grid: usize,
    pub patch_dim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 18,
            base_classes: 12,
            attributes: 9,
            attrs_per_class: 3,
            shots: 16,
            test_per_class: 80,
            noise_std: 0.5,
            distractor_fraction: 0.375,
            distractor_std: 1.0,
            grid: 4,
            patch_dim: 8,
        }
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn config_err(key: &str, message: String) -> Error {
    Error::Config {
        key: format!("data.{key}"),
        line: None,
        message,
    }
}

impl DataConfig {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Distractor patches per image.
    pub fn distractors_per_image(&self) -> usize {
        (self.distractor_fraction * self.patches() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 4 {
            return Err(config_err("num_classes", format!("need at least 4 classes, got {}", self.num_classes)));
        }
        if self.base_classes < 2 || self.num_classes - self.base_classes.min(self.num_classes) < 2 {
            return Err(config_err(
                "base_classes",
                format!("base and novel splits each need two classes ({} of {})", self.base_classes, self.num_classes),
            ));
        }
        if self.shots < 8 {
            return Err(config_err("shots", format!("need at least 8 samples per class, got {}", self.shots)));
        }
        if self.test_per_class == 0 {
            return Err(config_err("test_per_class", "must be positive".into()));
        }
        if self.attrs_per_class == 0 || self.attrs_per_class > self.attributes {
            return Err(config_err(
                "attrs_per_class",
                format!("{} attributes per class from a pool of {}", self.attrs_per_class, self.attributes),
            ));
        }
        if binomial(self.attributes, self.attrs_per_class) < self.num_classes as u128 {
            return Err(config_err(
                "num_classes",
                format!(
                    "{} classes exceed the {} distinct attribute sets",
                    self.num_classes,
                    binomial(self.attributes, self.attrs_per_class)
                ),
            ));
        }
        if self.grid == 0 || self.patch_dim == 0 {
            return Err(config_err("grid", "image grid and patch size must be positive".into()));
        }
        if !(0.3..1.0).contains(&self.distractor_fraction) {
            return Err(config_err(
                "distractor_fraction",
                format!("must lie in [0.3, 1), got {}", self.distractor_fraction),
            ));
        }
        if self.distractors_per_image() >= self.patches() {
            return Err(config_err("distractor_fraction", "leaves no class patches".into()));
        }
        for (k, v) in [("noise_std", self.noise_std), ("distractor_std", self.distractor_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(k, format!("must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Train,
    TestBase,
    TestNovel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Global class id.
    pub label: usize,
    /// `grid² × patch_dim`.
    pub image: Tensor,
    /// Which patches are distractors.
    pub distractors: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: DataConfig,
    pub seed: u64,
    /// Attribute ids of each class, ascending.
    pub class_attributes: Vec<Vec<usize>>,
    /// `patches × patch_dim` template of each class.
    pub prototypes: Vec<Tensor>,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    pub train: Vec<Sample>,
    pub test_base: Vec<Sample>,
    pub test_novel: Vec<Sample>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    std * Distribution::<f64>::sample(&StandardNormal, rng)
}

/// Builds a dataset; the same `(config, seed)` always yields identical data.
pub fn generate_dataset(config: &DataConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = rng_for(derive_seed(seed, Purpose::Data));
    let (a, k, p, d) = (config.attributes, config.attrs_per_class, config.patches(), config.patch_dim);

    let patterns: Vec<Vec<f64>> = (0..a).map(|_| (0..d).map(|_| gaussian(&mut rng, 1.0)).collect()).collect();

    let mut combos = Vec::new();
    let mut cur = Vec::with_capacity(k);
    subsets(a, k, 0, &mut cur, &mut combos);
    combos.shuffle(&mut rng);
    let mut class_attributes: Vec<Vec<usize>> = combos.into_iter().take(config.num_classes).collect();

    // Prefer a split whose base classes cover every attribute.
    let mut order: Vec<usize> = (0..config.num_classes).collect();
    for _ in 0..64 {
        order.shuffle(&mut rng);
        let mut seen = vec![false; a];
        order[..config.base_classes]
            .iter()
            .flat_map(|&c| &class_attributes[c])
            .for_each(|&x| seen[x] = true);
        if seen.iter().all(|&s| s) {
            break;
        }
    }
    class_attributes = order.iter().map(|&c| class_attributes[c].clone()).collect();
    let base: Vec<usize> = (0..config.base_classes).collect();
    let novel: Vec<usize> = (config.base_classes..config.num_classes).collect();

    let prototypes: Vec<Tensor> = class_attributes
        .iter()
        .map(|attrs| {
            let data = (0..p).flat_map(|patch| patterns[attrs[patch % k]].clone()).collect();
            Tensor::from_parts(vec![p, d], data)
        })
        .collect();

    let draw = |classes: &[usize], per_class: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Sample> {
        let mut out = Vec::with_capacity(classes.len() * per_class);
        for &c in classes {
            for _ in 0..per_class {
                out.push(sample(config, &prototypes[c], c, rng));
            }
        }
        out
    };
    let train = draw(&base, config.shots, &mut rng);
    let test_base = draw(&base, config.test_per_class, &mut rng);
    let test_novel = draw(&novel, config.test_per_class, &mut rng);
    Ok(SyntheticDataset {
        config: config.clone(),
        seed,
        class_attributes,
        prototypes,
        base,
        novel,
        train,
        test_base,
        test_novel,
    })
}

fn subsets(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        subsets(n, k, i + 1, cur, out);
        cur.pop();
    }
}

fn sample<R: Rng + ?Sized>(config: &DataConfig, proto: &Tensor, label: usize, rng: &mut R) -> Sample {
    let (p, d) = (config.patches(), config.patch_dim);
    let mut positions: Vec<usize> = (0..p).collect();
    positions.shuffle(rng);
    let mut distractors = vec![false; p];
    positions[..config.distractors_per_image()].iter().for_each(|&i| distractors[i] = true);
    let mut data = Vec::with_capacity(p * d);
    for (i, &is_distractor) in distractors.iter().enumerate() {
        for &v in proto.row(i) {
            data.push(if is_distractor {
                gaussian(rng, config.distractor_std)
            } else {
                v + gaussian(rng, config.noise_std)
            });
        }
    }
    Sample {
        label,
        image: Tensor::from_parts(vec![p, d], data),
        distractors,
    }
}

impl SyntheticDataset {
    /// Token ids describing a class: one per attribute, offset past id 0.
    pub fn class_tokens(&self, class: usize) -> Vec<usize> {
        self.class_attributes[class].iter().map(|a| a + 1).collect()
    }

    /// Smallest vocabulary that covers every class description.
    pub fn vocab_needed(&self) -> usize {
        self.config.attributes + 1
    }

    pub fn classes(&self, split: Split) -> &[usize] {
        match split {
            Split::Base => &self.base,
            Split::Novel => &self.novel,
        }
    }

    pub fn pool(&self, pool: Pool) -> &[Sample] {
        match pool {
            Pool::Train => &self.train,
            Pool::TestBase => &self.test_base,
            Pool::TestNovel => &self.test_novel,
        }
    }

    pub fn test_pool(&self, split: Split) -> &[Sample] {
        match split {
            Split::Base => &self.test_base,
            Split::Novel => &self.test_novel,
        }
    }

    /// Index of `class` within its split.
    pub fn split_index(&self, class: usize) -> Option<(Split, usize)> {
        if let Some(i) = self.base.iter().position(|&c| c == class) {
            return Some((Split::Base, i));
        }
        self.novel.iter().position(|&c| c == class).map(|i| (Split::Novel, i))
    }

    /// Index of the nearest prototype (Euclidean) among all classes.
    pub fn nearest_prototype(&self, image: &Tensor) -> usize {
        let dist = |t: &Tensor| t.data().iter().zip(image.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..self.prototypes.len())
            .min_by(|&i, &j| dist(&self.prototypes[i]).total_cmp(&dist(&self.prototypes[j])))
            .expect("at least one class")
    }

    /// Saves `manifest.json` and `samples.bin` under `dir`.
    pub fn save(&self, dir: &Path, meta: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut records = Vec::new();
        let mut offset = 0;
        for pool in [Pool::Train, Pool::TestBase, Pool::TestNovel] {
            for s in self.pool(pool) {
                s.image.data().iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
                records.push(SampleRecord {
                    pool,
                    label: s.label,
                    offset,
                    distractors: s.distractors.clone(),
                });
                offset += s.image.numel();
            }
        }
        let manifest = Manifest {
            meta: meta.clone(),
            config: self.config.clone(),
            seed: self.seed,
            class_attributes: self.class_attributes.clone(),
            prototypes: self.prototypes.iter().map(|t| t.data().to_vec()).collect(),
            base: self.base.clone(),
            novel: self.novel.clone(),
            samples: records,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        std::fs::write(dir.join("samples.bin"), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        manifest.config.validate()?;
        let blob = std::fs::read(dir.join("samples.bin"))?;
        if blob.len() % 8 != 0 {
            return Err(Error::Format("sample blob is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        let cfg = &manifest.config;
        let shape = vec![cfg.patches(), cfg.patch_dim];
        let n = cfg.patches() * cfg.patch_dim;
        let mut ds = SyntheticDataset {
            config: cfg.clone(),
            seed: manifest.seed,
            class_attributes: manifest.class_attributes,
            prototypes: manifest
                .prototypes
                .into_iter()
                .map(|p| Tensor::new(shape.clone(), p))
                .collect::<Result<_>>()?,
            base: manifest.base,
            novel: manifest.novel,
            train: Vec::new(),
            test_base: Vec::new(),
            test_novel: Vec::new(),
        };
        for r in manifest.samples {
            let chunk = values
                .get(r.offset..r.offset + n)
                .ok_or_else(|| Error::Format(format!("sample at offset {} runs past the blob", r.offset)))?;
            let s = Sample {
                label: r.label,
                image: Tensor::new(shape.clone(), chunk.to_vec())?,
                distractors: r.distractors,
            };
            match r.pool {
                Pool::Train => ds.train.push(s),
                Pool::TestBase => ds.test_base.push(s),
                Pool::TestNovel => ds.test_novel.push(s),
            }
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    pool: Pool,
    label: usize,
    offset: usize,
    distractors: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    config: DataConfig,
    seed: u64,
    class_attributes: Vec<Vec<usize>>,
    prototypes: Vec<Vec<f64>>,
    base: Vec<usize>,
    novel: Vec<usize>,
    samples: Vec<SampleRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_disjoint() {
        let cfg = DataConfig::default();
        let a = generate_dataset(&cfg, 4).unwrap();
        assert_eq!(a, generate_dataset(&cfg, 4).unwrap());
        assert_ne!(a.train[0].image, generate_dataset(&cfg, 5).unwrap().train[0].image);
        assert!(a.base.iter().all(|c| !a.novel.contains(c)));
        assert_eq!(a.train.len(), 12 * 16);
        assert!(a.train.iter().all(|s| a.base.contains(&s.label)));
        assert!(a.test_novel.iter().all(|s| a.novel.contains(&s.label)));
    }

    #[test]
    fn prototypes_are_distinct() {
        let ds = generate_dataset(&DataConfig::default(), 1).unwrap();
        for i in 0..ds.prototypes.len() {
            assert_eq!(ds.nearest_prototype(&ds.prototypes[i]), i);
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let cfg = DataConfig {
            attributes: 4,
            attrs_per_class: 2,
            num_classes: 7,
            base_classes: 4,
            ..DataConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg, 0), Err(Error::Config { .. })));
        let cfg = DataConfig {
            num_classes: 3,
            ..DataConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg, 0), Err(Error::Config { .. })));
        let cfg = DataConfig {
            distractor_fraction: 0.2,
            ..DataConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn snapshot_round_trip() {
        let ds = generate_dataset(&DataConfig::default(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), &serde_json::json!({"seed": 8})).unwrap();
        assert!(SyntheticDataset::load(dir.path()).unwrap() == ds);
    }
}

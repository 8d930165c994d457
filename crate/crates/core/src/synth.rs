//! Seeded synthetic image suite standing in for a set of fine-grained
//! datasets and a web-crawled outlier corpus.
//!
//! Every dataset is a *family*: a shared base pattern plus, per class, a
//! random combination of a small family-specific vocabulary of part
//! patterns. Classes of one family therefore differ only in fine detail,
//! while different families differ in their base and parts. The outlier
//! corpus consists of unrelated concept families, plus a few examples of
//! every dataset family labeled with the dataset name so that concept
//! filtering has something to remove.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Example, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::splits::OutlierPool;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub name: String,
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    pub shape: InputShape,
    pub families: Vec<FamilyConfig>,
    /// Size of each family's part vocabulary.
    pub n_parts: usize,
    /// Scale of the class-specific detail relative to the family base.
    pub class_spread: f64,
    /// Standard deviation, as a fraction of the image side, of the Gaussian
    /// window that localizes each part. `None` leaves parts global.
    #[serde(default)]
    pub part_width: Option<f64>,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    pub web_concepts: usize,
    pub web_per_concept: usize,
    /// Examples of each dataset family planted in the outlier corpus.
    pub contamination_per_dataset: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let family = |name: &str, n_classes, train_per_class, test_per_class| FamilyConfig {
            name: name.to_string(),
            n_classes,
            train_per_class,
            test_per_class,
        };
        Self {
            seed: 0,
            shape: InputShape::new(1, 8, 8),
            families: vec![
                family("fgvc-a", 30, 40, 60),
                family("fgvc-b", 10, 10, 10),
                family("fgvc-c", 10, 10, 10),
                family("fgvc-d", 10, 10, 10),
            ],
            n_parts: 6,
            class_spread: 1.0,
            part_width: None,
            noise: 0.7,
            web_concepts: 40,
            web_per_concept: 50,
            contamination_per_dataset: 100,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.dim() == 0 {
            return Err(Error::invalid_arg("suite image shape is empty"));
        }
        if self.families.is_empty() {
            return Err(Error::invalid_arg("suite has no dataset families"));
        }
        let mut names: Vec<&str> = self.families.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid_arg("dataset family names must be unique"));
        }
        if self.families.iter().any(|f| f.n_classes == 0) {
            return Err(Error::invalid_arg("every family needs at least one class"));
        }
        if self.n_parts == 0 {
            return Err(Error::invalid_arg("n_parts must be positive"));
        }
        if !(self.noise >= 0.0 && self.class_spread >= 0.0) {
            return Err(Error::invalid_arg("noise and class_spread must be non-negative"));
        }
        Ok(())
    }
}

/// Generated datasets (by name) and the unfiltered outlier corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub shape: InputShape,
    pub datasets: BTreeMap<String, LabeledDataset>,
    pub outliers: OutlierPool,
}

/// Zero-mean, unit-RMS pattern built from random low-frequency cosines.
fn smooth_pattern(shape: InputShape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let mut out = vec![0.0; shape.dim()];
    for c in 0..shape.channels {
        for u in 0..4usize {
            for v in 0..4usize {
                if u == 0 && v == 0 {
                    continue;
                }
                let amp: f64 = StandardNormal.sample(rng);
                let amp = amp / (1.0 + (u * u + v * v) as f64).sqrt();
                let phase_y = rng.random_range(0.0..2.0 * PI);
                let phase_x = rng.random_range(0.0..2.0 * PI);
                for y in 0..h {
                    let fy = (PI * u as f64 * (y as f64 + 0.5) / h as f64 + phase_y).cos();
                    for x in 0..w {
                        let fx = (PI * v as f64 * (x as f64 + 0.5) / w as f64 + phase_x).cos();
                        out[c * h * w + y * w + x] += amp * fy * fx;
                    }
                }
            }
        }
    }
    normalize(&mut out);
    out
}

fn normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}

/// Multiplies a pattern by a Gaussian window at a random centre, then
/// renormalizes.
fn localize(p: &mut [f64], shape: InputShape, width: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (shape.height as f64, shape.width as f64);
    let cy = rng.random_range(0.0..h);
    let cx = rng.random_range(0.0..w);
    let (sy, sx) = (width * h, width * w);
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let dy = (y as f64 + 0.5 - cy) / sy;
                let dx = (x as f64 + 0.5 - cx) / sx;
                p[c * shape.height * shape.width + y * shape.width + x] *= (-0.5 * (dy * dy + dx * dx)).exp();
            }
        }
    }
    normalize(p);
}

/// Base pattern plus per-class part combinations for one family.
struct Family {
    base: Vec<f64>,
    parts: Vec<Vec<f64>>,
}

impl Family {
    fn new(shape: InputShape, n_parts: usize, part_width: Option<f64>, rng: &mut ChaCha8Rng) -> Self {
        let base = smooth_pattern(shape, rng);
        let parts = (0..n_parts)
            .map(|_| {
                let mut p = smooth_pattern(shape, rng);
                if let Some(width) = part_width {
                    localize(&mut p, shape, width, rng);
                }
                p
            })
            .collect();
        Self { base, parts }
    }

    fn prototype(&self, spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut detail = vec![0.0; self.base.len()];
        for part in &self.parts {
            let w: f64 = StandardNormal.sample(rng);
            detail.iter_mut().zip(part).for_each(|(d, p)| *d += w * p);
        }
        normalize(&mut detail);
        self.base.iter().zip(&detail).map(|(b, d)| b + spread * d).collect()
    }
}

fn sample(prototype: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gain = rng.random_range(0.8..1.2);
    prototype
        .iter()
        .map(|&p| {
            let n: f64 = StandardNormal.sample(rng);
            gain * p + noise * n
        })
        .collect()
}

pub fn generate(config: &SuiteConfig) -> Result<Suite> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape = config.shape;
    let mut next_id = 0u64;
    let mut fresh_id = || {
        next_id += 1;
        next_id - 1
    };

    let mut datasets = BTreeMap::new();
    let mut families = Vec::new();
    for fc in &config.families {
        let family = Family::new(shape, config.n_parts, config.part_width, &mut rng);
        let classes: Vec<String> = (0..fc.n_classes).map(|i| format!("{i:04}")).collect();
        let prototypes: Vec<Vec<f64>> = (0..fc.n_classes)
            .map(|_| family.prototype(config.class_spread, &mut rng))
            .collect();
        let mut portion = |per_class: usize, rng: &mut ChaCha8Rng| {
            let mut v = Vec::with_capacity(per_class * fc.n_classes);
            for (class, proto) in classes.iter().zip(&prototypes) {
                for _ in 0..per_class {
                    v.push(Example {
                        id: fresh_id(),
                        label: Some(class.clone()),
                        source: fc.name.clone(),
                        input: sample(proto, config.noise, rng),
                    });
                }
            }
            v
        };
        let train = portion(fc.train_per_class, &mut rng);
        let test = portion(fc.test_per_class, &mut rng);
        datasets.insert(
            fc.name.clone(),
            LabeledDataset {
                name: fc.name.clone(),
                classes,
                shape,
                train,
                test,
            },
        );
        families.push(family);
    }

    let mut corpus = Vec::new();
    for g in 0..config.web_concepts {
        let family = Family::new(shape, config.n_parts, config.part_width, &mut rng);
        let concept = format!("web-{g:03}");
        for _ in 0..config.web_per_concept {
            let proto = family.prototype(config.class_spread, &mut rng);
            corpus.push(Example {
                id: fresh_id(),
                label: Some(concept.clone()),
                source: "web".into(),
                input: sample(&proto, config.noise, &mut rng),
            });
        }
    }
    for (fc, family) in config.families.iter().zip(&families) {
        for _ in 0..config.contamination_per_dataset {
            let proto = family.prototype(config.class_spread, &mut rng);
            corpus.push(Example {
                id: fresh_id(),
                label: Some(fc.name.clone()),
                source: "web".into(),
                input: sample(&proto, config.noise, &mut rng),
            });
        }
    }
    // Interleave concepts so that pool order carries no concept structure.
    use rand::seq::SliceRandom;
    corpus.shuffle(&mut rng);

    Ok(Suite {
        shape,
        datasets,
        outliers: OutlierPool::from_labeled(corpus)?,
    })
}

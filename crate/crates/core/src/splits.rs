//! Holdout-class test environments, ID data partitions and the auxiliary
//! outlier pool.
//!
//! An environment keeps some classes of a fine-grained dataset as the
//! in-distribution task and holds the rest out entirely: they are removed from
//! training and their test images become the fine-grained OOD set. The test
//! portions of other datasets serve as coarse-grained OOD.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, ExampleSet, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::InputShape;

/// A named ID / fine-OOD / coarse-OOD partition with its seed provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub dataset_name: String,
    /// 1-based.
    pub split_index: u32,
    pub seed: u64,
    pub id_classes: Vec<String>,
    pub fine_ood_classes: Vec<String>,
    pub coarse_ood_sources: Vec<String>,
}

impl EnvironmentSpec {
    /// Checks the invariants that do not need the dataset itself.
    pub fn validate(&self) -> Result<()> {
        if self.dataset_name.is_empty() {
            return Err(Error::InvalidData("empty dataset_name".into()));
        }
        if self.split_index == 0 {
            return Err(Error::InvalidData("split_index is 1-based".into()));
        }
        if self.id_classes.is_empty() {
            return Err(Error::InvalidData("environment has no ID classes".into()));
        }
        let mut seen = HashSet::new();
        for class in self.id_classes.iter().chain(&self.fine_ood_classes) {
            if !seen.insert(class.as_str()) {
                return Err(Error::InvalidData(format!(
                    "class {class:?} appears more than once across id_classes and fine_ood_classes"
                )));
            }
        }
        if self.coarse_ood_sources.contains(&self.dataset_name) {
            return Err(Error::InvalidData(format!(
                "dataset {:?} cannot be its own coarse-OOD source",
                self.dataset_name
            )));
        }
        let mut sources = HashSet::new();
        if let Some(dup) = self.coarse_ood_sources.iter().find(|s| !sources.insert(s.as_str())) {
            return Err(Error::InvalidData(format!("duplicate coarse-OOD source {dup:?}")));
        }
        Ok(())
    }

    /// Also requires ID ∪ fine-OOD to be exactly the dataset's class set.
    pub fn validate_against(&self, dataset: &LabeledDataset) -> Result<()> {
        self.validate()?;
        if dataset.name != self.dataset_name {
            return Err(Error::InvalidArgument(format!(
                "environment is for {:?}, got dataset {:?}",
                self.dataset_name, dataset.name
            )));
        }
        let ours: HashSet<&str> = self
            .id_classes
            .iter()
            .chain(&self.fine_ood_classes)
            .map(String::as_str)
            .collect();
        let theirs: HashSet<&str> = dataset.classes.iter().map(String::as_str).collect();
        if ours != theirs {
            return Err(Error::InvalidData(format!(
                "ID and fine-OOD classes do not cover the class set of {:?}",
                dataset.name
            )));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("environment serializes");
        text.push('\n');
        text
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::parse("split manifest", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest(&text)
    }

    /// Conventional manifest file name, e.g. `aircraft_split1.json`.
    pub fn file_name(&self) -> String {
        format!("{}_split{}.json", self.dataset_name, self.split_index)
    }
}

/// Generator for one split: the stream is selected by the split index so each
/// split is an independent draw.
fn split_rng(seed: u64, split_index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(split_index));
    rng
}

/// Draws `n_splits` independent holdout environments. In each, the fine-OOD
/// classes are a uniformly random `n_ood`-subset of `class_set`; both class
/// lists keep the order of `class_set`.
pub fn make_holdout_splits(
    dataset_name: &str,
    class_set: &[String],
    coarse_ood_sources: &[String],
    n_ood: usize,
    n_splits: u32,
    seed: u64,
) -> Result<Vec<EnvironmentSpec>> {
    if class_set.is_empty() {
        return Err(Error::invalid_arg("class set is empty"));
    }
    if n_ood >= class_set.len() {
        return Err(Error::invalid_arg(format!(
            "n_ood = {n_ood} must be smaller than the class count {}",
            class_set.len()
        )));
    }
    if n_splits == 0 {
        return Err(Error::invalid_arg("n_splits must be at least 1"));
    }
    let unique: HashSet<&String> = class_set.iter().collect();
    if unique.len() != class_set.len() {
        return Err(Error::invalid_arg("class set contains duplicates"));
    }

    (1..=n_splits)
        .map(|split_index| {
            let mut rng = split_rng(seed, split_index);
            let held: HashSet<usize> = rand::seq::index::sample(&mut rng, class_set.len(), n_ood)
                .into_iter()
                .collect();
            let (fine, id): (Vec<_>, Vec<_>) = class_set.iter().enumerate().partition(|(i, _)| held.contains(i));
            let spec = EnvironmentSpec {
                dataset_name: dataset_name.to_string(),
                split_index,
                seed,
                id_classes: id.into_iter().map(|(_, c)| c.clone()).collect(),
                fine_ood_classes: fine.into_iter().map(|(_, c)| c.clone()).collect(),
                coarse_ood_sources: coarse_ood_sources.to_vec(),
            };
            spec.validate().map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok(spec)
        })
        .collect()
}

/// ID training, validation and test data of one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPartition {
    pub id_classes: Vec<String>,
    pub shape: InputShape,
    pub train: ExampleSet,
    pub validation: ExampleSet,
    pub test: ExampleSet,
}

/// Drops the fine-OOD classes and splits the remaining training examples per
/// class into train/validation. Each class contributes `floor(n·val_fraction)`
/// validation examples, at least one when it has two or more.
pub fn partition_id_data(
    dataset: &LabeledDataset,
    spec: &EnvironmentSpec,
    val_fraction: f64,
    seed: u64,
) -> Result<DataPartition> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid_arg(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    spec.validate_against(dataset)?;

    let mut by_class: BTreeMap<&str, Vec<usize>> = spec.id_classes.iter().map(|c| (c.as_str(), Vec::new())).collect();
    for (pos, ex) in dataset.train.iter().enumerate() {
        if let Some(bucket) = ex.label.as_deref().and_then(|l| by_class.get_mut(l)) {
            bucket.push(pos);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_validation = HashSet::new();
    for class in &spec.id_classes {
        let bucket = by_class.get_mut(class.as_str()).expect("bucket per class");
        let n = bucket.len();
        if n == 0 {
            return Err(Error::InvalidData(format!(
                "ID class {class:?} has no training examples"
            )));
        }
        let mut n_val = (n as f64 * val_fraction).floor() as usize;
        if n >= 2 && n_val == 0 {
            n_val = 1;
        }
        bucket.shuffle(&mut rng);
        in_validation.extend(bucket[..n_val].iter().copied());
    }

    let id_set: HashSet<&str> = spec.id_classes.iter().map(String::as_str).collect();
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (pos, ex) in dataset.train.iter().enumerate() {
        if !ex.label.as_deref().is_some_and(|l| id_set.contains(l)) {
            continue;
        }
        if in_validation.contains(&pos) {
            validation.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    let test = dataset
        .test
        .iter()
        .filter(|ex| ex.label.as_deref().is_some_and(|l| id_set.contains(l)))
        .cloned()
        .collect();

    Ok(DataPartition {
        id_classes: spec.id_classes.clone(),
        shape: dataset.shape,
        train: train.into(),
        validation: validation.into(),
        test: ExampleSet::new(test),
    })
}

/// Test images of the held-out classes: the fine-grained OOD evaluation set.
pub fn fine_ood_test(dataset: &LabeledDataset, spec: &EnvironmentSpec) -> Result<Vec<Example>> {
    spec.validate_against(dataset)?;
    let held: HashSet<&str> = spec.fine_ood_classes.iter().map(String::as_str).collect();
    Ok(dataset
        .test
        .iter()
        .filter(|ex| ex.label.as_deref().is_some_and(|l| held.contains(l)))
        .cloned()
        .collect())
}

/// Concatenates the test portions of all coarse-OOD sources, in source order.
/// Every example keeps its source dataset name as the tag.
pub fn assemble_coarse_ood(
    spec: &EnvironmentSpec,
    datasets: &BTreeMap<String, LabeledDataset>,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for source in &spec.coarse_ood_sources {
        let dataset = datasets
            .get(source)
            .ok_or_else(|| Error::invalid_arg(format!("coarse-OOD source dataset {source:?} is missing")))?;
        out.extend(dataset.test.iter().map(|ex| Example {
            source: source.clone(),
            ..ex.clone()
        }));
    }
    Ok(out)
}

/// Unlabeled auxiliary outliers. `source_labels` (parallel to `examples`)
/// exist only so concept filtering can be applied.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierPool {
    pub examples: Vec<Example>,
    pub source_labels: Option<Vec<String>>,
    pub excluded_concepts: Vec<String>,
}

impl OutlierPool {
    /// Moves each example's label into `source_labels`, leaving the examples
    /// unlabeled.
    pub fn from_labeled(examples: Vec<Example>) -> Result<Self> {
        let mut labels = Vec::with_capacity(examples.len());
        let examples = examples
            .into_iter()
            .map(|mut ex| {
                let label = ex
                    .label
                    .take()
                    .ok_or_else(|| Error::InvalidData(format!("outlier {} has no source label", ex.id)))?;
                labels.push(label);
                Ok(ex)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            examples,
            source_labels: Some(labels),
            excluded_concepts: Vec::new(),
        })
    }

    pub fn unlabeled(examples: Vec<Example>) -> Self {
        let examples = examples.into_iter().map(|ex| Example { label: None, ..ex }).collect();
        Self {
            examples,
            source_labels: None,
            excluded_concepts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Self {
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
            source_labels: self
                .source_labels
                .as_ref()
                .map(|labels| idx.iter().map(|&i| labels[i].clone()).collect()),
            excluded_concepts: self.excluded_concepts.clone(),
        }
    }
}

/// Removes every outlier whose source label is in `forbidden`, preserving
/// order.
pub fn filter_outlier_pool(pool: &OutlierPool, forbidden: &[String]) -> Result<OutlierPool> {
    if forbidden.is_empty() {
        return Ok(pool.clone());
    }
    let labels = pool
        .source_labels
        .as_ref()
        .ok_or_else(|| Error::Unsupported("cannot filter an outlier pool without source labels".into()))?;
    let forbidden_set: HashSet<&str> = forbidden.iter().map(String::as_str).collect();
    let mut filtered = pool.select(|i| !forbidden_set.contains(labels[i].as_str()));
    for concept in forbidden {
        if !filtered.excluded_concepts.contains(concept) {
            filtered.excluded_concepts.push(concept.clone());
        }
    }
    if filtered.is_empty() && !pool.is_empty() {
        log::warn!("concept filtering removed every outlier from the pool");
    }
    Ok(filtered)
}

/// Deterministic disjoint split into (training pool, validation pool). The
/// validation pool has `round(n·fraction)` outliers; both keep pool order.
pub fn split_outlier_validation(pool: &OutlierPool, fraction: f64, seed: u64) -> Result<(OutlierPool, OutlierPool)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid_arg(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = pool.len();
    let n_val = (n as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val: HashSet<usize> = order[..n_val].iter().copied().collect();
    Ok((pool.select(|i| !val.contains(&i)), pool.select(|i| val.contains(&i))))
}

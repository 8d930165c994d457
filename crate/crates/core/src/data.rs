//! Example containers shared by the split, training and evaluation code.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputShape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    /// Unique across every dataset in a suite.
    pub id: u64,
    pub label: Option<String>,
    /// Name of the dataset (or corpus) the example was drawn from.
    pub source: String,
    pub input: Vec<f64>,
}

/// A labeled dataset with its canonical train/test portions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub classes: Vec<String>,
    pub shape: InputShape,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// A collection of examples that counts how many times its contents are
/// handed out. Training code must never read test-time collections; the
/// counter lets callers verify that.
#[derive(Debug, Default)]
pub struct ExampleSet {
    examples: Vec<Example>,
    reads: AtomicUsize,
}

impl Clone for ExampleSet {
    fn clone(&self) -> Self {
        Self::new(self.examples.clone())
    }
}

impl PartialEq for ExampleSet {
    fn eq(&self, other: &Self) -> bool {
        self.examples == other.examples
    }
}

impl ExampleSet {
    pub fn new(examples: Vec<Example>) -> Self {
        Self {
            examples,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Hands out the examples and records one read.
    pub fn examples(&self) -> &[Example] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.examples
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> Vec<Example> {
        self.examples
    }
}

impl From<Vec<Example>> for ExampleSet {
    fn from(examples: Vec<Example>) -> Self {
        Self::new(examples)
    }
}

/// Maps class identifiers to contiguous output indices, in ID-class order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndex {
    classes: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl ClassIndex {
    pub fn new(classes: &[String]) -> Self {
        let lookup = classes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self {
            classes: classes.to_vec(),
            lookup,
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.lookup.get(class).copied()
    }

    pub fn labels(&self, examples: &[&Example]) -> Result<Vec<usize>> {
        examples
            .iter()
            .map(|ex| {
                let label = ex
                    .label
                    .as_deref()
                    .ok_or_else(|| Error::InvalidData(format!("example {} has no label", ex.id)))?;
                self.index_of(label).ok_or_else(|| {
                    Error::InvalidData(format!("example {} has label {label:?} outside the ID classes", ex.id))
                })
            })
            .collect()
    }
}

/// Stacks example inputs into an `n × dim` matrix.
pub fn stack_inputs<'a, I>(examples: I, dim: usize) -> Result<Array2<f64>>
where
    I: IntoIterator<Item = &'a Example>,
{
    let mut flat = Vec::new();
    let mut rows = 0;
    for ex in examples {
        if ex.input.len() != dim {
            return Err(Error::InvalidData(format!(
                "example {} has {} input values, expected {dim}",
                ex.id,
                ex.input.len()
            )));
        }
        flat.extend_from_slice(&ex.input);
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, dim), flat).expect("row-major shape matches"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: u64, label: &str) -> Example {
        Example {
            id,
            label: Some(label.to_string()),
            source: "d".into(),
            input: vec![id as f64, 0.0],
        }
    }

    #[test]
    fn read_counter_tracks_access() {
        let set = ExampleSet::new(vec![ex(1, "a")]);
        assert_eq!(set.reads(), 0);
        assert_eq!(set.len(), 1);
        let _ = set.examples();
        let _ = set.examples();
        assert_eq!(set.reads(), 2);
        assert_eq!(set.clone().reads(), 0);
    }

    #[test]
    fn labels_outside_index_are_rejected() {
        let index = ClassIndex::new(&["a".to_string()]);
        let e = ex(1, "b");
        assert!(matches!(index.labels(&[&e]), Err(Error::InvalidData(_))));
    }

    #[test]
    fn stack_checks_dimension() {
        let e = ex(1, "a");
        assert_eq!(stack_inputs([&e], 2).unwrap().shape(), &[1, 2]);
        assert!(stack_inputs([&e], 3).is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::{accuracy_on, finetune, prepare, Checkpoint, TrainConfig};
use crate::data::{stack_inputs, ClassIndex};
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::model::Classifier;
use crate::objectives::ObjectiveConfig;
use crate::scoring::msp_unchecked;
use crate::splits::{DataPartition, EnvironmentSpec, OutlierPool};

/// Largest admissible ID-validation accuracy drop, in percentage points.
pub const MAX_ACCURACY_DROP_PTS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningCandidate {
    pub config: ObjectiveConfig,
    /// MSP AUROC of ID validation against outlier validation.
    pub auroc: f64,
    pub accuracy: f64,
    /// Baseline minus candidate accuracy, in percentage points.
    pub accuracy_drop_pts: f64,
}

impl TuningCandidate {
    pub fn qualifies(&self) -> bool {
        self.accuracy_drop_pts <= MAX_ACCURACY_DROP_PTS + 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningOutcome {
    pub chosen: ObjectiveConfig,
    pub chosen_index: usize,
    /// No candidate kept accuracy within the allowed drop; the max-AUROC one
    /// was taken anyway.
    pub flagged: bool,
    pub baseline_accuracy: f64,
    pub split_index: u32,
    pub candidates: Vec<TuningCandidate>,
}

/// Outlier data seen while tuning: the training pool and the held-out
/// outlier validation set.
#[derive(Debug, Clone, Copy)]
pub struct TuningPools<'a> {
    pub train: &'a OutlierPool,
    pub validation: &'a OutlierPool,
}

/// Max AUROC among qualifying candidates, ties broken by accuracy and then
/// by grid order. Falls back to all candidates (flagged) when none qualify.
pub fn select_config(candidates: &[TuningCandidate]) -> Result<(usize, bool)> {
    if candidates.is_empty() {
        return Err(Error::invalid_arg("empty tuning grid"));
    }
    let qualified: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].qualifies()).collect();
    let flagged = qualified.is_empty();
    let pool: Vec<usize> = if flagged {
        (0..candidates.len()).collect()
    } else {
        qualified
    };
    let best = pool
        .into_iter()
        .reduce(|best, i| {
            let (a, b) = (&candidates[best], &candidates[i]);
            let better = b.auroc > a.auroc || (b.auroc == a.auroc && b.accuracy > a.accuracy);
            if better {
                i
            } else {
                best
            }
        })
        .expect("nonempty");
    Ok((best, flagged))
}

/// Fine-tunes one model per grid point on the tuning split and picks the
/// configuration to apply to every split of the dataset.
#[allow(clippy::too_many_arguments)]
pub fn tune_hyperparams<M, F>(
    grid: &[ObjectiveConfig],
    model_factory: F,
    base: &Checkpoint,
    env: &EnvironmentSpec,
    tuning_split_index: u32,
    partition: &DataPartition,
    pools: TuningPools<'_>,
    template: &TrainConfig,
) -> Result<TuningOutcome>
where
    M: Classifier,
    F: Fn() -> Result<M>,
{
    if grid.is_empty() {
        return Err(Error::invalid_arg("empty tuning grid"));
    }
    if env.split_index != tuning_split_index {
        return Err(Error::invalid_arg(format!(
            "tuning uses split {tuning_split_index}, got data of split {}",
            env.split_index
        )));
    }
    for config in grid {
        config.validate()?;
    }
    let mut model = model_factory()?;
    base.restore(&mut model)?;
    let index = ClassIndex::new(&partition.id_classes);
    let validation = prepare(&partition.validation, &index, model.input_dim())?;
    if validation.labels.is_empty() || pools.validation.is_empty() {
        return Err(Error::invalid_arg(
            "tuning needs ID validation and outlier validation data",
        ));
    }
    let outlier_val = stack_inputs(&pools.validation.examples, model.input_dim())?;
    let baseline_accuracy = accuracy_on(&model, &validation).expect("nonempty validation");

    let msp = |m: &M, x: &ndarray::Array2<f64>| -> Vec<f64> {
        m.forward(x)
            .outer_iter()
            .map(|r| msp_unchecked(r.as_slice().expect("contiguous")))
            .collect()
    };

    let mut candidates = Vec::with_capacity(grid.len());
    for config in grid {
        let mut model = model_factory()?;
        let train_config = template.with_objective(config.clone());
        finetune(&mut model, base, partition, pools.train, &train_config)?;
        let accuracy = accuracy_on(&model, &validation).expect("nonempty validation");
        let candidate = TuningCandidate {
            config: config.clone(),
            auroc: auroc(&msp(&model, &validation.inputs), &msp(&model, &outlier_val))?,
            accuracy,
            accuracy_drop_pts: 100.0 * (baseline_accuracy - accuracy),
        };
        log::info!(
            "tuning {}: auroc {:.4}, accuracy {:.4}",
            config.label(),
            candidate.auroc,
            candidate.accuracy
        );
        candidates.push(candidate);
    }
    let (chosen_index, flagged) = select_config(&candidates)?;
    if flagged {
        log::warn!("no grid point kept ID accuracy within {MAX_ACCURACY_DROP_PTS} points");
    }
    Ok(TuningOutcome {
        chosen: grid[chosen_index].clone(),
        chosen_index,
        flagged,
        baseline_accuracy,
        split_index: tuning_split_index,
        candidates,
    })
}

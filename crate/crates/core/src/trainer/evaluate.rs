use crate::data::{stack_inputs, ClassIndex, Example, ExampleSet};
use crate::error::{Error, Result};
use crate::metrics::{build_report, DetectionReport};
use crate::model::Classifier;
use crate::scoring::{Origin, ScoreTable, Scorer};
use crate::splits::EnvironmentSpec;

/// Test-time collections of one environment. Missing origins yield a
/// partial report.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalData<'a> {
    pub id_test: Option<&'a ExampleSet>,
    pub fine_ood: Option<&'a [Example]>,
    pub coarse_ood: Option<&'a [Example]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scores: ScoreTable,
    /// MSP of every example, kept for confidence plots.
    pub confidence: ScoreTable,
    pub report: DetectionReport,
}

pub fn evaluate_environment<M: Classifier>(
    model: &M,
    env: &EnvironmentSpec,
    data: EvalData<'_>,
    scorer: Scorer,
    temperature: f64,
    method: &str,
) -> Result<Evaluation> {
    let index = ClassIndex::new(&env.id_classes);
    if index.len() != model.num_classes() {
        return Err(Error::invalid_arg(format!(
            "model has {} outputs for {} ID classes",
            model.num_classes(),
            index.len()
        )));
    }
    let mut scores = ScoreTable::new(scorer, temperature)?;
    let mut confidence = ScoreTable::new(Scorer::Msp, 1.0)?;
    let mut predictions = Vec::new();
    let mut labels = Vec::new();

    let mut score = |examples: &[Example], origin: Origin| -> Result<ndarray::Array2<f64>> {
        let inputs = stack_inputs(examples, model.input_dim())?;
        let logits = model.forward(&inputs);
        let ids: Vec<u64> = examples.iter().map(|e| e.id).collect();
        let rows = || logits.outer_iter().map(|r| r.to_slice().expect("contiguous"));
        scores.push_logits(&ids, rows(), origin)?;
        confidence.push_logits(&ids, rows(), origin)?;
        Ok(logits)
    };

    if let Some(set) = data.id_test {
        let examples = set.examples();
        let logits = score(examples, Origin::IdTest)?;
        let refs: Vec<&Example> = examples.iter().collect();
        labels = index.labels(&refs)?;
        predictions = logits
            .outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect();
    }
    if let Some(fine) = data.fine_ood {
        score(fine, Origin::FineOod)?;
    }
    if let Some(coarse) = data.coarse_ood {
        score(coarse, Origin::CoarseOod)?;
    }

    let mut report = build_report(&scores, &predictions, &labels, env, method)?;
    report.mean_confidence_id = confidence.mean_for(Origin::IdTest);
    report.mean_confidence_fine = confidence.mean_for(Origin::FineOod);
    report.mean_confidence_coarse = confidence.mean_for(Origin::CoarseOod);
    Ok(Evaluation {
        scores,
        confidence,
        report,
    })
}

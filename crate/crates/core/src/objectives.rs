//! Training objectives and their gradients.
//!
//! Every objective is a weighted sum of per-batch mean losses on the model's
//! logits. Each loss is evaluated on one forward pass and contributes
//! `weight · ∂loss/∂logits` to a single backward pass through the model.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logsumexp, softmax};
use crate::mixing::{self, check_distribution, MixMode, MixRecord};
use crate::model::{Classifier, InputShape};

fn default_pool_factor() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hinge {
    #[default]
    Squared,
    Linear,
}

/// How the ID and outlier energy hinges are combined into one regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HingeReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Standard,
    Oe,
    OeHardMining,
    EnergyOe,
    Mix,
    Mixoe,
    MixPlusOe,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 7] = [
        ObjectiveKind::Standard,
        ObjectiveKind::Oe,
        ObjectiveKind::OeHardMining,
        ObjectiveKind::EnergyOe,
        ObjectiveKind::Mix,
        ObjectiveKind::Mixoe,
        ObjectiveKind::MixPlusOe,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::Standard => "standard",
            ObjectiveKind::Oe => "oe",
            ObjectiveKind::OeHardMining => "oe_hard_mining",
            ObjectiveKind::EnergyOe => "energy_oe",
            ObjectiveKind::Mix => "mix",
            ObjectiveKind::Mixoe => "mixoe",
            ObjectiveKind::MixPlusOe => "mix_plus_oe",
        }
    }

    pub fn uses_outliers(&self) -> bool {
        !matches!(self, ObjectiveKind::Standard | ObjectiveKind::Mix)
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid_arg(format!("unknown objective kind {s:?}")))
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which loss to optimize, with exactly the hyperparameters that kind uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    Standard,
    Oe {
        beta: f64,
    },
    OeHardMining {
        beta: f64,
        #[serde(default = "default_pool_factor")]
        mining_pool_factor: usize,
    },
    EnergyOe {
        beta: f64,
        m_in: f64,
        m_out: f64,
        #[serde(default)]
        hinge: Hinge,
        #[serde(default)]
        reduction: HingeReduction,
    },
    Mix {
        alpha: f64,
        beta: f64,
        mode: MixMode,
    },
    Mixoe {
        alpha: f64,
        beta: f64,
        mode: MixMode,
    },
    MixPlusOe {
        alpha: f64,
        beta_mix: f64,
        beta_oe: f64,
        mode: MixMode,
    },
}

impl ObjectiveConfig {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            ObjectiveConfig::Standard => ObjectiveKind::Standard,
            ObjectiveConfig::Oe { .. } => ObjectiveKind::Oe,
            ObjectiveConfig::OeHardMining { .. } => ObjectiveKind::OeHardMining,
            ObjectiveConfig::EnergyOe { .. } => ObjectiveKind::EnergyOe,
            ObjectiveConfig::Mix { .. } => ObjectiveKind::Mix,
            ObjectiveConfig::Mixoe { .. } => ObjectiveKind::Mixoe,
            ObjectiveConfig::MixPlusOe { .. } => ObjectiveKind::MixPlusOe,
        }
    }

    /// Short label such as `mixoe-cut`, used in reports.
    pub fn label(&self) -> String {
        match self {
            ObjectiveConfig::Mix { mode, .. }
            | ObjectiveConfig::Mixoe { mode, .. }
            | ObjectiveConfig::MixPlusOe { mode, .. } => format!("{}-{mode}", self.kind()),
            _ => self.kind().to_string(),
        }
    }

    /// Outlier rows drawn per ID row: mining draws a pool, mixing pairs
    /// one-to-one, the other OE variants use twice the ID batch.
    pub fn outlier_batch_multiplier(&self) -> usize {
        match self {
            ObjectiveConfig::Standard | ObjectiveConfig::Mix { .. } => 0,
            ObjectiveConfig::Mixoe { .. } | ObjectiveConfig::MixPlusOe { .. } => 1,
            ObjectiveConfig::Oe { .. } | ObjectiveConfig::EnergyOe { .. } => 2,
            ObjectiveConfig::OeHardMining { mining_pool_factor, .. } => 2 * mining_pool_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_beta = |name: &str, b: f64| {
            if b >= 0.0 && b.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid_arg(format!(
                    "{name} must be a finite non-negative number, got {b}"
                )))
            }
        };
        let check_alpha = |a: f64| {
            if a > 0.0 && a.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid_arg(format!("alpha must be positive, got {a}")))
            }
        };
        match *self {
            ObjectiveConfig::Standard => Ok(()),
            ObjectiveConfig::Oe { beta } => check_beta("beta", beta),
            ObjectiveConfig::OeHardMining {
                beta,
                mining_pool_factor,
            } => {
                check_beta("beta", beta)?;
                if mining_pool_factor == 0 {
                    return Err(Error::invalid_arg("mining_pool_factor must be at least 1"));
                }
                Ok(())
            }
            ObjectiveConfig::EnergyOe { beta, m_in, m_out, .. } => {
                check_beta("beta", beta)?;
                if !(m_in.is_finite() && m_out.is_finite()) {
                    return Err(Error::invalid_arg("energy margins must be finite"));
                }
                Ok(())
            }
            ObjectiveConfig::Mix { alpha, beta, .. } | ObjectiveConfig::Mixoe { alpha, beta, .. } => {
                check_alpha(alpha)?;
                check_beta("beta", beta)
            }
            ObjectiveConfig::MixPlusOe {
                alpha,
                beta_mix,
                beta_oe,
                ..
            } => {
                check_alpha(alpha)?;
                check_beta("beta_mix", beta_mix)?;
                check_beta("beta_oe", beta_oe)
            }
        }
    }
}

/// `total = id_term + reg_weight · reg_term`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub id_term: f64,
    pub reg_term: f64,
    /// β for single-regularizer kinds. The combined Mix+OE objective folds
    /// both of its weights into `reg_term` and reports a weight of 1.
    pub reg_weight: f64,
}

impl LossValue {
    fn new(id_term: f64, reg_term: f64, reg_weight: f64) -> Self {
        Self {
            total: id_term + reg_weight * reg_term,
            id_term,
            reg_term,
            reg_weight,
        }
    }
}

/// Labeled ID inputs, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct IdBatch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl IdBatch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::invalid_arg(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn targets(&self, num_classes: usize) -> Result<Array2<f64>> {
        let mut t = Array2::zeros((self.len(), num_classes));
        for (i, &label) in self.labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::invalid_arg(format!(
                    "label {label} out of range for {num_classes} classes"
                )));
            }
            t[[i, label]] = 1.0;
        }
        Ok(t)
    }
}

/// Per-example loss applied to one batch of logits.
enum Head {
    /// Cross-entropy against a probability vector per row.
    Soft(Array2<f64>),
    /// Cross-entropy against the uniform distribution.
    Uniform,
    /// Hinge on energy above `m_in`.
    EnergyAbove(f64, Hinge),
    /// Hinge on energy below `m_out`.
    EnergyBelow(f64, Hinge),
}

impl Head {
    /// Mean loss over the rows and its gradient w.r.t. the logits.
    fn value_and_grad(&self, logits: &Array2<f64>) -> (f64, Array2<f64>) {
        let n = logits.nrows() as f64;
        let k = logits.ncols();
        let mut grad = Array2::zeros(logits.dim());
        let mut total = 0.0;
        for (i, row) in logits.outer_iter().enumerate() {
            let z = row.as_slice().expect("contiguous logits");
            let lse = logsumexp(z);
            let p = softmax(z);
            let mut g = grad.row_mut(i);
            match self {
                Head::Soft(targets) => {
                    let t = targets.row(i);
                    let t_sum: f64 = t.sum();
                    total += t.iter().zip(z).map(|(&tk, &zk)| -tk * (zk - lse)).sum::<f64>();
                    for c in 0..k {
                        g[c] = (p[c] * t_sum - t[c]) / n;
                    }
                }
                Head::Uniform => {
                    let mean_z = z.iter().sum::<f64>() / k as f64;
                    total += lse - mean_z;
                    for c in 0..k {
                        g[c] = (p[c] - 1.0 / k as f64) / n;
                    }
                }
                Head::EnergyAbove(margin, hinge) | Head::EnergyBelow(margin, hinge) => {
                    let energy = -lse;
                    let (gap, sign) = match self {
                        Head::EnergyAbove(..) => (energy - margin, -1.0),
                        _ => (margin - energy, 1.0),
                    };
                    if gap > 0.0 {
                        let slope = match hinge {
                            Hinge::Squared => {
                                total += gap * gap;
                                2.0 * gap
                            }
                            Hinge::Linear => {
                                total += gap;
                                1.0
                            }
                        };
                        // dE/dz = -softmax(z)
                        for c in 0..k {
                            g[c] = sign * slope * p[c] / n;
                        }
                    }
                }
            }
        }
        (total / n, grad)
    }
}

struct Term {
    inputs: Array2<f64>,
    head: Head,
    weight: f64,
}

/// Evaluates each term's mean loss and, optionally, the gradient of
/// `Σ weight · loss` w.r.t. the model parameters.
fn evaluate_terms<M: Classifier>(model: &M, terms: &[Term], want_grad: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let mut values = Vec::with_capacity(terms.len());
    let mut grad = want_grad.then(|| vec![0.0; model.num_params()]);
    for term in terms {
        if term.inputs.ncols() != model.input_dim() {
            return Err(Error::invalid_arg(format!(
                "batch has {} features, model expects {}",
                term.inputs.ncols(),
                model.input_dim()
            )));
        }
        match grad.as_mut() {
            Some(acc) => {
                let (logits, cache) = model.forward_cached(&term.inputs);
                let (v, g_logits) = term.head.value_and_grad(&logits);
                values.push(v);
                if term.weight != 0.0 {
                    let g = model.backward(&cache, &(g_logits * term.weight));
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            None => {
                let logits = model.forward(&term.inputs);
                values.push(term.head.value_and_grad(&logits).0);
            }
        }
    }
    Ok((values, grad))
}

/// Mean over rows of `−Σ_k target_k · log softmax(logits)_k`.
pub fn cross_entropy_soft(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    if logits.dim() != targets.dim() {
        return Err(Error::invalid_arg(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.dim(),
            targets.dim()
        )));
    }
    if logits.nrows() == 0 {
        return Err(Error::invalid_arg("empty batch"));
    }
    for row in targets.outer_iter() {
        check_distribution(&row.to_vec(), 1e-6)?;
    }
    Ok(Head::Soft(targets.clone()).value_and_grad(logits).0)
}

fn require_nonempty(rows: usize, what: &str) -> Result<()> {
    if rows == 0 {
        Err(Error::invalid_arg(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

fn id_term<M: Classifier>(model: &M, batch: &IdBatch) -> Result<Term> {
    require_nonempty(batch.len(), "ID batch")?;
    Ok(Term {
        inputs: batch.inputs.clone(),
        head: Head::Soft(batch.targets(model.num_classes())?),
        weight: 1.0,
    })
}

/// Result of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: LossValue,
    /// Gradient of `value.total` w.r.t. the flattened parameters.
    pub grad: Option<Vec<f64>>,
    /// Mixing applied to this batch, for the batch log.
    pub mix: Option<MixRecord>,
    /// Rows of the outlier batch that entered the loss.
    pub used_outliers: Vec<usize>,
}

/// Everything an objective may consume for one step.
pub struct StepInputs<'a> {
    pub id: &'a IdBatch,
    pub outliers: Option<&'a Array2<f64>>,
    pub shape: InputShape,
    /// Replaces the Beta draw; only for degeneracy checks.
    pub forced_lambda: Option<f64>,
}

fn require_outliers<'a>(inputs: &StepInputs<'a>) -> Result<&'a Array2<f64>> {
    let out = inputs
        .outliers
        .ok_or_else(|| Error::invalid_arg("objective needs an outlier batch"))?;
    require_nonempty(out.nrows(), "outlier batch")?;
    Ok(out)
}

fn draw_lambda<R: Rng + ?Sized>(alpha: f64, forced: Option<f64>, rng: &mut R) -> Result<f64> {
    match forced {
        Some(l) => Ok(mixing::MixCoefficient::fixed(l)?.lambda()),
        None => Ok(mixing::sample_lambda(alpha, rng)?.lambda()),
    }
}

/// Mixed-ID term for the Mix ablation: each row is paired with a shuffled
/// partner and the target interpolates the two one-hot labels.
fn mix_term<M: Classifier, R: Rng + ?Sized>(
    model: &M,
    inputs: &StepInputs<'_>,
    alpha: f64,
    mode: MixMode,
    weight: f64,
    rng: &mut R,
) -> Result<(Term, MixRecord)> {
    let batch = inputs.id;
    if batch.len() < 2 {
        return Err(Error::invalid_arg("ID-only mixing needs at least two examples"));
    }
    let lambda = draw_lambda(alpha, inputs.forced_lambda, rng)?;
    let mut partner: Vec<usize> = (0..batch.len()).collect();
    partner.shuffle(rng);
    let partner_inputs = batch.inputs.select(Axis(0), &partner);
    let (mixed, record) = mixing::mix_batch(&batch.inputs, &partner_inputs, inputs.shape, lambda, mode, rng)?;
    let y = batch.targets(model.num_classes())?;
    let y_partner = y.select(Axis(0), &partner);
    let l = record.lambda_adjusted;
    let targets = ndarray::Zip::from(&y)
        .and(&y_partner)
        .map_collect(|&a, &b| if a == b { a } else { l * a + (1.0 - l) * b });
    Ok((
        Term {
            inputs: mixed,
            head: Head::Soft(targets),
            weight,
        },
        record,
    ))
}

/// Returns the `k` pool rows the model is most confident on (highest MSP),
/// hardest first; ties keep pool order.
pub fn select_hard_outliers<M: Classifier>(model: &M, pool: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    if k > pool.nrows() {
        return Err(Error::invalid_arg(format!(
            "cannot select {k} outliers from a pool of {}",
            pool.nrows()
        )));
    }
    let logits = model.forward(pool);
    let msp: Vec<f64> = logits
        .outer_iter()
        .map(|row| crate::scoring::msp_unchecked(row.as_slice().expect("contiguous")))
        .collect();
    let mut order: Vec<usize> = (0..pool.nrows()).collect();
    order.sort_by(|&a, &b| msp[b].total_cmp(&msp[a]));
    order.truncate(k);
    Ok(order)
}

/// Evaluates `config` on one step's inputs, with the parameter gradient when
/// `want_grad` is set.
pub fn compute<M: Classifier, R: Rng + ?Sized>(
    config: &ObjectiveConfig,
    model: &M,
    inputs: &StepInputs<'_>,
    rng: &mut R,
    want_grad: bool,
) -> Result<LossOutput> {
    config.validate()?;
    let k = model.num_classes();
    let mut terms = vec![id_term(model, inputs.id)?];
    let mut mix = None;
    let mut used_outliers = Vec::new();

    let value_from = |values: &[f64], reg: f64, weight: f64| LossValue::new(values[0], reg, weight);

    let (value, grad) = match *config {
        ObjectiveConfig::Standard => {
            let (v, g) = evaluate_terms(model, &terms, want_grad)?;
            (value_from(&v, 0.0, 0.0), g)
        }
        ObjectiveConfig::Oe { beta } => {
            let out = require_outliers(inputs)?;
            used_outliers.extend(0..out.nrows());
            terms.push(Term {
                inputs: out.clone(),
                head: Head::Uniform,
                weight: beta,
            });
            let (v, g) = evaluate_terms(model, &terms, want_grad)?;
            (value_from(&v, v[1], beta), g)
        }
        ObjectiveConfig::OeHardMining {
            beta,
            mining_pool_factor,
        } => {
            let pool = require_outliers(inputs)?;
            let keep = (pool.nrows() / mining_pool_factor).max(1);
            let chosen = select_hard_outliers(model, pool, keep)?;
            terms.push(Term {
                inputs: pool.select(Axis(0), &chosen),
                head: Head::Uniform,
                weight: beta,
            });
            used_outliers = chosen;
            let (v, g) = evaluate_terms(model, &terms, want_grad)?;
            (value_from(&v, v[1], beta), g)
        }
        ObjectiveConfig::EnergyOe {
            beta,
            m_in,
            m_out,
            hinge,
            reduction,
        } => {
            let out = require_outliers(inputs)?;
            used_outliers.extend(0..out.nrows());
            let w = match reduction {
                HingeReduction::Sum => beta,
                HingeReduction::Mean => beta / 2.0,
            };
            terms.push(Term {
                inputs: inputs.id.inputs.clone(),
                head: Head::EnergyAbove(m_in, hinge),
                weight: w,
            });
            terms.push(Term {
                inputs: out.clone(),
                head: Head::EnergyBelow(m_out, hinge),
                weight: w,
            });
            let (v, g) = evaluate_terms(model, &terms, want_grad)?;
            let reg = match reduction {
                HingeReduction::Sum => v[1] + v[2],
                HingeReduction::Mean => (v[1] + v[2]) / 2.0,
            };
            (value_from(&v, reg, beta), g)
        }
        ObjectiveConfig::Mix { alpha, beta, mode } => {
            let (term, record) = mix_term(model, inputs, alpha, mode, beta, rng)?;
            terms.push(term);
            mix = Some(record);
            let (v, g) = evaluate_terms(model, &terms, want_grad)?;
            (value_from(&v, v[1], beta), g)
        }
        ObjectiveConfig::Mixoe { alpha, beta, mode } => {
            let out = require_outliers(inputs)?;
            if out.nrows() != inputs.id.len() {
                return Err(Error::invalid_arg(format!(
                    "MixOE pairs ID and outlier rows one-to-one; got {} and {}",
                    inputs.id.len(),
                    out.nrows()
                )));
            }
            used_outliers.extend(0..out.nrows());
            let lambda = draw_lambda(alpha, inputs.forced_lambda, rng)?;
            let (mixed, record) = mixing::mix_batch(&inputs.id.inputs, out, inputs.shape, lambda, mode, rng)?;
            let mut targets = Array2::zeros((inputs.id.len(), k));
            for (i, &label) in inputs.id.labels.iter().enumerate() {
                let probs = mixing::soft_target_probs(label, k, record.lambda_adjusted);
                targets.row_mut(i).assign(&Array1::from(probs));
            }
            terms.push(Term {
                inputs: mixed,
                head: Head::Soft(targets),
                weight: beta,
            });
            mix = Some(record);
            let (v, g) = evaluate_terms(model, &terms, want_grad)?;
            (value_from(&v, v[1], beta), g)
        }
        ObjectiveConfig::MixPlusOe {
            alpha,
            beta_mix,
            beta_oe,
            mode,
        } => {
            let out = require_outliers(inputs)?;
            used_outliers.extend(0..out.nrows());
            let (term, record) = mix_term(model, inputs, alpha, mode, beta_mix, rng)?;
            terms.push(term);
            terms.push(Term {
                inputs: out.clone(),
                head: Head::Uniform,
                weight: beta_oe,
            });
            mix = Some(record);
            let (v, g) = evaluate_terms(model, &terms, want_grad)?;
            (value_from(&v, beta_mix * v[1] + beta_oe * v[2], 1.0), g)
        }
    };
    Ok(LossOutput {
        value,
        grad,
        mix,
        used_outliers,
    })
}

fn value_only<M: Classifier, R: Rng + ?Sized>(
    config: ObjectiveConfig,
    model: &M,
    inputs: &StepInputs<'_>,
    rng: &mut R,
) -> Result<LossValue> {
    compute(&config, model, inputs, rng, false).map(|o| o.value)
}

fn step<'a>(
    id: &'a IdBatch,
    outliers: Option<&'a Array2<f64>>,
    shape: InputShape,
    forced: Option<f64>,
) -> StepInputs<'a> {
    StepInputs {
        id,
        outliers,
        shape,
        forced_lambda: forced,
    }
}

fn flat_shape<M: Classifier>(model: &M) -> InputShape {
    InputShape::new(1, 1, model.input_dim())
}

pub fn loss_standard<M: Classifier>(model: &M, id: &IdBatch) -> Result<LossValue> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    value_only(
        ObjectiveConfig::Standard,
        model,
        &step(id, None, flat_shape(model), None),
        &mut rng,
    )
}

pub fn loss_oe<M: Classifier>(model: &M, id: &IdBatch, outliers: &Array2<f64>, beta: f64) -> Result<LossValue> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    value_only(
        ObjectiveConfig::Oe { beta },
        model,
        &step(id, Some(outliers), flat_shape(model), None),
        &mut rng,
    )
}

pub fn loss_energy_oe<M: Classifier>(
    model: &M,
    id: &IdBatch,
    outliers: &Array2<f64>,
    m_in: f64,
    m_out: f64,
    beta: f64,
) -> Result<LossValue> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    value_only(
        ObjectiveConfig::EnergyOe {
            beta,
            m_in,
            m_out,
            hinge: Hinge::Squared,
            reduction: HingeReduction::Sum,
        },
        model,
        &step(id, Some(outliers), flat_shape(model), None),
        &mut rng,
    )
}

/// MixOE with one `λ ~ Beta(alpha, alpha)` for the batch (or `forced_lambda`).
#[allow(clippy::too_many_arguments)]
pub fn loss_mixoe<M: Classifier, R: Rng + ?Sized>(
    model: &M,
    id: &IdBatch,
    outliers: &Array2<f64>,
    shape: InputShape,
    alpha: f64,
    beta: f64,
    mode: MixMode,
    forced_lambda: Option<f64>,
    rng: &mut R,
) -> Result<LossValue> {
    value_only(
        ObjectiveConfig::Mixoe { alpha, beta, mode },
        model,
        &step(id, Some(outliers), shape, forced_lambda),
        rng,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn loss_mix<M: Classifier, R: Rng + ?Sized>(
    model: &M,
    id: &IdBatch,
    shape: InputShape,
    alpha: f64,
    beta: f64,
    mode: MixMode,
    forced_lambda: Option<f64>,
    rng: &mut R,
) -> Result<LossValue> {
    value_only(
        ObjectiveConfig::Mix { alpha, beta, mode },
        model,
        &step(id, None, shape, forced_lambda),
        rng,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn loss_mix_plus_oe<M: Classifier, R: Rng + ?Sized>(
    model: &M,
    id: &IdBatch,
    outliers: &Array2<f64>,
    shape: InputShape,
    alpha: f64,
    beta_mix: f64,
    beta_oe: f64,
    mode: MixMode,
    forced_lambda: Option<f64>,
    rng: &mut R,
) -> Result<LossValue> {
    value_only(
        ObjectiveConfig::MixPlusOe {
            alpha,
            beta_mix,
            beta_oe,
            mode,
        },
        model,
        &step(id, Some(outliers), shape, forced_lambda),
        rng,
    )
}

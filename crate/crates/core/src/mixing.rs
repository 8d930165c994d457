//! Virtual outliers: mixing an ID input with an auxiliary outlier and
//! assigning a soft target whose confidence decays with the ID share.
//!
//! Two mixing operations are provided. Linear mixing interpolates every
//! element, `λ·x_in + (1−λ)·x_out`. Cut mixing pastes a co-located
//! rectangle of the outlier into the ID image; the box side lengths are
//! `√(1−λ)` times the image sides, the box is clipped to the image and the
//! coefficient is then re-derived from the realized area so that the target
//! matches the ID content actually present.
//!
//! The target for an ID label `y` is `λ·y + (1−λ)·U` with `U` uniform over
//! the `K` ID classes, so its maximum entry is `λ + (1−λ)/K`.

use ndarray::{Array2, ArrayD};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    Linear,
    Cut,
}

impl std::fmt::Display for MixMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixMode::Linear => "linear",
            MixMode::Cut => "cut",
        })
    }
}

/// A mixing weight in `[0, 1]`, with the Beta shape it was drawn from
/// (absent when the weight was fixed by the caller).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixCoefficient {
    lambda: f64,
    alpha: Option<f64>,
}

impl MixCoefficient {
    pub fn fixed(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self { lambda, alpha: None })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid_arg(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

/// Draws `λ ~ Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<MixCoefficient> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid_arg(format!("alpha must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid_arg(e.to_string()))?;
    let lambda = beta.sample(rng).clamp(0.0, 1.0);
    Ok(MixCoefficient {
        lambda,
        alpha: Some(alpha),
    })
}

/// `λ·a + (1−λ)·b`, kept inside `[min(a,b), max(a,b)]` so rounding can never
/// leave the segment and equal endpoints are reproduced exactly.
#[inline]
fn lerp(a: f64, b: f64, lambda: f64) -> f64 {
    let v = lambda * a + (1.0 - lambda) * b;
    v.clamp(a.min(b), a.max(b))
}

pub fn mix_linear(x_in: &ArrayD<f64>, x_out: &ArrayD<f64>, lambda: f64) -> Result<ArrayD<f64>> {
    check_lambda(lambda)?;
    if x_in.shape() != x_out.shape() {
        return Err(Error::invalid_arg(format!(
            "cannot mix shapes {:?} and {:?}",
            x_in.shape(),
            x_out.shape()
        )));
    }
    Ok(ndarray::Zip::from(x_in)
        .and(x_out)
        .map_collect(|&a, &b| lerp(a, b, lambda)))
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// ID share of an `height × width` image after pasting this box.
    pub fn lambda_adjusted(&self, height: usize, width: usize) -> f64 {
        let total = height * width;
        (total - self.area()) as f64 / total as f64
    }
}

fn clipped_span(center: usize, len: usize, limit: usize) -> (usize, usize) {
    let start = center as i64 - (len / 2) as i64;
    let end = start + len as i64;
    (
        start.clamp(0, limit as i64) as usize,
        end.clamp(0, limit as i64) as usize,
    )
}

/// Box with sides `⌊H·√(1−λ)⌋ × ⌊W·√(1−λ)⌋` centred at `(cy, cx)`, clipped to
/// the image.
pub fn cut_box_at(height: usize, width: usize, lambda: f64, cy: usize, cx: usize) -> Result<CutBox> {
    check_lambda(lambda)?;
    let ratio = (1.0 - lambda).sqrt();
    let cut_h = (height as f64 * ratio).floor() as usize;
    let cut_w = (width as f64 * ratio).floor() as usize;
    let (y0, y1) = clipped_span(cy, cut_h, height);
    let (x0, x1) = clipped_span(cx, cut_w, width);
    Ok(CutBox { y0, y1, x0, x1 })
}

/// As [`cut_box_at`] with the centre drawn uniformly over the pixel grid.
pub fn sample_cut_box<R: Rng + ?Sized>(height: usize, width: usize, lambda: f64, rng: &mut R) -> Result<CutBox> {
    if height == 0 || width == 0 {
        return Err(Error::invalid_arg("cut mixing needs a non-empty image"));
    }
    let cy = rng.random_range(0..height);
    let cx = rng.random_range(0..width);
    cut_box_at(height, width, lambda, cy, cx)
}

/// Pastes `cut` from `x_out` into `x_in`; both are flat `C·H·W` slices.
fn paste_box(x_in: &[f64], x_out: &[f64], out: &mut [f64], shape: InputShape, cut: &CutBox) {
    out.copy_from_slice(x_in);
    let plane = shape.height * shape.width;
    for c in 0..shape.channels {
        for y in cut.y0..cut.y1 {
            let row = c * plane + y * shape.width;
            out[row + cut.x0..row + cut.x1].copy_from_slice(&x_out[row + cut.x0..row + cut.x1]);
        }
    }
}

fn spatial_shape(shape: &[usize]) -> Result<InputShape> {
    match shape {
        [h, w] => Ok(InputShape::new(1, *h, *w)),
        [lead @ .., h, w] if !lead.is_empty() => Ok(InputShape::new(lead.iter().product(), *h, *w)),
        _ => Err(Error::Unsupported(format!(
            "cut mixing needs trailing H×W axes, got shape {shape:?}; use linear mixing instead"
        ))),
    }
}

/// Cut mixing of one pair. Returns the mixed input and the coefficient
/// re-derived from the clipped box area.
pub fn mix_cut<R: Rng + ?Sized>(
    x_in: &ArrayD<f64>,
    x_out: &ArrayD<f64>,
    lambda: f64,
    rng: &mut R,
) -> Result<(ArrayD<f64>, f64)> {
    let (mixed, cut) = mix_cut_with_box(x_in, x_out, lambda, rng)?;
    let shape = spatial_shape(x_in.shape())?;
    Ok((mixed, cut.lambda_adjusted(shape.height, shape.width)))
}

pub fn mix_cut_with_box<R: Rng + ?Sized>(
    x_in: &ArrayD<f64>,
    x_out: &ArrayD<f64>,
    lambda: f64,
    rng: &mut R,
) -> Result<(ArrayD<f64>, CutBox)> {
    check_lambda(lambda)?;
    let shape = spatial_shape(x_in.shape())?;
    if x_in.shape() != x_out.shape() {
        return Err(Error::invalid_arg(format!(
            "cannot mix shapes {:?} and {:?}",
            x_in.shape(),
            x_out.shape()
        )));
    }
    let cut = sample_cut_box(shape.height, shape.width, lambda, rng)?;
    let a = x_in.as_standard_layout();
    let b = x_out.as_standard_layout();
    let mut out = vec![0.0; shape.dim()];
    paste_box(
        a.as_slice().expect("standard layout"),
        b.as_slice().expect("standard layout"),
        &mut out,
        shape,
        &cut,
    );
    let mixed = ArrayD::from_shape_vec(x_in.raw_dim(), out).expect("shape preserved");
    Ok((mixed, cut))
}

/// A probability vector over the `K` ID classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTarget {
    probs: Vec<f64>,
}

impl SoftTarget {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_distribution(&probs, 1e-9)?;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

pub(crate) fn check_distribution(probs: &[f64], tol: f64) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::invalid_arg("probability vector is empty"));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid_arg(
            "probability entries must be finite and non-negative",
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::invalid_arg(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

fn one_hot_index(y: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::invalid_arg("target is not a one-hot vector"));
        }
    }
    hot.ok_or_else(|| Error::invalid_arg("target is not a one-hot vector"))
}

pub fn one_hot(label: usize, num_classes: usize) -> Result<Vec<f64>> {
    if label >= num_classes {
        return Err(Error::invalid_arg(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let mut y = vec![0.0; num_classes];
    y[label] = 1.0;
    Ok(y)
}

/// `λ·y_in + (1−λ)·U`. With a single class the target is `(1.0)` for every
/// λ.
pub fn make_soft_target(y_in: &[f64], lambda: f64) -> Result<SoftTarget> {
    check_lambda(lambda)?;
    let hot = one_hot_index(y_in)?;
    Ok(SoftTarget {
        probs: soft_target_probs(hot, y_in.len(), lambda),
    })
}

pub(crate) fn soft_target_probs(label: usize, k: usize, lambda: f64) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let floor = (1.0 - lambda) / k as f64;
    let mut probs = vec![floor; k];
    probs[label] = lambda + floor;
    probs
}

/// A virtual training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub input: ArrayD<f64>,
    pub target: SoftTarget,
    pub lambda: MixCoefficient,
    pub mode: MixMode,
}

/// Mixes two labeled ID examples; the target interpolates the two labels
/// (`λ·y1 + (1−λ)·y2`) instead of decaying toward uniform.
pub fn make_id_mix_pair<R: Rng + ?Sized>(
    (x1, y1): (&ArrayD<f64>, &[f64]),
    (x2, y2): (&ArrayD<f64>, &[f64]),
    lambda: f64,
    mode: MixMode,
    rng: &mut R,
) -> Result<MixedSample> {
    if y1.len() != y2.len() {
        return Err(Error::invalid_arg("labels have different class counts"));
    }
    one_hot_index(y1)?;
    one_hot_index(y2)?;
    let (input, effective) = match mode {
        MixMode::Linear => (mix_linear(x1, x2, lambda)?, lambda),
        MixMode::Cut => mix_cut(x1, x2, lambda, rng)?,
    };
    let probs = y1.iter().zip(y2).map(|(&a, &b)| lerp(a, b, effective)).collect();
    Ok(MixedSample {
        input,
        target: SoftTarget { probs },
        lambda: MixCoefficient {
            lambda: effective,
            alpha: None,
        },
        mode,
    })
}

/// Builds one virtual outlier from an ID example with label `label` of `K`
/// classes and an outlier input.
pub fn make_virtual_outlier<R: Rng + ?Sized>(
    x_in: &ArrayD<f64>,
    label: usize,
    num_classes: usize,
    x_out: &ArrayD<f64>,
    coefficient: MixCoefficient,
    mode: MixMode,
    rng: &mut R,
) -> Result<MixedSample> {
    let (input, effective) = match mode {
        MixMode::Linear => (mix_linear(x_in, x_out, coefficient.lambda)?, coefficient.lambda),
        MixMode::Cut => mix_cut(x_in, x_out, coefficient.lambda, rng)?,
    };
    let target = make_soft_target(&one_hot(label, num_classes)?, effective)?;
    Ok(MixedSample {
        input,
        target,
        lambda: MixCoefficient {
            lambda: effective,
            alpha: coefficient.alpha,
        },
        mode,
    })
}

/// What was done to one training batch, for the batch log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub mode: MixMode,
    pub lambda: f64,
    /// The coefficient used in the targets; differs from `lambda` only when a
    /// cut box was clipped or rounded.
    pub lambda_adjusted: f64,
    pub cut_box: Option<CutBox>,
}

/// Mixes two row-aligned batches with one coefficient (and, for cut mode,
/// one box) shared by the whole batch.
pub fn mix_batch<R: Rng + ?Sized>(
    a: &Array2<f64>,
    b: &Array2<f64>,
    shape: InputShape,
    lambda: f64,
    mode: MixMode,
    rng: &mut R,
) -> Result<(Array2<f64>, MixRecord)> {
    check_lambda(lambda)?;
    if a.dim() != b.dim() {
        return Err(Error::invalid_arg(format!(
            "cannot mix batches of shape {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.ncols() != shape.dim() {
        return Err(Error::invalid_arg("batch width does not match the input shape"));
    }
    match mode {
        MixMode::Linear => {
            let mixed = ndarray::Zip::from(a).and(b).map_collect(|&x, &y| lerp(x, y, lambda));
            Ok((
                mixed,
                MixRecord {
                    mode,
                    lambda,
                    lambda_adjusted: lambda,
                    cut_box: None,
                },
            ))
        }
        MixMode::Cut => {
            if shape.height < 2 && shape.width < 2 {
                return Err(Error::Unsupported(
                    "cut mixing needs a spatial input; use linear mixing instead".into(),
                ));
            }
            let cut = sample_cut_box(shape.height, shape.width, lambda, rng)?;
            let mut mixed = Array2::zeros(a.dim());
            for ((row_a, row_b), mut row_out) in a.outer_iter().zip(b.outer_iter()).zip(mixed.outer_iter_mut()) {
                paste_box(
                    row_a.as_slice().expect("contiguous row"),
                    row_b.as_slice().expect("contiguous row"),
                    row_out.as_slice_mut().expect("contiguous row"),
                    shape,
                    &cut,
                );
            }
            Ok((
                mixed,
                MixRecord {
                    mode,
                    lambda,
                    lambda_adjusted: cut.lambda_adjusted(shape.height, shape.width),
                    cut_box: Some(cut),
                },
            ))
        }
    }
}

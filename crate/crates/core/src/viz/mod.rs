//! Two-dimensional visualization layer trained on frozen penultimate
//! features, and SVG figures.

mod render;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_inputs, ClassIndex, Example, ExampleSet};
use crate::error::{Error, Result};
use crate::math::softmax;
use crate::model::Classifier;
use crate::trainer::cosine_lr;

pub use render::{
    emit_confidence_density, emit_scatter, emit_tnr_bars, lightness, DensityPanel, FigureEntry, FigureManifest,
    PointTag, TaggedPoint, DENSITY_BINS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VisConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.001,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisMetadata {
    pub config: VisConfig,
    pub schedule: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Training accuracy through the 2D bottleneck after the last epoch.
    pub final_accuracy: f64,
}

/// Affine map from penultimate features to the plane, plus the 2→K head
/// used while fitting it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisProjector {
    /// 2 × D.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// K × 2.
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
    pub metadata: VisMetadata,
}

impl VisProjector {
    pub fn feature_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn project_features(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.feature_dim() {
            return Err(Error::invalid_arg(format!(
                "projector expects {} features, got {}",
                self.feature_dim(),
                features.ncols()
            )));
        }
        Ok(features.dot(&self.weight.t()) + &self.bias)
    }

    /// Penultimate features of `examples` mapped to the plane, in order.
    pub fn project<M: Classifier>(&self, model: &M, examples: &[Example]) -> Result<Vec<[f64; 2]>> {
        let inputs = stack_inputs(examples, model.input_dim())?;
        let points = self.project_features(&model.penultimate(&inputs))?;
        Ok(points.outer_iter().map(|r| [r[0], r[1]]).collect())
    }

    /// Class logits through the bottleneck.
    pub fn head_logits(&self, points: &Array2<f64>) -> Array2<f64> {
        points.dot(&self.head_weight.t()) + &self.head_bias
    }
}

/// Fits the projector and head with cross-entropy on ID training features.
/// The backbone is only read.
pub fn fit_vis_layer<M: Classifier>(
    model: &M,
    id_train: &ExampleSet,
    id_classes: &[String],
    config: &VisConfig,
) -> Result<VisProjector> {
    let d = model.feature_dim();
    if d == 0 {
        return Err(Error::invalid_arg("penultimate features are zero-dimensional"));
    }
    if config.epochs == 0 || config.batch_size == 0 || config.lr.is_nan() || config.lr <= 0.0 {
        return Err(Error::invalid_arg(
            "vis-layer epochs, batch size and lr must be positive",
        ));
    }
    let index = ClassIndex::new(id_classes);
    let examples = id_train.examples();
    if examples.is_empty() {
        return Err(Error::invalid_arg("no ID training examples"));
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let labels = index.labels(&refs)?;
    let features = model.penultimate(&stack_inputs(examples, model.input_dim())?);
    if features.ncols() != d {
        return Err(Error::InvalidData("penultimate width differs from feature_dim".into()));
    }

    // Train on standardized features; the scaling is folded back into the
    // affine map at the end.
    let mean = features.mean_axis(Axis(0)).expect("nonempty");
    let std = features
        .var_axis(Axis(0), 0.0)
        .mapv(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
    let z = (&features - &mean) / &std;

    let k = index.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        let bound = (1.0 / cols as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
    };
    let mut w = init(2, d, &mut rng);
    let mut b = Array1::zeros(2);
    let mut hw = init(k, 2, &mut rng);
    let mut hb = Array1::zeros(k);
    let mut vel = [
        Array2::zeros((2, d)),
        Array2::zeros((1, 2)),
        Array2::zeros((k, 2)),
        Array2::zeros((1, k)),
    ];

    let n = labels.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (s, rows) in order.chunks(config.batch_size).enumerate() {
            let lr = cosine_lr(config.lr, epoch * steps_per_epoch + s, total);
            let x = z.select(Axis(0), rows);
            let h = x.dot(&w.t()) + &b;
            let logits = h.dot(&hw.t()) + &hb;
            let mut g = Array2::zeros(logits.raw_dim());
            for (i, row) in logits.outer_iter().enumerate() {
                let p = softmax(row.as_slice().expect("contiguous"));
                for (j, pj) in p.into_iter().enumerate() {
                    g[[i, j]] = pj / rows.len() as f64;
                }
                g[[i, labels[rows[i]]]] -= 1.0 / rows.len() as f64;
            }
            let g_hw = g.t().dot(&h);
            let g_hb = g.sum_axis(Axis(0));
            let g_h = g.dot(&hw);
            let g_w = g_h.t().dot(&x);
            let g_b = g_h.sum_axis(Axis(0));
            let grads = [g_w, g_b.insert_axis(Axis(0)), g_hw, g_hb.insert_axis(Axis(0))];
            for (v, g) in vel.iter_mut().zip(&grads) {
                *v = &*v * config.momentum + g;
            }
            w.scaled_add(-lr, &vel[0]);
            b.scaled_add(-lr, &vel[1].row(0));
            hw.scaled_add(-lr, &vel[2]);
            hb.scaled_add(-lr, &vel[3].row(0));
        }
    }

    let weight = &w / &std.clone().insert_axis(Axis(0));
    let bias = &b - &weight.dot(&mean);
    let mut projector = VisProjector {
        weight,
        bias,
        head_weight: hw,
        head_bias: hb,
        metadata: VisMetadata {
            config: *config,
            schedule: "cosine".into(),
            feature_dim: d,
            num_classes: k,
            final_accuracy: 0.0,
        },
    };
    let logits = projector.head_logits(&projector.project_features(&features)?);
    let hits = logits
        .outer_iter()
        .zip(&labels)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
            best.0 == t
        })
        .count();
    projector.metadata.final_accuracy = hits as f64 / n as f64;
    Ok(projector)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_hash;
    use crate::trainer::test_support::*;
    use crate::trainer::{train_standard, TrainConfig};

    fn trained() -> (crate::model::Mlp, crate::splits::DataPartition) {
        let ds = blobs(3, 60, 11);
        let (_, part) = environment(&ds, 0);
        let mut model = mlp(3, 0);
        train_standard(&mut model, &part, &quick(TrainConfig::standard(0), 20, 0.05)).unwrap();
        (model, part)
    }

    fn one_nn_accuracy(points: &[[f64; 2]], labels: &[usize]) -> f64 {
        let mut hits = 0;
        for (i, p) in points.iter().enumerate() {
            let nearest = (0..points.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (points[a][0] - p[0]).powi(2) + (points[a][1] - p[1]).powi(2);
                    let db = (points[b][0] - p[0]).powi(2) + (points[b][1] - p[1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            hits += usize::from(labels[nearest] == labels[i]);
        }
        hits as f64 / points.len() as f64
    }

    #[test]
    fn projector_separates_toy_classes_without_touching_backbone() {
        let (model, part) = trained();
        let before = param_hash(&model);
        let reads = part.validation.reads();
        let cfg = VisConfig {
            epochs: 40,
            lr: 0.05,
            ..VisConfig::default()
        };
        let proj = fit_vis_layer(&model, &part.train, &part.id_classes, &cfg).unwrap();
        assert_eq!(param_hash(&model), before);
        assert_eq!(part.validation.reads(), reads);
        assert_eq!(part.test.reads(), 0);

        let val = part.validation.examples();
        let index = ClassIndex::new(&part.id_classes);
        let labels = index.labels(&val.iter().collect::<Vec<_>>()).unwrap();
        let points = proj.project(&model, val).unwrap();
        let arr = Array2::from_shape_fn((points.len(), 2), |(i, j)| points[i][j]);
        let logits = proj.head_logits(&arr);
        let acc = logits
            .outer_iter()
            .zip(&labels)
            .filter(|(r, &t)| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) == r[t])
            .count() as f64
            / labels.len() as f64;
        assert!(acc >= 0.9, "bottleneck accuracy {acc}");

        let train = part.train.examples();
        let tl = index.labels(&train.iter().collect::<Vec<_>>()).unwrap();
        assert!(one_nn_accuracy(&proj.project(&model, train).unwrap(), &tl) >= 0.85);

        let again = fit_vis_layer(&model, &part.train, &part.id_classes, &cfg).unwrap();
        assert_eq!(again, proj);
    }

    #[test]
    fn projection_is_affine_and_checked() {
        let (model, part) = trained();
        let proj = fit_vis_layer(&model, &part.train, &part.id_classes, &VisConfig::default()).unwrap();
        let ex = &part.train.examples()[..2];
        let f = model.penultimate(&stack_inputs(ex, 4).unwrap());
        let ends = proj.project_features(&f).unwrap();
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let mixed = &f.row(0) * lambda + &f.row(1) * (1.0 - lambda);
            let p = proj.project_features(&mixed.insert_axis(Axis(0))).unwrap();
            for c in 0..2 {
                let expect = lambda * ends[[0, c]] + (1.0 - lambda) * ends[[1, c]];
                assert!((p[[0, c]] - expect).abs() <= 1e-9);
            }
        }
        assert_eq!(proj.project(&model, ex).unwrap(), proj.project(&model, ex).unwrap());
        assert!(proj.project_features(&Array2::zeros((1, 3))).is_err());
    }
}

//! Checks shared by the oracle tests and the acceptance suite. Each returns a
//! short summary on success and a description of the first violation
//! otherwise.
#![allow(dead_code)]

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mixoe::math::logsumexp;
use mixoe::metrics::{auroc, tnr_at_tpr};
use mixoe::mixing::{make_soft_target, mix_cut_with_box, mix_linear, one_hot, MixMode};
use mixoe::model::{Activation, Classifier, InputShape, Mlp, MlpSpec};
use mixoe::objectives::{
    compute, cross_entropy_soft, loss_mixoe, loss_oe, loss_standard, IdBatch, ObjectiveConfig, StepInputs,
};
use mixoe::scoring::{score_energy, score_msp, score_odin};

pub type Check = Result<String, String>;

pub const TINY_SHAPE: InputShape = InputShape {
    channels: 1,
    height: 2,
    width: 2,
};

/// Exhaustive pair counting with ties worth one half.
pub fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut total = 0.0;
    for &a in id {
        for &b in ood {
            total += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    total / (id.len() * ood.len()) as f64
}

/// Sweeps every observed score as a threshold and keeps the largest one
/// accepting at least `target` of ID.
pub fn brute_tnr(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let mut best: Option<f64> = None;
    for &t in id.iter().chain(ood) {
        let accepted = id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
        if accepted >= target && id.contains(&t) && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the minimum ID score always qualifies");
    ood.iter().filter(|&&s| s < t).count() as f64 / ood.len() as f64
}

/// Random scores on a coarse grid so ties are frequent.
pub fn tied_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = rng.random_range(2..30);
    let shift = rng.random_range(-1.0..1.0);
    (0..n)
        .map(|_| rng.random_range(0..levels) as f64 / levels as f64 + shift)
        .collect()
}

pub fn check_metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let n = rng.random_range(1..=200);
        let m = rng.random_range(1..=200);
        let (id, ood) = if instance % 2 == 0 {
            (tied_scores(&mut rng, n), tied_scores(&mut rng, m))
        } else {
            (
                (0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>(),
                (0..m).map(|_| rng.random_range(-4.0..2.0)).collect::<Vec<f64>>(),
            )
        };
        let a = auroc(&id, &ood).map_err(|e| e.to_string())?;
        let t = tnr_at_tpr(&id, &ood, 0.95).map_err(|e| e.to_string())?;
        let da = (a - brute_auroc(&id, &ood)).abs();
        let dt = (t - brute_tnr(&id, &ood, 0.95)).abs();
        worst = worst.max(da).max(dt);
        if da > 1e-12 || dt > 1e-12 {
            return Err(format!("instance {instance}: auroc diff {da:e}, tnr diff {dt:e}"));
        }
    }
    Ok(format!("100 instances, max deviation {worst:e}"))
}

/// Tanh MLP on 2×2 inputs with 5 hidden units and 3 classes: 43 parameters.
pub fn tiny_net(seed: u64) -> Mlp {
    Mlp::new(
        MlpSpec {
            input: TINY_SHAPE,
            hidden: vec![5],
            num_classes: 3,
            activation: Activation::Tanh,
        },
        seed,
    )
    .expect("valid spec")
}

pub fn random_batch(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> IdBatch {
    let inputs = Array2::from_shape_fn((rows, 4), |_| rng.random_range(-2.0..2.0));
    let labels = (0..rows).map(|_| rng.random_range(0..k)).collect();
    IdBatch::new(inputs, labels).expect("consistent batch")
}

pub fn random_outliers(rng: &mut ChaCha8Rng, rows: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, 4), |_| rng.random_range(-2.0..2.0))
}

pub fn check_degeneracy() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for instance in 0..20 {
        let model = tiny_net(instance);
        let rows = rng.random_range(2..9);
        let id = random_batch(&mut rng, rows, 3);
        let out = random_outliers(&mut rng, rows);
        let beta = rng.random_range(0.1..5.0);
        let oe = loss_oe(&model, &id, &out, beta).map_err(|e| e.to_string())?;
        let mix = loss_mixoe(
            &model,
            &id,
            &out,
            TINY_SHAPE,
            1.0,
            beta,
            MixMode::Linear,
            Some(0.0),
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let d = (mix.total - oe.total).abs();
        worst = worst.max(d);
        if d > 1e-6 {
            return Err(format!(
                "instance {instance}: λ=0 MixOE {} vs OE {}",
                mix.total, oe.total
            ));
        }
        let full = loss_mixoe(
            &model,
            &id,
            &out,
            TINY_SHAPE,
            1.0,
            beta,
            MixMode::Linear,
            Some(1.0),
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let ce = loss_standard(&model, &id).map_err(|e| e.to_string())?.total;
        let d = (full.reg_term - ce).abs();
        worst = worst.max(d);
        if d > 1e-6 {
            return Err(format!("instance {instance}: λ=1 reg {} vs CE {ce}", full.reg_term));
        }
    }
    Ok(format!("20 instances, max deviation {worst:e}"))
}

pub fn check_soft_targets() -> Check {
    for k in [2usize, 4, 10, 200] {
        let y = one_hot(k / 2, k).map_err(|e| e.to_string())?;
        for i in 0..=100 {
            let lambda = i as f64 / 100.0;
            let t = make_soft_target(&y, lambda).map_err(|e| e.to_string())?;
            let expected = lambda + (1.0 - lambda) / k as f64;
            if t.max_prob() != expected {
                return Err(format!("K={k}, λ={lambda}: max {} vs {expected}", t.max_prob()));
            }
            let sum: f64 = t.probs().iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(format!("K={k}, λ={lambda}: sum {sum}"));
            }
        }
    }
    Ok("4 class counts × 101 λ values".into())
}

pub fn all_kinds(rng: &mut ChaCha8Rng, mode: MixMode) -> Vec<ObjectiveConfig> {
    let beta = rng.random_range(0.2..3.0);
    let alpha = rng.random_range(0.4..2.0);
    vec![
        ObjectiveConfig::Standard,
        ObjectiveConfig::Oe { beta },
        ObjectiveConfig::OeHardMining {
            beta,
            mining_pool_factor: 2,
        },
        ObjectiveConfig::EnergyOe {
            beta: 0.1,
            m_in: rng.random_range(-3.0..-1.0),
            m_out: rng.random_range(-1.0..0.5),
            hinge: Default::default(),
            reduction: Default::default(),
        },
        ObjectiveConfig::Mix { alpha, beta, mode },
        ObjectiveConfig::Mixoe { alpha, beta, mode },
        ObjectiveConfig::MixPlusOe {
            alpha,
            beta_mix: beta,
            beta_oe: rng.random_range(0.2..3.0),
            mode,
        },
    ]
}

/// Relative error `|g − ĝ| / max(|g| + |ĝ|, 1e-8)` of the analytic gradient
/// against central differences with step 1e-5. The random stream is
/// replayed for every evaluation so λ and cut boxes stay fixed.
pub fn gradient_error(
    config: &ObjectiveConfig,
    model: &Mlp,
    inputs: &StepInputs<'_>,
    seed: u64,
) -> Result<f64, String> {
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let analytic = compute(config, model, inputs, &mut rng.clone(), true)
        .map_err(|e| e.to_string())?
        .grad
        .ok_or("no gradient returned")?;
    let params = model.params();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += h;
        probe.set_params(&p).map_err(|e| e.to_string())?;
        let up = compute(config, &probe, inputs, &mut rng.clone(), false)
            .map_err(|e| e.to_string())?
            .value
            .total;
        p[i] -= 2.0 * h;
        probe.set_params(&p).map_err(|e| e.to_string())?;
        let down = compute(config, &probe, inputs, &mut rng.clone(), false)
            .map_err(|e| e.to_string())?
            .value
            .total;
        numeric.push((up - down) / (2.0 * h));
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(diff / (norm(&analytic) + norm(&numeric)).max(1e-8))
}

pub fn check_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for instance in 0..10 {
        let model = tiny_net(100 + instance);
        params = model.num_params();
        let mode = if instance % 2 == 0 {
            MixMode::Linear
        } else {
            MixMode::Cut
        };
        let id = random_batch(&mut rng, 6, 3);
        let outliers = random_outliers(&mut rng, 6);
        let pool = random_outliers(&mut rng, 12);
        for config in all_kinds(&mut rng, mode) {
            let batch = match config {
                ObjectiveConfig::Standard | ObjectiveConfig::Mix { .. } => None,
                ObjectiveConfig::OeHardMining { .. } => Some(&pool),
                _ => Some(&outliers),
            };
            let inputs = StepInputs {
                id: &id,
                outliers: batch,
                shape: TINY_SHAPE,
                forced_lambda: None,
            };
            let err = gradient_error(&config, &model, &inputs, instance * 31 + 7)?;
            worst = worst.max(err);
            if err.is_nan() || err >= 1e-4 {
                return Err(format!(
                    "instance {instance}, {}: relative error {err:e}",
                    config.label()
                ));
            }
        }
    }
    Ok(format!(
        "7 kinds × 10 instances on {params} parameters, max relative error {worst:e}"
    ))
}

pub fn check_mixing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let c = rng.random_range(1..4);
        let h = rng.random_range(1..12);
        let w = rng.random_range(1..12);
        let dims = IxDyn(&[c, h, w]);
        // ID values positive, outlier values negative, so provenance is
        // readable from the sign.
        let x_in = ArrayD::from_shape_fn(dims.clone(), |_| rng.random_range(1.0..2.0));
        let x_out = ArrayD::from_shape_fn(dims, |_| rng.random_range(-2.0..-1.0));

        let at_one = mix_linear(&x_in, &x_out, 1.0).map_err(|e| e.to_string())?;
        let at_zero = mix_linear(&x_in, &x_out, 0.0).map_err(|e| e.to_string())?;
        if at_one != x_in || at_zero != x_out {
            return Err(format!("trial {trial}: linear endpoints differ"));
        }
        let (cut_one, box_one) = mix_cut_with_box(&x_in, &x_out, 1.0, &mut rng).map_err(|e| e.to_string())?;
        if cut_one != x_in || box_one.area() != 0 {
            return Err(format!("trial {trial}: cut λ=1 is not the ID input"));
        }

        for lambda in [0.0, rng.random_range(0.0..1.0)] {
            let (mixed, cut) = mix_cut_with_box(&x_in, &x_out, lambda, &mut rng).map_err(|e| e.to_string())?;
            let mut from_in = 0usize;
            for ((m, a), b) in mixed.iter().zip(&x_in).zip(&x_out) {
                if m == a {
                    from_in += 1;
                } else if m != b {
                    return Err(format!("trial {trial}: element from neither input"));
                }
            }
            let adjusted = cut.lambda_adjusted(h, w);
            if from_in as f64 / mixed.len() as f64 != adjusted {
                return Err(format!(
                    "trial {trial}: ID fraction {} vs adjusted λ {adjusted}",
                    from_in as f64 / mixed.len() as f64
                ));
            }
            if adjusted != (h * w - cut.area()) as f64 / (h * w) as f64 {
                return Err(format!("trial {trial}: adjusted λ is not the box complement"));
            }
        }
    }
    Ok("1000 trials each: endpoints, provenance, area".into())
}

pub fn check_scorers() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut energy = Vec::new();
    let mut lse = Vec::new();
    for i in 0..10_000 {
        let k = rng.random_range(2..20);
        let scale = rng.random_range(0.1..20.0);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-scale..scale)).collect();
        let msp = score_msp(&z).map_err(|e| e.to_string())?;
        let odin = score_odin(&z, 1.0).map_err(|e| e.to_string())?;
        if msp != odin {
            return Err(format!("vector {i}: ODIN(1) {odin} vs MSP {msp}"));
        }
        energy.push(score_energy(&z, 1.0).map_err(|e| e.to_string())?);
        lse.push(logsumexp(&z));
    }
    let (e_id, e_ood) = energy.split_at(5000);
    let (l_id, l_ood) = lse.split_at(5000);
    let diff = (auroc(e_id, e_ood).map_err(|e| e.to_string())? - auroc(l_id, l_ood).map_err(|e| e.to_string())?).abs();
    if diff > 1e-12 {
        return Err(format!("energy vs logsumexp AUROC differs by {diff:e}"));
    }
    Ok(format!("10^4 vectors, ranking AUROC difference {diff:e}"))
}

/// Soft cross-entropy is bounded below by the target entropy.
pub fn soft_ce_gap(logits: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let ce = cross_entropy_soft(logits, targets).expect("valid shapes");
    let h: f64 = targets
        .outer_iter()
        .map(|t| t.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / targets.nrows() as f64;
    ce - h
}

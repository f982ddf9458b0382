//! End-to-end training loop: shuffled mini-batches, cross-entropy plus the
//! weighted orthogonality penalty on every factor matrix, SGD with momentum
//! and weight decay, cosine learning-rate schedule, per-epoch metrics.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{NodeId, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardPass, Model};
use crate::ortho::{RegConfig, RegKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub epochs: usize,
    pub lambda_d: f64,
    pub reg: RegConfig,
    pub seed: u64,
    /// Pad-4 random crop + horizontal flip (CIFAR pipeline).
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 1e-4,
            base_lr: 0.1,
            epochs: 1,
            lambda_d: 1e-3,
            reg: RegConfig::new(RegKind::None),
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.lambda_d < 0.0 {
            return Err(Error::Config("lambda_d must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epoch count must be >= 1".into()));
        }
        self.reg.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub reg_loss: f64,
    pub test_acc: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
}

impl Metrics {
    /// CSV with the fixed column order: epoch, lr, train_loss, reg_loss,
    /// test_acc, mean_residual.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,reg_loss,test_acc,mean_residual\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.lr, r.train_loss, r.reg_loss, r.test_acc, r.mean_residual
            ));
        }
        s
    }

    /// One JSON object per line, same records as the CSV.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect()
    }
}

/// Cosine schedule: base_lr * 0.5 * (1 + cos(pi * t / T)); no warmup.
pub fn cosine_lr(t: usize, total: usize, base_lr: f64) -> Result<f64> {
    if t >= total {
        return Err(Error::Config(format!(
            "epoch index {t} out of range for {total} epochs"
        )));
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct SgdState<T: Scalar> {
    pub velocity: HashMap<String, Tensor<T>>,
}

/// Conventional SGD with momentum and coupled weight decay:
/// v <- momentum*v + g + wd*theta; theta <- theta - lr*v.
pub fn sgd_step<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &HashMap<String, Tensor<T>>,
    state: &mut SgdState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let m = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    let lr = T::from_f64(lr);
    for (name, theta) in params.iter_mut() {
        let g = match grads.get(name) {
            Some(g) => g,
            None => continue,
        };
        if g.has_non_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in layer {name}; training halted"
            )));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        for ((v, &g), t) in v.data_mut().iter_mut().zip(g.data()).zip(theta.data()) {
            *v = m * *v + g + wd * *t;
        }
        for (t, &v) in theta.data_mut().iter_mut().zip(v.data()) {
            *t -= lr * v;
        }
    }
    Ok(())
}

/// Loss nodes for one batch: total = ce + lambda_d * reg, where reg sums the
/// configured penalty over every factor matrix U1/U2.
pub struct BatchLoss<T: Scalar> {
    pub total: NodeId,
    pub ce: NodeId,
    pub reg: Option<NodeId>,
    pub pass: ForwardPass<T>,
}

pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    training: bool,
) -> Result<BatchLoss<T>> {
    let x = tape.leaf(images.clone());
    let pass = model.forward_tape(tape, x, training)?;
    let ce = tape.cross_entropy(pass.logits, labels)?;
    let reg = if cfg.lambda_d > 0.0 && cfg.reg.kind != RegKind::None {
        let rho = T::from_f64(cfg.reg.rho);
        let mut terms = Vec::new();
        for &(_, factor) in &pass.factors {
            let node = match cfg.reg.kind {
                RegKind::So => tape.so_penalty(factor, rho)?,
                RegKind::Dso => tape.dso_penalty(factor, rho)?,
                RegKind::Mc => tape.mc_penalty(factor, rho)?,
                RegKind::Srip => tape.srip_penalty(
                    factor,
                    rho,
                    cfg.reg.power_iters,
                    T::from_f64(cfg.reg.power_tol),
                )?,
                RegKind::None => unreachable!(),
            };
            terms.push((node, T::one()));
        }
        if terms.is_empty() {
            None
        } else {
            Some(tape.affine_sum(terms)?)
        }
    } else {
        None
    };
    let total = match reg {
        Some(r) => tape.affine_sum(vec![(ce, T::one()), (r, T::from_f64(cfg.lambda_d))])?,
        None => tape.affine_sum(vec![(ce, T::one())])?,
    };
    Ok(BatchLoss {
        total,
        ce,
        reg,
        pass,
    })
}

/// Fraction of samples whose argmax logit matches the label; argmax ties go
/// to the lowest class index.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset<T>) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let n = dataset.len();
    let chunk = 256;
    let mut i = 0;
    while i < n {
        let idx: Vec<usize> = (i..(i + chunk).min(n)).collect();
        let (batch, labels) = dataset.batch(&idx);
        let logits = model.logits(&batch)?;
        let k = logits.shape()[1];
        for (bi, &label) in labels.iter().enumerate() {
            let row = &logits.data()[bi * k..(bi + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        i += chunk;
    }
    Ok(correct as f64 / n as f64)
}

fn mean_residual<T: Scalar>(model: &Model<T>) -> Result<f64> {
    let report = model.residual_report()?;
    if report.is_empty() {
        return Ok(0.0);
    }
    Ok(report.iter().map(|(_, r)| r.to_f64s()).sum::<f64>() / report.len() as f64)
}

/// Algorithm-style training loop: T epochs of seeded shuffled mini-batches.
/// The model structure is never altered — factorized layers stay factorized.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(Metrics, SgdState<T>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if train_set.classes != model.spec.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            train_set.classes, model.spec.classes
        )));
    }
    let mut state = SgdState::default();
    let mut metrics = Metrics::default();
    let shapes_before: Vec<Vec<usize>> = model
        .params()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37 * (epoch as u64 + 1)));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut images, labels) = train_set.batch(chunk);
            if cfg.augment {
                images = crate::data::random_crop_flip(&images, 4, &mut rng);
            }
            let mut tape = Tape::new();
            let loss = total_loss(&mut tape, model, &images, &labels, cfg, true)?;
            let total_v = tape.scalar_value(loss.total).to_f64s();
            if !total_v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}; training halted"
                )));
            }
            loss_sum += total_v;
            if let Some(r) = loss.reg {
                reg_sum += cfg.lambda_d * tape.scalar_value(r).to_f64s();
            }
            batches += 1;

            let node_grads = tape.backward(loss.total)?;
            let mut grads: HashMap<String, Tensor<T>> = HashMap::new();
            for (name, node) in &loss.pass.params {
                if let Some(g) = node_grads.get(node) {
                    grads.insert(name.clone(), g.clone());
                }
            }
            let mut params = model.params_mut();
            sgd_step(&mut params, &grads, &mut state, lr, cfg)?;
            model.apply_bn_updates(&loss.pass.bn_stats)?;
        }

        let test_acc = evaluate(model, test_set)?;
        metrics.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            reg_loss: reg_sum / batches as f64,
            test_acc,
            mean_residual: mean_residual(model)?,
        });
    }

    let shapes_after: Vec<Vec<usize>> = model
        .params()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    debug_assert_eq!(shapes_before, shapes_after);
    Ok((metrics, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{apply_rank_config, build_small_cnn, parse_rank_config};

    fn tiny_dataset(n: usize, seed: u64) -> Dataset<f64> {
        // two linearly separable classes: bright vs dark images
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Tensor::zeros(&[n, 1, 8, 8]);
        let mut labels = Vec::new();
        use rand::Rng;
        for i in 0..n {
            let class = i % 2;
            let base = if class == 0 { 0.15 } else { 0.85 };
            for px in 0..64 {
                images.data_mut()[i * 64 + px] = base + rng.gen_range(-0.1..0.1);
            }
            labels.push(class);
        }
        Dataset::new(images, labels, 2).unwrap()
    }

    fn tiny_model(seed: u64) -> Model<f64> {
        let mut m = build_small_cnn(0.5, 2, 1, (8, 8), seed).unwrap();
        let cfg = parse_rank_config("conv1 = 2,2\nconv2 = 3,3\n").unwrap();
        apply_rank_config(&mut m, &cfg, seed + 1).unwrap();
        m
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotonicity() {
        assert_eq!(cosine_lr(0, 200, 0.1).unwrap(), 0.1);
        assert!((cosine_lr(100, 200, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(200, 200, 0.1).is_err());
        let mut prev = f64::INFINITY;
        for t in 0..200 {
            let lr = cosine_lr(t, 200, 0.1).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn sgd_trivial_and_momentum_two_step() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut theta = Tensor::scalar(1.0f64);
        let mut params = vec![("p".to_string(), &mut theta)];
        let grads: HashMap<String, Tensor<f64>> =
            [("p".to_string(), Tensor::scalar(2.0))].into();
        let mut state = SgdState::default();
        sgd_step(&mut params, &grads, &mut state, 0.5, &cfg).unwrap();
        assert_eq!(theta.data()[0], 0.0);

        // momentum=0.9, two steps with g=1, wd=0, lr=1: v1=1, v2=1.9, theta=-2.9
        let cfg = TrainConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut theta = Tensor::scalar(0.0f64);
        let grads: HashMap<String, Tensor<f64>> =
            [("p".to_string(), Tensor::scalar(1.0))].into();
        let mut state = SgdState::default();
        for _ in 0..2 {
            let mut params = vec![("p".to_string(), &mut theta)];
            sgd_step(&mut params, &grads, &mut state, 1.0, &cfg).unwrap();
        }
        assert!((theta.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_matches_scalar_reference_sequence() {
        let cfg = TrainConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            ..TrainConfig::default()
        };
        let mut theta = Tensor::scalar(0.7f64);
        let mut state = SgdState::default();
        // independent scalar reference
        let (mut rt, mut rv) = (0.7f64, 0.0f64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        for step in 0..25 {
            let g: f64 = rng.gen_range(-1.0..1.0);
            let lr = 0.1 / (step as f64 + 1.0);
            let grads: HashMap<String, Tensor<f64>> =
                [("p".to_string(), Tensor::scalar(g))].into();
            let mut params = vec![("p".to_string(), &mut theta)];
            sgd_step(&mut params, &grads, &mut state, lr, &cfg).unwrap();
            rv = 0.9 * rv + g + 1e-4 * rt;
            rt -= lr * rv;
            assert!((theta.data()[0] - rt).abs() < 1e-14, "step {step}");
        }
    }

    #[test]
    fn nan_gradient_names_the_layer() {
        let cfg = TrainConfig::default();
        let mut theta = Tensor::scalar(0.0f64);
        let mut params = vec![("layer1.0.conv1.u1".to_string(), &mut theta)];
        let grads: HashMap<String, Tensor<f64>> =
            [("layer1.0.conv1.u1".to_string(), Tensor::scalar(f64::NAN))].into();
        let e = sgd_step(&mut params, &grads, &mut SgdState::default(), 0.1, &cfg).unwrap_err();
        assert!(e.to_string().contains("layer1.0.conv1.u1"), "{e}");
    }

    #[test]
    fn total_loss_uniform_logits_and_reg_equivalences() {
        let model = tiny_model(0);
        let data = tiny_dataset(8, 1);
        let (images, labels) = data.batch(&[0, 1, 2, 3]);

        // lambda=0 and reg=None produce identical losses
        let mut cfg0 = TrainConfig::default();
        cfg0.lambda_d = 0.0;
        cfg0.reg = RegConfig::new(RegKind::Dso);
        let mut t0 = Tape::new();
        let l0 = total_loss(&mut t0, &model, &images, &labels, &cfg0, true).unwrap();
        let mut cfg1 = TrainConfig::default();
        cfg1.reg = RegConfig::new(RegKind::None);
        let mut t1 = Tape::new();
        let l1 = total_loss(&mut t1, &model, &images, &labels, &cfg1, true).unwrap();
        assert_eq!(t0.scalar_value(l0.total), t1.scalar_value(l1.total));

        // total equals ce + lambda * sum of standalone penalty oracles
        let mut cfg = TrainConfig::default();
        cfg.reg = RegConfig::new(RegKind::Dso);
        cfg.lambda_d = 1e-3;
        let mut tape = Tape::new();
        let loss = total_loss(&mut tape, &model, &images, &labels, &cfg, true).unwrap();
        let mut expected = tape.scalar_value(loss.ce);
        for (_, f) in model.factor_matrices() {
            expected += 1e-3 * crate::ortho::dso(f, 1.0).unwrap();
        }
        assert!((tape.scalar_value(loss.total) - expected).abs() < 1e-10);

        // out-of-range label rejected
        assert!(total_loss(&mut Tape::new(), &model, &images, &[0, 1, 0, 5], &cfg, true).is_err());
    }

    #[test]
    fn evaluate_constant_logits_and_tie_break() {
        let model = tiny_model(2);
        let data = tiny_dataset(10, 3);
        let acc = evaluate(&model, &data).unwrap();
        // oracle loop over per-sample logits
        let (images, labels) = data.batch(&(0..10).collect::<Vec<_>>());
        let logits = model.logits(&images).unwrap();
        let k = logits.shape()[1];
        let mut correct = 0;
        for (i, &lab) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 0..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == lab {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / 10.0);

        // all-equal logits -> argmax is class 0 by tie-break
        let all_zero = Dataset::new(Tensor::zeros(&[4, 1, 8, 8]), vec![0; 4], 2).unwrap();
        let mut zero_model = tiny_model(4);
        for (_, p) in zero_model.params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        assert_eq!(evaluate(&zero_model, &all_zero).unwrap(), 1.0);
        let all_one = Dataset::new(Tensor::zeros(&[4, 1, 8, 8]), vec![1; 4], 2).unwrap();
        assert_eq!(evaluate(&zero_model, &all_one).unwrap(), 0.0);
    }

    #[test]
    fn zero_lr_zero_lambda_leaves_params_unchanged() {
        let mut model = tiny_model(5);
        let before = model.clone();
        let data = tiny_dataset(16, 6);
        let cfg = TrainConfig {
            base_lr: 0.0,
            lambda_d: 0.0,
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &data, &cfg).unwrap();
        // parameters bit-exact; BN running stats do move
        for ((an, a), (_, b)) in model.params().iter().zip(before.params().iter()) {
            assert_eq!(a, b, "{an}");
        }
    }

    #[test]
    fn separable_task_reaches_high_accuracy() {
        let mut model = tiny_model(7);
        let data = tiny_dataset(64, 8);
        let cfg = TrainConfig {
            base_lr: 0.05,
            epochs: 30,
            batch_size: 16,
            reg: RegConfig::new(RegKind::Dso),
            ..TrainConfig::default()
        };
        let (metrics, _) = train(&mut model, &data, &data, &cfg).unwrap();
        let last = metrics.records.last().unwrap();
        assert!(last.test_acc >= 0.95, "accuracy {}", last.test_acc);
        for r in &metrics.records {
            assert!(r.train_loss.is_finite() && r.reg_loss.is_finite());
            assert!((0.0..=1.0).contains(&r.test_acc));
        }
    }

    #[test]
    fn same_seed_same_metrics() {
        let data = tiny_dataset(32, 9);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            base_lr: 0.05,
            reg: RegConfig::new(RegKind::So),
            seed: 42,
            ..TrainConfig::default()
        };
        let mut m1 = tiny_model(10);
        let mut m2 = tiny_model(10);
        let (a, _) = train(&mut m1, &data, &data, &cfg).unwrap();
        let (b, _) = train(&mut m2, &data, &data, &cfg).unwrap();
        assert_eq!(m1, m2);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.train_loss, rb.train_loss);
            assert_eq!(ra.test_acc, rb.test_acc);
            assert_eq!(ra.mean_residual, rb.mean_residual);
        }
    }

    #[test]
    fn structure_is_preserved_by_training() {
        let mut model = tiny_model(11);
        let shapes: Vec<_> = model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        let data = tiny_dataset(16, 12);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            base_lr: 0.05,
            reg: RegConfig::new(RegKind::Srip),
            ..TrainConfig::default()
        };
        train(&mut model, &data, &data, &cfg).unwrap();
        let after: Vec<_> = model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        assert_eq!(shapes, after);
    }

    #[test]
    fn metrics_serialization_formats() {
        let metrics = Metrics {
            records: vec![EpochRecord {
                epoch: 0,
                lr: 0.1,
                train_loss: 2.5,
                reg_loss: 0.01,
                test_acc: 0.5,
                mean_residual: 0.2,
            }],
        };
        let csv = metrics.to_csv();
        assert!(csv.starts_with("epoch,lr,train_loss,reg_loss,test_acc,mean_residual\n"));
        assert!(csv.contains("0,0.1,2.5,0.01,0.5,0.2\n"));
        let json = metrics.to_json_lines();
        let v: serde_json::Value = serde_json::from_str(json.lines().next().unwrap()).unwrap();
        assert_eq!(v["epoch"], 0);
        assert_eq!(v["test_acc"], 0.5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lambda_d = -0.1;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}

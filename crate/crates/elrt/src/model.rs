//! Architecture builders (CIFAR-style ResNet, small CNN), rank-config
//! parsing, and application of rank configs to swap dense convolutions for
//! freshly initialized Tucker-2 layers.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{xavier_uniform_init, ConvGeometry, Tensor};
use crate::tucker::{check_rank_bounds, DenseConv, Tucker2Conv};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[c], T::one()),
            beta: Tensor::zeros(&[c]),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
        }
    }

    fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.iter().map(|v| U::from_f64(v.to_f64s())).collect(),
            running_var: self.running_var.iter().map(|v| U::from_f64(v.to_f64s())).collect(),
        }
    }
}

/// A convolution that is either dense or in Tucker-2 format.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvLayer<T: Scalar> {
    Dense(DenseConv<T>),
    Tucker(Tucker2Conv<T>),
}

impl<T: Scalar> ConvLayer<T> {
    pub fn geom(&self) -> &ConvGeometry {
        match self {
            ConvLayer::Dense(d) => &d.geom,
            ConvLayer::Tucker(t) => &t.geom,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ConvLayer::Dense(d) => d.param_count(),
            ConvLayer::Tucker(t) => t.param_count(),
        }
    }

    pub fn ranks(&self) -> Option<(usize, usize)> {
        match self {
            ConvLayer::Dense(_) => None,
            ConvLayer::Tucker(t) => Some((t.phi1(), t.phi2())),
        }
    }

    fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        match self {
            ConvLayer::Dense(d) => ConvLayer::Dense(DenseConv {
                w: d.w.cast(),
                geom: d.geom,
                name: d.name.clone(),
            }),
            ConvLayer::Tucker(t) => ConvLayer::Tucker(t.cast()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T: Scalar> {
    pub conv: ConvLayer<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn cast<U: Scalar>(&self) -> ConvBn<U> {
        ConvBn {
            conv: self.conv.cast(),
            bn: self.bn.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock<T: Scalar> {
    pub conv1: ConvBn<T>,
    pub conv2: ConvBn<T>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone<T: Scalar> {
    ResNet {
        stem: ConvBn<T>,
        stages: Vec<Vec<BasicBlock<T>>>,
    },
    SmallCnn {
        conv1: ConvBn<T>,
        conv2: ConvBn<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub backbone: Backbone<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchFamily {
    ResNet,
    SmallCnn,
}

/// Everything needed to rebuild a model skeleton (checkpoints store this).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ArchFamily,
    pub depth: usize,
    pub width_mult: f64,
    pub classes: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width_mult <= 0.0 {
            return Err(Error::Config("width multiplier must be positive".into()));
        }
        if self.classes == 0 || self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("model spec dimensions must be positive".into()));
        }
        match self.family {
            ArchFamily::ResNet => {
                if self.depth < 8 || (self.depth - 2) % 6 != 0 {
                    return Err(Error::Config(format!(
                        "resnet depth must satisfy depth = 6n+2, got {}",
                        self.depth
                    )));
                }
            }
            ArchFamily::SmallCnn => {}
        }
        Ok(())
    }
}

fn scaled(c: usize, width_mult: f64) -> usize {
    ((c as f64 * width_mult).round() as usize).max(1)
}

/// Deterministic per-parameter seed stream.
struct SeedStream {
    base: u64,
    next: u64,
}

impl SeedStream {
    fn new(base: u64) -> Self {
        Self { base, next: 0 }
    }

    fn take(&mut self) -> u64 {
        let s = self
            .base
            .wrapping_add(self.next.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.next += 1;
        s
    }
}

fn dense_conv<T: Scalar>(
    geom: ConvGeometry,
    name: &str,
    seeds: &mut SeedStream,
) -> Result<ConvBn<T>> {
    let fan_in = geom.c_in * geom.k * geom.k;
    let fan_out = geom.c_out * geom.k * geom.k;
    let w = xavier_uniform_init(
        &[geom.c_in, geom.c_out, geom.k, geom.k],
        fan_in,
        fan_out,
        seeds.take(),
    )?;
    Ok(ConvBn {
        conv: ConvLayer::Dense(DenseConv {
            w,
            geom,
            name: name.to_string(),
        }),
        bn: BatchNorm::new(geom.c_out),
    })
}

/// Standard CIFAR ResNet: 3x3 stem, three stages of basic blocks at
/// 16/32/64 * width channels, stride 2 at stage entry, option-A shortcuts,
/// global average pool and a linear classifier. All convs start dense.
pub fn build_resnet_cifar<T: Scalar>(
    depth: usize,
    width_mult: f64,
    classes: usize,
    in_channels: usize,
    hw: (usize, usize),
    seed: u64,
) -> Result<Model<T>> {
    let spec = ModelSpec {
        family: ArchFamily::ResNet,
        depth,
        width_mult,
        classes,
        in_channels,
        height: hw.0,
        width: hw.1,
    };
    spec.validate()?;
    let n = (depth - 2) / 6;
    let widths = [
        scaled(16, width_mult),
        scaled(32, width_mult),
        scaled(64, width_mult),
    ];
    let mut seeds = SeedStream::new(seed);
    let (mut h, mut w) = hw;
    let stem = dense_conv(
        ConvGeometry::new(in_channels, widths[0], 3, 1, 1, h, w)?,
        "stem.conv",
        &mut seeds,
    )?;
    let mut c_in = widths[0];
    let mut stages = Vec::new();
    for (si, &c_out) in widths.iter().enumerate() {
        let mut blocks = Vec::new();
        for bi in 0..n {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let g1 = ConvGeometry::new(c_in, c_out, 3, stride, 1, h, w)?;
            h = g1.h_out;
            w = g1.w_out;
            let g2 = ConvGeometry::new(c_out, c_out, 3, 1, 1, h, w)?;
            let name1 = format!("layer{}.{}.conv1", si + 1, bi);
            let name2 = format!("layer{}.{}.conv2", si + 1, bi);
            blocks.push(BasicBlock {
                conv1: dense_conv(g1, &name1, &mut seeds)?,
                conv2: dense_conv(g2, &name2, &mut seeds)?,
                stride,
            });
            c_in = c_out;
        }
        stages.push(blocks);
    }
    let fc_w = xavier_uniform_init(&[classes, widths[2]], widths[2], classes, seeds.take())?;
    let fc_b = Tensor::zeros(&[classes]);
    Ok(Model {
        spec,
        backbone: Backbone::ResNet { stem, stages },
        fc_w,
        fc_b,
    })
}

/// Two 3x3 convolutions (the second strided) plus a linear classifier; the
/// desk-scale acceptance-test vehicle.
pub fn build_small_cnn<T: Scalar>(
    width_mult: f64,
    classes: usize,
    in_channels: usize,
    hw: (usize, usize),
    seed: u64,
) -> Result<Model<T>> {
    let spec = ModelSpec {
        family: ArchFamily::SmallCnn,
        depth: 2,
        width_mult,
        classes,
        in_channels,
        height: hw.0,
        width: hw.1,
    };
    spec.validate()?;
    let c1 = scaled(8, width_mult);
    let c2 = scaled(16, width_mult);
    let mut seeds = SeedStream::new(seed);
    let g1 = ConvGeometry::new(in_channels, c1, 3, 1, 1, hw.0, hw.1)?;
    let conv1 = dense_conv(g1, "conv1", &mut seeds)?;
    let g2 = ConvGeometry::new(c1, c2, 3, 2, 1, g1.h_out, g1.w_out)?;
    let conv2 = dense_conv(g2, "conv2", &mut seeds)?;
    let fc_w = xavier_uniform_init(&[classes, c2], c2, classes, seeds.take())?;
    let fc_b = Tensor::zeros(&[classes]);
    Ok(Model {
        spec,
        backbone: Backbone::SmallCnn { conv1, conv2 },
        fc_w,
        fc_b,
    })
}

/// Build a model from its serialized spec.
pub fn build_from_spec<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    match spec.family {
        ArchFamily::ResNet => build_resnet_cifar(
            spec.depth,
            spec.width_mult,
            spec.classes,
            spec.in_channels,
            (spec.height, spec.width),
            seed,
        ),
        ArchFamily::SmallCnn => build_small_cnn(
            spec.width_mult,
            spec.classes,
            spec.in_channels,
            (spec.height, spec.width),
            seed,
        ),
    }
}

/// Output of taping a forward pass: the logits node, leaf ids of every
/// trainable parameter, leaf ids of the factor matrices (for orthogonality
/// penalties), and batch statistics to fold into BN running averages.
pub struct ForwardPass<T: Scalar> {
    pub logits: NodeId,
    pub params: Vec<(String, NodeId)>,
    pub factors: Vec<(String, NodeId)>,
    pub bn_stats: Vec<(String, Vec<T>, Vec<T>)>,
}

fn tape_conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    layer: &ConvLayer<T>,
    name: &str,
    pass: &mut ForwardPass<T>,
) -> Result<NodeId> {
    match layer {
        ConvLayer::Dense(d) => {
            let w = tape.leaf(d.w.clone());
            pass.params.push((format!("{name}.w"), w));
            tape.conv2d(x, w, d.geom)
        }
        ConvLayer::Tucker(t) => {
            let u1 = tape.leaf(t.u1.clone());
            let g = tape.leaf(t.core_g.clone());
            let u2 = tape.leaf(t.u2.clone());
            pass.params.push((format!("{name}.u1"), u1));
            pass.params.push((format!("{name}.g"), g));
            pass.params.push((format!("{name}.u2"), u2));
            pass.factors.push((format!("{name}.u1"), u1));
            pass.factors.push((format!("{name}.u2"), u2));
            let w1 = tape.factor_to_conv_in(u1)?;
            let y1 = tape.conv2d(x, w1, t.stage1_geom())?;
            let y2 = tape.conv2d(y1, g, t.stage2_geom())?;
            let w2 = tape.reshape(u2, vec![t.phi2(), t.geom.c_out, 1, 1])?;
            tape.conv2d(y2, w2, t.stage3_geom())
        }
    }
}

fn tape_conv_bn<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    cb: &ConvBn<T>,
    name: &str,
    bn_name: &str,
    training: bool,
    pass: &mut ForwardPass<T>,
) -> Result<NodeId> {
    let y = tape_conv(tape, x, &cb.conv, name, pass)?;
    let gamma = tape.leaf(cb.bn.gamma.clone());
    let beta = tape.leaf(cb.bn.beta.clone());
    pass.params.push((format!("{bn_name}.gamma"), gamma));
    pass.params.push((format!("{bn_name}.beta"), beta));
    let running = if training {
        None
    } else {
        Some((cb.bn.running_mean.as_slice(), cb.bn.running_var.as_slice()))
    };
    let (out, mean, var) = tape.batch_norm(y, gamma, beta, T::from_f64(BN_EPS), running)?;
    if training {
        pass.bn_stats.push((bn_name.to_string(), mean, var));
    }
    Ok(out)
}

impl<T: Scalar> Model<T> {
    /// Record the full forward pass on a tape. `training` selects batch vs
    /// running BN statistics.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        training: bool,
    ) -> Result<ForwardPass<T>> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4
            || xs[1] != self.spec.in_channels
            || xs[2] != self.spec.height
            || xs[3] != self.spec.width
        {
            return Err(Error::Shape(format!(
                "input {:?} does not match model input ({}, {}, {})",
                xs, self.spec.in_channels, self.spec.height, self.spec.width
            )));
        }
        let mut pass = ForwardPass {
            logits: 0,
            params: Vec::new(),
            factors: Vec::new(),
            bn_stats: Vec::new(),
        };
        let features = match &self.backbone {
            Backbone::ResNet { stem, stages } => {
                let y = tape_conv_bn(tape, x, stem, "stem.conv", "stem.bn", training, &mut pass)?;
                let mut h = tape.relu(y);
                for (si, blocks) in stages.iter().enumerate() {
                    for (bi, block) in blocks.iter().enumerate() {
                        let c1 = format!("layer{}.{}.conv1", si + 1, bi);
                        let b1 = format!("layer{}.{}.bn1", si + 1, bi);
                        let c2 = format!("layer{}.{}.conv2", si + 1, bi);
                        let b2 = format!("layer{}.{}.bn2", si + 1, bi);
                        let y1 =
                            tape_conv_bn(tape, h, &block.conv1, &c1, &b1, training, &mut pass)?;
                        let a1 = tape.relu(y1);
                        let y2 =
                            tape_conv_bn(tape, a1, &block.conv2, &c2, &b2, training, &mut pass)?;
                        let c_in = block.conv1.conv.geom().c_in;
                        let c_out = block.conv2.conv.geom().c_out;
                        let sc = if block.stride == 1 && c_in == c_out {
                            h
                        } else {
                            tape.shortcut_a(h, block.stride, c_out)?
                        };
                        let s = tape.add(y2, sc)?;
                        h = tape.relu(s);
                    }
                }
                h
            }
            Backbone::SmallCnn { conv1, conv2 } => {
                let y1 = tape_conv_bn(tape, x, conv1, "conv1", "bn1", training, &mut pass)?;
                let a1 = tape.relu(y1);
                let y2 = tape_conv_bn(tape, a1, conv2, "conv2", "bn2", training, &mut pass)?;
                tape.relu(y2)
            }
        };
        let pooled = tape.global_avg_pool(features)?;
        let wfc = tape.leaf(self.fc_w.clone());
        let bfc = tape.leaf(self.fc_b.clone());
        pass.params.push(("fc.w".into(), wfc));
        pass.params.push(("fc.b".into(), bfc));
        pass.logits = tape.linear(pooled, wfc, bfc)?;
        Ok(pass)
    }

    /// Plain (untaped) inference logits.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let pass = self.forward_tape(&mut tape, xid, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Named immutable views of every trainable tensor, in forward order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        fn push_cb<'a, T: Scalar>(
            name: &str,
            bn_name: &str,
            cb: &'a ConvBn<T>,
            out: &mut Vec<(String, &'a Tensor<T>)>,
        ) {
            match &cb.conv {
                ConvLayer::Dense(d) => out.push((format!("{name}.w"), &d.w)),
                ConvLayer::Tucker(t) => {
                    out.push((format!("{name}.u1"), &t.u1));
                    out.push((format!("{name}.g"), &t.core_g));
                    out.push((format!("{name}.u2"), &t.u2));
                }
            }
            out.push((format!("{bn_name}.gamma"), &cb.bn.gamma));
            out.push((format!("{bn_name}.beta"), &cb.bn.beta));
        }
        match &self.backbone {
            Backbone::ResNet { stem, stages } => {
                push_cb("stem.conv", "stem.bn", stem, &mut out);
                for (si, blocks) in stages.iter().enumerate() {
                    for (bi, b) in blocks.iter().enumerate() {
                        push_cb(
                            &format!("layer{}.{}.conv1", si + 1, bi),
                            &format!("layer{}.{}.bn1", si + 1, bi),
                            &b.conv1,
                            &mut out,
                        );
                        push_cb(
                            &format!("layer{}.{}.conv2", si + 1, bi),
                            &format!("layer{}.{}.bn2", si + 1, bi),
                            &b.conv2,
                            &mut out,
                        );
                    }
                }
            }
            Backbone::SmallCnn { conv1, conv2 } => {
                push_cb("conv1", "bn1", conv1, &mut out);
                push_cb("conv2", "bn2", conv2, &mut out);
            }
        }
        out.push(("fc.w".into(), &self.fc_w));
        out.push(("fc.b".into(), &self.fc_b));
        out
    }

    /// Named mutable views of every trainable tensor, same order as `params`.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        fn push_cb<'a, T: Scalar>(
            name: &str,
            bn_name: &str,
            cb: &'a mut ConvBn<T>,
            out: &mut Vec<(String, &'a mut Tensor<T>)>,
        ) {
            match &mut cb.conv {
                ConvLayer::Dense(d) => out.push((format!("{name}.w"), &mut d.w)),
                ConvLayer::Tucker(t) => {
                    out.push((format!("{name}.u1"), &mut t.u1));
                    out.push((format!("{name}.g"), &mut t.core_g));
                    out.push((format!("{name}.u2"), &mut t.u2));
                }
            }
            out.push((format!("{bn_name}.gamma"), &mut cb.bn.gamma));
            out.push((format!("{bn_name}.beta"), &mut cb.bn.beta));
        }
        match &mut self.backbone {
            Backbone::ResNet { stem, stages } => {
                push_cb("stem.conv", "stem.bn", stem, &mut out);
                for (si, blocks) in stages.iter_mut().enumerate() {
                    for (bi, b) in blocks.iter_mut().enumerate() {
                        push_cb(
                            &format!("layer{}.{}.conv1", si + 1, bi),
                            &format!("layer{}.{}.bn1", si + 1, bi),
                            &mut b.conv1,
                            &mut out,
                        );
                        push_cb(
                            &format!("layer{}.{}.conv2", si + 1, bi),
                            &format!("layer{}.{}.bn2", si + 1, bi),
                            &mut b.conv2,
                            &mut out,
                        );
                    }
                }
            }
            Backbone::SmallCnn { conv1, conv2 } => {
                push_cb("conv1", "bn1", conv1, &mut out);
                push_cb("conv2", "bn2", conv2, &mut out);
            }
        }
        out.push(("fc.w".into(), &mut self.fc_w));
        out.push(("fc.b".into(), &mut self.fc_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named conv layers, in forward order.
    pub fn conv_layers(&self) -> Vec<(String, &ConvLayer<T>)> {
        let mut out = Vec::new();
        match &self.backbone {
            Backbone::ResNet { stem, stages } => {
                out.push(("stem.conv".to_string(), &stem.conv));
                for (si, blocks) in stages.iter().enumerate() {
                    for (bi, b) in blocks.iter().enumerate() {
                        out.push((format!("layer{}.{}.conv1", si + 1, bi), &b.conv1.conv));
                        out.push((format!("layer{}.{}.conv2", si + 1, bi), &b.conv2.conv));
                    }
                }
            }
            Backbone::SmallCnn { conv1, conv2 } => {
                out.push(("conv1".to_string(), &conv1.conv));
                out.push(("conv2".to_string(), &conv2.conv));
            }
        }
        out
    }

    fn conv_layers_mut(&mut self) -> Vec<(String, &mut ConvLayer<T>)> {
        let mut out: Vec<(String, &mut ConvLayer<T>)> = Vec::new();
        match &mut self.backbone {
            Backbone::ResNet { stem, stages } => {
                out.push(("stem.conv".to_string(), &mut stem.conv));
                for (si, blocks) in stages.iter_mut().enumerate() {
                    for (bi, b) in blocks.iter_mut().enumerate() {
                        out.push((format!("layer{}.{}.conv1", si + 1, bi), &mut b.conv1.conv));
                        out.push((format!("layer{}.{}.conv2", si + 1, bi), &mut b.conv2.conv));
                    }
                }
            }
            Backbone::SmallCnn { conv1, conv2 } => {
                out.push(("conv1".to_string(), &mut conv1.conv));
                out.push(("conv2".to_string(), &mut conv2.conv));
            }
        }
        out
    }

    /// Factor matrices of every Tucker-2 layer, named `<layer>.u1` / `.u2`.
    pub fn factor_matrices(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, layer) in self.conv_layers() {
            if let ConvLayer::Tucker(t) = layer {
                out.push((format!("{name}.u1"), &t.u1));
                out.push((format!("{name}.u2"), &t.u2));
            }
        }
        out
    }

    /// Per-factor orthogonality residual: the Frobenius norm of the Gram
    /// residual on the smaller mode, scaled by that mode's size. A wide
    /// factor (Phi < C) can have orthonormal rows but never orthonormal
    /// columns, so the column Gram would report an unreachable floor.
    pub fn residual_report(&self) -> Result<Vec<(String, T)>> {
        let mut out = Vec::new();
        for (name, a) in self.factor_matrices() {
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            let r = if rows <= cols {
                crate::ortho::residual_left(a)?
            } else {
                crate::ortho::residual(a)?
            };
            let dim = T::from_usize(rows.min(cols));
            out.push((name, r.frob_norm_sq().sqrt() / dim));
        }
        Ok(out)
    }

    /// Mutable BN handle by name ("stem.bn", "layer1.0.bn2", "bn1", ...).
    fn bn_mut(&mut self, name: &str) -> Option<&mut BatchNorm<T>> {
        match &mut self.backbone {
            Backbone::ResNet { stem, stages } => {
                if name == "stem.bn" {
                    return Some(&mut stem.bn);
                }
                let rest = name.strip_prefix("layer")?;
                let (si, rest) = rest.split_once('.')?;
                let (bi, bn) = rest.split_once('.')?;
                let si: usize = si.parse().ok()?;
                let bi: usize = bi.parse().ok()?;
                let block = stages.get_mut(si.checked_sub(1)?)?.get_mut(bi)?;
                match bn {
                    "bn1" => Some(&mut block.conv1.bn),
                    "bn2" => Some(&mut block.conv2.bn),
                    _ => None,
                }
            }
            Backbone::SmallCnn { conv1, conv2 } => match name {
                "bn1" => Some(&mut conv1.bn),
                "bn2" => Some(&mut conv2.bn),
                _ => None,
            },
        }
    }

    /// Fold batch statistics from a training forward pass into the running
    /// averages: running <- (1 - m) * running + m * batch.
    pub fn apply_bn_updates(&mut self, stats: &[(String, Vec<T>, Vec<T>)]) -> Result<()> {
        let m = T::from_f64(BN_MOMENTUM);
        for (name, mean, var) in stats {
            let bn = self
                .bn_mut(name)
                .ok_or_else(|| Error::Config(format!("unknown batch-norm layer {name}")))?;
            for (r, &b) in bn.running_mean.iter_mut().zip(mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in bn.running_var.iter_mut().zip(var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
        Ok(())
    }

    /// All persistent arrays: trainable parameters plus BN running stats.
    pub fn state_arrays(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let push_bn = |name: &str, bn: &BatchNorm<T>, out: &mut Vec<(String, Tensor<T>)>| {
            let c = bn.running_mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(vec![c], bn.running_mean.clone()).unwrap(),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(vec![c], bn.running_var.clone()).unwrap(),
            ));
        };
        match &self.backbone {
            Backbone::ResNet { stem, stages } => {
                push_bn("stem.bn", &stem.bn, &mut out);
                for (si, blocks) in stages.iter().enumerate() {
                    for (bi, b) in blocks.iter().enumerate() {
                        push_bn(&format!("layer{}.{}.bn1", si + 1, bi), &b.conv1.bn, &mut out);
                        push_bn(&format!("layer{}.{}.bn2", si + 1, bi), &b.conv2.bn, &mut out);
                    }
                }
            }
            Backbone::SmallCnn { conv1, conv2 } => {
                push_bn("bn1", &conv1.bn, &mut out);
                push_bn("bn2", &conv2.bn, &mut out);
            }
        }
        out
    }

    /// Load arrays produced by `state_arrays` back into the model; every
    /// array must match an existing name and shape.
    pub fn load_state_arrays(&mut self, arrays: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, value) in arrays {
            if let Some(stripped) = name
                .strip_suffix(".running_mean")
                .map(|p| (p, true))
                .or_else(|| name.strip_suffix(".running_var").map(|p| (p, false)))
            {
                let (bn_name, is_mean) = stripped;
                let bn = self
                    .bn_mut(bn_name)
                    .ok_or_else(|| Error::Format(format!("unknown array {name}")))?;
                let dst = if is_mean {
                    &mut bn.running_mean
                } else {
                    &mut bn.running_var
                };
                if value.len() != dst.len() {
                    return Err(Error::Format(format!("array {name} has wrong length")));
                }
                dst.copy_from_slice(value.data());
                continue;
            }
            let mut found = false;
            for (pname, p) in self.params_mut() {
                if pname == *name {
                    if p.shape() != value.shape() {
                        return Err(Error::Format(format!(
                            "array {name}: shape {:?} does not match {:?}",
                            value.shape(),
                            p.shape()
                        )));
                    }
                    *p = value.clone();
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::Format(format!("unknown array {name}")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let backbone = match &self.backbone {
            Backbone::ResNet { stem, stages } => Backbone::ResNet {
                stem: stem.cast(),
                stages: stages
                    .iter()
                    .map(|blocks| {
                        blocks
                            .iter()
                            .map(|b| BasicBlock {
                                conv1: b.conv1.cast(),
                                conv2: b.conv2.cast(),
                                stride: b.stride,
                            })
                            .collect()
                    })
                    .collect(),
            },
            Backbone::SmallCnn { conv1, conv2 } => Backbone::SmallCnn {
                conv1: conv1.cast(),
                conv2: conv2.cast(),
            },
        };
        Model {
            spec: self.spec.clone(),
            backbone,
            fc_w: self.fc_w.cast(),
            fc_b: self.fc_b.cast(),
        }
    }
}

/// One rank-config entry: factorize at (Phi1, Phi2), or keep dense.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankEntry {
    Ranks(usize, usize),
    Dense,
}

/// Ordered layer-name -> rank mapping parsed from the text format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankConfig {
    pub entries: Vec<(String, RankEntry)>,
}

impl RankConfig {
    pub fn get(&self, name: &str) -> Option<RankEntry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| *e)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (name, entry) in &self.entries {
            match entry {
                RankEntry::Ranks(p1, p2) => s.push_str(&format!("{name} = {p1},{p2}\n")),
                RankEntry::Dense => s.push_str(&format!("{name} = N/A\n")),
            }
        }
        s
    }
}

/// Parse the line-oriented rank-config format: `name = Phi1,Phi2` or
/// `name = N/A`; `#` starts a comment; blank lines ignored.
pub fn parse_rank_config(text: &str) -> Result<RankConfig> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse(format!("line {}: {msg}", lineno + 1));
        let (name, rhs) = line
            .split_once('=')
            .ok_or_else(|| err("expected `name = Phi1,Phi2` or `name = N/A`"))?;
        let name = name.trim();
        let rhs = rhs.trim();
        if name.is_empty() {
            return Err(err("empty layer name"));
        }
        if name.contains(char::is_whitespace) {
            return Err(err("layer name contains whitespace"));
        }
        if !seen.insert(name.to_string()) {
            return Err(Error::Parse(format!(
                "line {}: duplicate layer {name}",
                lineno + 1
            )));
        }
        let entry = if rhs.eq_ignore_ascii_case("n/a") {
            RankEntry::Dense
        } else {
            let (a, b) = rhs
                .split_once(',')
                .ok_or_else(|| err("expected two comma-separated ranks"))?;
            let p1: usize = a
                .trim()
                .parse()
                .map_err(|_| err(&format!("bad rank `{}`", a.trim())))?;
            let p2: usize = b
                .trim()
                .parse()
                .map_err(|_| err(&format!("bad rank `{}`", b.trim())))?;
            RankEntry::Ranks(p1, p2)
        };
        entries.push((name.to_string(), entry));
    }
    Ok(RankConfig { entries })
}

/// Replace each named conv with a freshly initialized Tucker-2 layer of the
/// given ranks (training-from-scratch semantics: existing weights are NOT
/// decomposed). `N/A` entries and unnamed layers stay dense.
pub fn apply_rank_config<T: Scalar>(
    model: &mut Model<T>,
    cfg: &RankConfig,
    seed: u64,
) -> Result<()> {
    let known: HashSet<String> = model.conv_layers().into_iter().map(|(n, _)| n).collect();
    for (name, _) in &cfg.entries {
        if !known.contains(name) {
            return Err(Error::Config(format!(
                "rank config names unknown layer {name}"
            )));
        }
    }
    let mut seeds = SeedStream::new(seed);
    for (name, layer) in model.conv_layers_mut() {
        match cfg.get(&name) {
            Some(RankEntry::Ranks(p1, p2)) => {
                let geom = *layer.geom();
                check_rank_bounds(&geom, p1, p2)
                    .map_err(|e| Error::Config(format!("layer {name}: {e}")))?;
                *layer = ConvLayer::Tucker(Tucker2Conv::init(geom, p1, p2, seeds.take(), &name)?);
            }
            Some(RankEntry::Dense) | None => {
                seeds.take(); // keep the stream aligned regardless of entry kind
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet20_has_19_convs_and_correct_params() {
        let m: Model<f32> = build_resnet_cifar(20, 1.0, 10, 3, (32, 32), 0).unwrap();
        let convs = m.conv_layers();
        assert_eq!(convs.len(), 19);
        let stage_convs: Vec<_> = convs
            .iter()
            .filter(|(n, _)| n.starts_with("layer"))
            .collect();
        assert_eq!(stage_convs.len(), 18);
        // canonical figure ~0.27M
        let count = m.param_count() as f64;
        assert!(
            (count - 272_474.0).abs() / 272_474.0 < 0.03,
            "param count {count}"
        );
    }

    #[test]
    fn invalid_depth_rejected() {
        assert!(build_resnet_cifar::<f32>(21, 1.0, 10, 3, (32, 32), 0).is_err());
        assert!(build_resnet_cifar::<f32>(6, 1.0, 10, 3, (32, 32), 0).is_err());
    }

    #[test]
    fn quarter_width_forward_shape() {
        let m: Model<f32> = build_resnet_cifar(20, 0.25, 10, 3, (32, 32), 1).unwrap();
        match &m.backbone {
            Backbone::ResNet { stages, .. } => {
                assert_eq!(stages[0][0].conv1.conv.geom().c_out, 4);
                assert_eq!(stages[1][0].conv1.conv.geom().c_out, 8);
                assert_eq!(stages[2][0].conv1.conv.geom().c_out, 16);
            }
            _ => unreachable!(),
        }
        let x = Tensor::<f32>::filled(&[2, 3, 32, 32], 0.1);
        let y = m.logits(&x).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
    }

    #[test]
    fn parse_basic_entries() {
        let cfg = parse_rank_config(
            "# comment\n\nlayer1.0.conv1 = 14,14\nlayer1.0.conv2 = N/A # keep\n",
        )
        .unwrap();
        assert_eq!(cfg.entries.len(), 2);
        assert_eq!(cfg.get("layer1.0.conv1"), Some(RankEntry::Ranks(14, 14)));
        assert_eq!(cfg.get("layer1.0.conv2"), Some(RankEntry::Dense));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = parse_rank_config("layer1.0.conv1 = 14,14\nbogus line\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = parse_rank_config("a = 1,2\na = 3,4\n").unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
        let e = parse_rank_config("a = 1;2\n").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
    }

    #[test]
    fn parse_serialize_parse_identity() {
        let text = "layer1.0.conv1 = 14,14\nlayer1.0.conv2 = N/A\nlayer2.1.conv1 = 7,9\n";
        let cfg = parse_rank_config(text).unwrap();
        let cfg2 = parse_rank_config(&cfg.serialize()).unwrap();
        assert_eq!(cfg, cfg2);
    }

    #[test]
    fn apply_replaces_named_layers_only() {
        let mut m: Model<f64> = build_resnet_cifar(20, 0.5, 10, 3, (32, 32), 2).unwrap();
        let before = m.param_count();
        let cfg = parse_rank_config("layer1.0.conv1 = 4,4\nlayer3.2.conv2 = N/A\n").unwrap();
        apply_rank_config(&mut m, &cfg, 9).unwrap();
        let tucker: Vec<_> = m
            .conv_layers()
            .into_iter()
            .filter(|(_, l)| matches!(l, ConvLayer::Tucker(_)))
            .collect();
        assert_eq!(tucker.len(), 1);
        assert_eq!(tucker[0].0, "layer1.0.conv1");
        assert!(m.param_count() < before);
        // forward shapes preserved
        let x = Tensor::<f64>::filled(&[1, 3, 32, 32], 0.3);
        assert_eq!(m.logits(&x).unwrap().shape(), &[1, 10]);
    }

    #[test]
    fn apply_empty_config_is_identity() {
        let mut m: Model<f32> = build_resnet_cifar(20, 0.25, 10, 3, (32, 32), 3).unwrap();
        let orig = m.clone();
        apply_rank_config(&mut m, &RankConfig::default(), 0).unwrap();
        assert_eq!(m, orig);
    }

    #[test]
    fn apply_unknown_or_out_of_bounds_rejected() {
        let mut m: Model<f32> = build_resnet_cifar(20, 0.25, 10, 3, (32, 32), 3).unwrap();
        let cfg = parse_rank_config("layer9.0.conv1 = 2,2\n").unwrap();
        assert!(apply_rank_config(&mut m, &cfg, 0).is_err());
        let cfg = parse_rank_config("layer1.0.conv1 = 2,99\n").unwrap();
        let e = apply_rank_config(&mut m, &cfg, 0).unwrap_err();
        assert!(e.to_string().contains("layer1.0.conv1"), "{e}");
    }

    #[test]
    fn apply_same_seed_is_bit_identical() {
        let cfg = parse_rank_config("layer1.0.conv1 = 4,4\nlayer2.0.conv2 = 3,5\n").unwrap();
        let mut a: Model<f32> = build_resnet_cifar(20, 0.25, 10, 3, (32, 32), 5).unwrap();
        let mut b = a.clone();
        apply_rank_config(&mut a, &cfg, 77).unwrap();
        apply_rank_config(&mut b, &cfg, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_cnn_forward_and_names() {
        let m: Model<f32> = build_small_cnn(1.0, 10, 1, (8, 8), 4).unwrap();
        let names: Vec<_> = m.conv_layers().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["conv1", "conv2"]);
        let y = m.logits(&Tensor::filled(&[3, 1, 8, 8], 0.5)).unwrap();
        assert_eq!(y.shape(), &[3, 10]);
    }

    #[test]
    fn state_arrays_round_trip() {
        let mut m: Model<f32> = build_resnet_cifar(20, 0.25, 10, 3, (32, 32), 6).unwrap();
        let cfg = parse_rank_config("layer1.1.conv1 = 3,3\n").unwrap();
        apply_rank_config(&mut m, &cfg, 1).unwrap();
        let arrays = m.state_arrays();
        let mut fresh: Model<f32> = build_resnet_cifar(20, 0.25, 10, 3, (32, 32), 99).unwrap();
        apply_rank_config(&mut fresh, &cfg, 2).unwrap();
        fresh.load_state_arrays(&arrays).unwrap();
        assert_eq!(fresh, m);
        // bogus array rejected
        let bad = vec![("nope.w".to_string(), Tensor::<f32>::zeros(&[1]))];
        assert!(fresh.load_state_arrays(&bad).is_err());
    }

    #[test]
    fn residual_report_zero_for_orthonormal_factors() {
        let mut m: Model<f64> = build_small_cnn(1.0, 10, 1, (8, 8), 4).unwrap();
        // make conv2 a Tucker layer with identity-like factors
        if let Backbone::SmallCnn { conv2, .. } = &mut m.backbone {
            let geom = *conv2.conv.geom();
            let mut u1 = Tensor::zeros(&[geom.c_in, geom.c_in]);
            let mut u2 = Tensor::zeros(&[geom.c_out, geom.c_out]);
            for i in 0..geom.c_in {
                u1.set(&[i, i], 1.0);
            }
            for i in 0..geom.c_out {
                u2.set(&[i, i], 1.0);
            }
            let core = Tensor::zeros(&[geom.c_in, geom.c_out, geom.k, geom.k]);
            conv2.conv = ConvLayer::Tucker(
                Tucker2Conv::from_parts(u1, core, u2, geom, "conv2").unwrap(),
            );
        }
        for (_, r) in m.residual_report().unwrap() {
            assert!(r.abs() < 1e-12);
        }
    }
}

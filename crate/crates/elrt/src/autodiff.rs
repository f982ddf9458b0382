//! Reverse-mode differentiation over an eagerly evaluated tape.
//!
//! The op set is deliberately small: exactly what the factorized forward
//! pass, batch norm, the classifier head, cross-entropy and the four
//! orthogonality penalties need. Every rule is finite-difference tested.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ortho;
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_batched, matmul, transpose,
    ConvGeometry, Tensor,
};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeometry,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: T,
    },
    Relu {
        a: NodeId,
    },
    Square {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    /// (Phi, C) factor -> (C, Phi, 1, 1) conv weight.
    FactorToConvIn {
        a: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    /// Option-A residual shortcut: stride-subsample, zero-pad channels.
    ShortcutA {
        x: NodeId,
        stride: usize,
    },
    /// a^T a - I.
    Residual {
        a: NodeId,
    },
    /// a a^T - I.
    ResidualLeft {
        a: NodeId,
    },
    FrobSq {
        a: NodeId,
    },
    /// Infinity-induced operator norm with first-row subgradient tie-break.
    InfNorm {
        a: NodeId,
    },
    /// Spectral norm of a symmetric matrix, differentiated through the
    /// power iteration itself.
    SpectralNorm {
        a: NodeId,
    },
    /// Weighted sum of scalar nodes.
    AffineSum {
        terms: Vec<(NodeId, T)>,
    },
}

#[derive(Debug, Clone)]
enum Ctx<T: Scalar> {
    None,
    Bn {
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Softmax {
        probs: Tensor<T>,
    },
    Power {
        iterates: Vec<Vec<T>>, // v_0 .. v_K (unit vectors)
        norms: Vec<T>,         // ||S v_k|| for k = 0 .. K-1
        lambda: T,             // signed Rayleigh quotient at v_K
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    ctx: Ctx<T>,
}

/// Gradients keyed by leaf node id; a missing entry means zero.
pub type GradientSet<T> = HashMap<NodeId, Tensor<T>>;

/// One training step's computation record.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id].value.data()[0]
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, ctx: Ctx<T>) -> NodeId {
        self.nodes.push(Node { op, value, ctx });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, Ctx::None)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        crate::tensor::check_conv_shapes(self.value(x), self.value(w), &geom)?;
        let y = conv2d_batched(self.value(x), self.value(w), &geom);
        Ok(self.push(Op::Conv2d { x, w, geom }, y, Ctx::None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, v, Ctx::None))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale { a, c }, v, Ctx::None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu { a }, v, Ctx::None)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square { a }, v, Ctx::None)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let m = t.data().iter().copied().sum::<T>() / T::from_usize(t.len());
        self.push(Op::Mean { a }, Tensor::scalar(m), Ctx::None)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape { a }, v, Ctx::None))
    }

    pub fn factor_to_conv_in(&mut self, a: NodeId) -> Result<NodeId> {
        let f = self.value(a);
        if f.ndim() != 2 {
            return Err(Error::Shape(format!(
                "factor must be 2-D, got {:?}",
                f.shape()
            )));
        }
        let (phi, c) = (f.shape()[0], f.shape()[1]);
        let mut w = Tensor::zeros(&[c, phi, 1, 1]);
        for r in 0..phi {
            for p in 0..c {
                w.set(&[p, r, 0, 0], f.at(&[r, p]));
            }
        }
        Ok(self.push(Op::FactorToConvIn { a }, w, Ctx::None))
    }

    /// Batch norm over the channel axis of `(N, C, H, W)`. In training mode
    /// batch statistics are used (and returned for the running-average
    /// update); in eval mode the supplied running statistics are used and the
    /// node is treated as constant w.r.t. statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> Result<(NodeId, Vec<T>, Vec<T>)> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::Shape(format!(
                "batch norm expects (N,C,H,W), got {:?}",
                xv.shape()
            )));
        }
        let (n, c, h, w) = (
            xv.shape()[0],
            xv.shape()[1],
            xv.shape()[2],
            xv.shape()[3],
        );
        let count = T::from_usize(n * h * w);
        let (mean, var, train) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = ((ni * c + ci) * h) * w;
                        for o in 0..h * w {
                            mean[ci] += xv.data()[base + o];
                        }
                    }
                }
                for m in mean.iter_mut() {
                    *m /= count;
                }
                for ni in 0..n {
                    for ci in 0..c {
                        let base = ((ni * c + ci) * h) * w;
                        for o in 0..h * w {
                            let d = xv.data()[base + o] - mean[ci];
                            var[ci] += d * d;
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v /= count;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        if gv.len() != c || bv.len() != c {
            return Err(Error::Shape("batch norm affine params must have C elements".into()));
        }
        let mut y = Tensor::zeros(xv.shape());
        {
            let xd = self.value(x).data().to_vec();
            let yd = y.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = ((ni * c + ci) * h) * w;
                    for o in 0..h * w {
                        let xhat = (xd[base + o] - mean[ci]) * inv_std[ci];
                        yd[base + o] = gv[ci] * xhat + bv[ci];
                    }
                }
            }
        }
        let id = self.push(
            Op::BatchNorm { x, gamma, beta },
            y,
            Ctx::Bn {
                mean: mean.clone(),
                inv_std,
                train,
            },
        );
        Ok((id, mean, var))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::Shape(format!(
                "pool expects (N,C,H,W), got {:?}",
                xv.shape()
            )));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut y = Tensor::zeros(&[n, c]);
        for ni in 0..n {
            for ci in 0..c {
                let base = ((ni * c + ci) * h) * w;
                let s: T = xv.data()[base..base + h * w].iter().copied().sum();
                y.set(&[ni, ci], s / T::from_usize(h * w));
            }
        }
        Ok(self.push(Op::GlobalAvgPool { x }, y, Ctx::None))
    }

    /// y = x w^T + b with x (N, F), w (O, F), b (O).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ndim() != 2 || wv.ndim() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::Shape(format!(
                "linear: x {:?} w {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        if bv.len() != wv.shape()[0] {
            return Err(Error::Shape("linear bias length".into()));
        }
        let mut y = matmul(xv, &transpose(wv)?)?;
        let o = wv.shape()[0];
        for row in y.data_mut().chunks_mut(o) {
            for (v, &bb) in row.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        Ok(self.push(Op::Linear { x, w, b }, y, Ctx::None))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross entropy: logits {:?} vs {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = Tensor::zeros(&[n, k]);
        let mut loss = T::zero();
        for ni in 0..n {
            let row = &lv.data()[ni * k..(ni + 1) * k];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
            let z: T = exps.iter().copied().sum();
            for (j, e) in exps.iter().enumerate() {
                probs.set(&[ni, j], *e / z);
            }
            loss -= (row[labels[ni]] - mx - z.ln()).min(T::zero());
        }
        loss /= T::from_usize(n);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
            Ctx::Softmax { probs },
        ))
    }

    /// Option-A shortcut: subsample spatially by `stride`, zero-pad channels
    /// up to `c_out` (appended at the high end).
    pub fn shortcut_a(&mut self, x: NodeId, stride: usize, c_out: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::Shape("shortcut expects (N,C,H,W)".into()));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        if c_out < c {
            return Err(Error::Shape("shortcut cannot shrink channels".into()));
        }
        let (ho, wo) = ((h + stride - 1) / stride, (w + stride - 1) / stride);
        let mut y = Tensor::zeros(&[n, c_out, ho, wo]);
        for ni in 0..n {
            for ci in 0..c {
                for r in 0..ho {
                    for cc in 0..wo {
                        y.set(&[ni, ci, r, cc], xv.at(&[ni, ci, r * stride, cc * stride]));
                    }
                }
            }
        }
        Ok(self.push(Op::ShortcutA { x, stride }, y, Ctx::None))
    }

    pub fn gram_residual(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ortho::residual(self.value(a))?;
        Ok(self.push(Op::Residual { a }, v, Ctx::None))
    }

    pub fn gram_residual_left(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ortho::residual_left(self.value(a))?;
        Ok(self.push(Op::ResidualLeft { a }, v, Ctx::None))
    }

    pub fn frob_sq(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).frob_norm_sq();
        self.push(Op::FrobSq { a }, Tensor::scalar(v), Ctx::None)
    }

    pub fn inf_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() != 2 {
            return Err(Error::Shape("inf norm expects a matrix".into()));
        }
        let v = ortho::inf_operator_norm(av);
        Ok(self.push(Op::InfNorm { a }, Tensor::scalar(v), Ctx::None))
    }

    /// Spectral norm of a symmetric matrix via power iteration; iterates are
    /// cached so the backward pass can differentiate through them.
    pub fn spectral_norm(
        &mut self,
        a: NodeId,
        iters: usize,
        tol: T,
        seed: u64,
    ) -> Result<NodeId> {
        let s = self.value(a).clone();
        if s.ndim() != 2 || s.shape()[0] != s.shape()[1] {
            return Err(Error::Shape("spectral norm expects a square matrix".into()));
        }
        let n = s.shape()[0];
        let start: Tensor<T> = crate::tensor::xavier_uniform_init(&[n], 1, 1, seed)?;
        let mut v = start.into_data();
        let nrm = l2(&v);
        for x in v.iter_mut() {
            *x /= nrm;
        }
        let mut iterates = vec![v.clone()];
        let mut norms = Vec::new();
        let mut lambda = T::zero();
        for _ in 0..iters {
            let u = symv(&s, &v);
            let un = l2(&u);
            if un == T::zero() {
                lambda = T::zero();
                break;
            }
            let next: Vec<T> = u.iter().map(|&x| x / un).collect();
            let new_lambda = dot(&next, &symv(&s, &next));
            norms.push(un);
            iterates.push(next.clone());
            let done = (new_lambda - lambda).abs() <= tol;
            v = next;
            lambda = new_lambda;
            if done {
                break;
            }
        }
        let value = Tensor::scalar(lambda.abs());
        Ok(self.push(
            Op::SpectralNorm { a },
            value,
            Ctx::Power {
                iterates,
                norms,
                lambda,
            },
        ))
    }

    pub fn affine_sum(&mut self, terms: Vec<(NodeId, T)>) -> Result<NodeId> {
        let mut acc = T::zero();
        for &(id, c) in &terms {
            if self.value(id).len() != 1 {
                return Err(Error::Shape("affine sum takes scalar nodes".into()));
            }
            acc += c * self.scalar_value(id);
        }
        Ok(self.push(Op::AffineSum { terms }, Tensor::scalar(acc), Ctx::None))
    }

    /// Soft-orthogonality penalty node: (rho/Phi^2) ||a^T a - I||_F^2.
    pub fn so_penalty(&mut self, a: NodeId, rho: T) -> Result<NodeId> {
        let phi = T::from_usize(self.value(a).shape()[0]);
        let r = self.gram_residual(a)?;
        let f = self.frob_sq(r);
        Ok(self.scale(f, rho / (phi * phi)))
    }

    /// Double-soft-orthogonality penalty node.
    pub fn dso_penalty(&mut self, a: NodeId, rho: T) -> Result<NodeId> {
        let phi = T::from_usize(self.value(a).shape()[0]);
        let r = self.gram_residual(a)?;
        let fr = self.frob_sq(r);
        let l = self.gram_residual_left(a)?;
        let fl = self.frob_sq(l);
        let s = self.affine_sum(vec![(fr, T::one()), (fl, T::one())])?;
        Ok(self.scale(s, rho / (phi * phi)))
    }

    /// Mutual-coherence penalty node: rho ||a^T a - I||_inf.
    pub fn mc_penalty(&mut self, a: NodeId, rho: T) -> Result<NodeId> {
        let r = self.gram_residual(a)?;
        let n = self.inf_norm(r)?;
        Ok(self.scale(n, rho))
    }

    /// SRIP penalty node: rho sigma(a^T a - I).
    pub fn srip_penalty(&mut self, a: NodeId, rho: T, iters: usize, tol: T) -> Result<NodeId> {
        let r = self.gram_residual(a)?;
        let s = self.spectral_norm(r, iters, tol, ortho::SRIP_POWER_SEED)?;
        Ok(self.scale(s, rho))
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// leaf reachable from the loss; unreachable leaves are absent (zero).
    pub fn backward(&self, loss: NodeId) -> Result<GradientSet<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep for collection
                    continue;
                }
                Op::Conv2d { x, w, geom } => {
                    let n = self.value(*x).shape()[0];
                    let dx = conv2d_backward_input(&g, self.value(*w), geom, n);
                    let dw = conv2d_backward_weight(&g, self.value(*x), geom);
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Scale { a, c } => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::Relu { a } => {
                    let av = self.value(*a);
                    let mut dx = g;
                    for (d, &x) in dx.data_mut().iter_mut().zip(av.data()) {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Square { a } => {
                    let av = self.value(*a);
                    let mut dx = g;
                    let two = T::from_f64(2.0);
                    for (d, &x) in dx.data_mut().iter_mut().zip(av.data()) {
                        *d *= two * x;
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Mean { a } => {
                    let n = self.value(*a).len();
                    let gv = g.data()[0] / T::from_usize(n);
                    accumulate(&mut grads, *a, Tensor::filled(self.value(*a).shape(), gv))?;
                }
                Op::Reshape { a } => {
                    let dx = g.reshape(self.value(*a).shape().to_vec())?;
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::FactorToConvIn { a } => {
                    let f = self.value(*a);
                    let (phi, c) = (f.shape()[0], f.shape()[1]);
                    let mut df = Tensor::zeros(&[phi, c]);
                    for r in 0..phi {
                        for p in 0..c {
                            df.set(&[r, p], g.at(&[p, r, 0, 0]));
                        }
                    }
                    accumulate(&mut grads, *a, df)?;
                }
                Op::BatchNorm { x, gamma, beta } => {
                    let (mean, inv_std, train) = match &self.nodes[id].ctx {
                        Ctx::Bn {
                            mean,
                            inv_std,
                            train,
                        } => (mean, inv_std, *train),
                        _ => unreachable!(),
                    };
                    let xv = self.value(*x);
                    let (n, c, h, w) =
                        (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let count = T::from_usize(n * h * w);
                    let gv = self.value(*gamma).data();
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    let mut dx = Tensor::zeros(xv.shape());
                    for ci in 0..c {
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for ni in 0..n {
                            let base = ((ni * c + ci) * h) * w;
                            for o in 0..h * w {
                                let dy = g.data()[base + o];
                                let xhat = (xv.data()[base + o] - mean[ci]) * inv_std[ci];
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat;
                            }
                        }
                        dbeta.data_mut()[ci] = sum_dy;
                        dgamma.data_mut()[ci] = sum_dy_xhat;
                        let scale = gv[ci] * inv_std[ci];
                        for ni in 0..n {
                            let base = ((ni * c + ci) * h) * w;
                            for o in 0..h * w {
                                let dy = g.data()[base + o];
                                let d = if train {
                                    let xhat =
                                        (xv.data()[base + o] - mean[ci]) * inv_std[ci];
                                    scale
                                        * (dy
                                            - sum_dy / count
                                            - xhat * sum_dy_xhat / count)
                                } else {
                                    scale * dy
                                };
                                dx.data_mut()[base + o] = d;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, dgamma)?;
                    accumulate(&mut grads, *beta, dbeta)?;
                }
                Op::GlobalAvgPool { x } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) =
                        (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let inv = T::one() / T::from_usize(h * w);
                    let mut dx = Tensor::zeros(xv.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            let gv = g.at(&[ni, ci]) * inv;
                            let base = ((ni * c + ci) * h) * w;
                            for o in 0..h * w {
                                dx.data_mut()[base + o] = gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Linear { x, w, b } => {
                    let dx = matmul(&g, self.value(*w))?;
                    let dw = matmul(&transpose(&g)?, self.value(*x))?;
                    let o = self.value(*w).shape()[0];
                    let mut db = Tensor::zeros(&[o]);
                    for row in g.data().chunks(o) {
                        for (d, &gv) in db.data_mut().iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::CrossEntropy { logits, labels } => {
                    let probs = match &self.nodes[id].ctx {
                        Ctx::Softmax { probs } => probs,
                        _ => unreachable!(),
                    };
                    let (n, k) = (probs.shape()[0], probs.shape()[1]);
                    let gv = g.data()[0] / T::from_usize(n);
                    let mut dl = probs.scale(gv);
                    for (ni, &lab) in labels.iter().enumerate() {
                        let v = dl.at(&[ni, lab]) - gv;
                        dl.set(&[ni, lab], v);
                    }
                    let _ = k;
                    accumulate(&mut grads, *logits, dl)?;
                }
                Op::ShortcutA { x, stride } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) =
                        (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let (ho, wo) = (g.shape()[2], g.shape()[3]);
                    let mut dx = Tensor::zeros(xv.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            for r in 0..ho {
                                for cc in 0..wo {
                                    if r * stride < h && cc * stride < w {
                                        dx.set(
                                            &[ni, ci, r * stride, cc * stride],
                                            g.at(&[ni, ci, r, cc]),
                                        );
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Residual { a } => {
                    // R = a^T a - I: da = a (dR + dR^T)
                    let sym = g.add(&transpose(&g)?)?;
                    let da = matmul(self.value(*a), &sym)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::ResidualLeft { a } => {
                    // L = a a^T - I: da = (dL + dL^T) a
                    let sym = g.add(&transpose(&g)?)?;
                    let da = matmul(&sym, self.value(*a))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::FrobSq { a } => {
                    let gv = g.data()[0];
                    let da = self.value(*a).scale(T::from_f64(2.0) * gv);
                    accumulate(&mut grads, *a, da)?;
                }
                Op::InfNorm { a } => {
                    let av = self.value(*a);
                    let gv = g.data()[0];
                    let row = ortho::inf_norm_arg_row(av);
                    let n = av.shape()[1];
                    let mut da = Tensor::zeros(av.shape());
                    for j in 0..n {
                        let v = av.at(&[row, j]);
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        da.set(&[row, j], s * gv);
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SpectralNorm { a } => {
                    let (iterates, norms, lambda) = match &self.nodes[id].ctx {
                        Ctx::Power {
                            iterates,
                            norms,
                            lambda,
                        } => (iterates, norms, *lambda),
                        _ => unreachable!(),
                    };
                    let s = self.value(*a);
                    let n = s.shape()[0];
                    let sign = if lambda >= T::zero() { T::one() } else { -T::one() };
                    let dlambda = g.data()[0] * sign;
                    let k = norms.len(); // iterations actually run
                    let vk = &iterates[k];
                    let mut ds = Tensor::zeros(&[n, n]);
                    // lambda = v_K^T S v_K
                    for i in 0..n {
                        for j in 0..n {
                            let v = ds.at(&[i, j]) + dlambda * vk[i] * vk[j];
                            ds.set(&[i, j], v);
                        }
                    }
                    let sv = symv(s, vk);
                    let mut dv: Vec<T> = sv
                        .iter()
                        .map(|&x| T::from_f64(2.0) * dlambda * x)
                        .collect();
                    // back through v_{k+1} = S v_k / ||S v_k||
                    for step in (0..k).rev() {
                        let vprev = &iterates[step];
                        let vnext = &iterates[step + 1];
                        let norm = norms[step];
                        // du = (dv - v_next (v_next . dv)) / ||u||
                        let proj = dot(vnext, &dv);
                        let du: Vec<T> = dv
                            .iter()
                            .zip(vnext)
                            .map(|(&d, &vn)| (d - vn * proj) / norm)
                            .collect();
                        // u = S v_prev
                        for i in 0..n {
                            for j in 0..n {
                                let v = ds.at(&[i, j]) + du[i] * vprev[j];
                                ds.set(&[i, j], v);
                            }
                        }
                        dv = symv(s, &du);
                    }
                    accumulate(&mut grads, *a, ds)?;
                }
                Op::AffineSum { terms } => {
                    let gv = g.data()[0];
                    for &(tid, c) in terms {
                        accumulate(&mut grads, tid, Tensor::scalar(gv * c))?;
                    }
                }
            }
        }

        let mut out = GradientSet::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = grads[id].take() {
                    out.insert(id, g);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    id: NodeId,
    g: Tensor<T>,
) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn symv<T: Scalar>(m: &Tensor<T>, v: &[T]) -> Vec<T> {
    let n = v.len();
    (0..n)
        .map(|i| {
            m.data()[i * n..(i + 1) * n]
                .iter()
                .zip(v)
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn l2<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Per-parameter outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_elements: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .fold(0.0, |m, e| m.max(e.max_rel_err))
    }
}

/// Compare tape gradients against central finite differences for a scalar
/// function of the given parameters. Large tensors are subsampled (at least
/// `min_sample` elements, seeded). The relative error denominator is
/// max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<T, F>(
    f: F,
    params: &[(String, Tensor<T>)],
    step: T,
    tol: f64,
    min_sample: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    let build = |values: &[Tensor<T>]| -> Result<(Tape<T>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };

    let values: Vec<Tensor<T>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (tape, ids, loss) = build(&values)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let zero = Tensor::zeros(tensor.shape());
        let analytic = grads.get(&ids[pi]).unwrap_or(&zero);
        let n = tensor.len();
        let indices: Vec<usize> = if n <= min_sample {
            (0..n).collect()
        } else {
            (0..min_sample).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut max_rel = 0.0f64;
        for &i in &indices {
            let mut plus = values.clone();
            plus[pi].data_mut()[i] += step;
            let (tp, _, lp) = build(&plus)?;
            let mut minus = values.clone();
            minus[pi].data_mut()[i] -= step;
            let (tm, _, lm) = build(&minus)?;
            let numeric =
                (tp.scalar_value(lp) - tm.scalar_value(lm)).to_f64s() / (2.0 * step.to_f64s());
            let a = analytic.data()[i].to_f64s();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: max_rel,
            checked_elements: indices.len(),
            passed: max_rel <= tol,
        });
    }
    Ok(GradCheckReport { entries, tol })
}

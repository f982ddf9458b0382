//! Dense row-major tensor substrate and the numeric kernels built on it.
//!
//! Axis conventions follow the layer math throughout the crate: convolution
//! weights are `(C_in, C_out, K, K)`, activations `(C, H, W)` with a batch
//! axis prepended as `(N, C, H, W)` for batched kernels.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enable or disable data-parallel kernels. Parallel kernels split work over
/// disjoint output slices, so results are bit-identical to the sequential
/// path; the default is sequential.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Dense N-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("invalid extents {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &e) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < e);
            off = off * e + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(-T::one()))
    }

    pub fn frob_norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    /// Lossless when widening (f32 -> f64); rounds when narrowing.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64s())).collect(),
        }
    }
}

/// Geometry of one convolution: channel counts, kernel size, stride, padding
/// and the spatial extents they imply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        h_in: usize,
        w_in: usize,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || k == 0 || stride == 0 || h_in == 0 || w_in == 0 {
            return Err(Error::Config(
                "conv geometry extents must be positive".into(),
            ));
        }
        let h_num = h_in + 2 * padding;
        let w_num = w_in + 2 * padding;
        if h_num < k || w_num < k {
            return Err(Error::Config(format!(
                "kernel {k} exceeds padded input {h_num}x{w_num}"
            )));
        }
        Ok(Self {
            c_in,
            c_out,
            k,
            stride,
            padding,
            h_in,
            w_in,
            h_out: (h_num - k) / stride + 1,
            w_out: (w_num - k) / stride + 1,
        })
    }
}

/// Direct convolution of a single `(C_in, H, W)` image with a
/// `(C_in, C_out, K, K)` kernel; zero padding.
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let batched = x.reshape(vec![1, x.shape()[0], x.shape()[1], x.shape()[2]])?;
    check_conv_shapes(&batched, w, geom)?;
    let y = conv2d_batched(&batched, w, geom);
    y.reshape(vec![geom.c_out, geom.h_out, geom.w_out])
}

pub fn check_conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<()> {
    if x.ndim() != 4 {
        return Err(Error::Shape(format!(
            "conv input must be 4-D (N,C,H,W), got {:?}",
            x.shape()
        )));
    }
    if w.shape() != [geom.c_in, geom.c_out, geom.k, geom.k] {
        return Err(Error::Shape(format!(
            "conv weight axis mismatch: expected (C_in,C_out,K,K)=({},{},{},{}), got {:?}",
            geom.c_in,
            geom.c_out,
            geom.k,
            geom.k,
            w.shape()
        )));
    }
    if x.shape()[1] != geom.c_in {
        return Err(Error::Shape(format!(
            "conv input channel axis is {}, geometry says C_in={}",
            x.shape()[1],
            geom.c_in
        )));
    }
    if x.shape()[2] != geom.h_in || x.shape()[3] != geom.w_in {
        return Err(Error::Shape(format!(
            "conv spatial axes ({},{}) differ from geometry ({},{})",
            x.shape()[2],
            x.shape()[3],
            geom.h_in,
            geom.w_in
        )));
    }
    Ok(())
}

/// Batched convolution, `(N, C_in, H, W) -> (N, C_out, H', W')`.
/// Reduction order is fixed (p, then i, then j, sequential) so results are
/// bitwise reproducible; the parallel path splits over disjoint (n, q) output
/// slices and keeps the same per-slice order.
pub fn conv2d_batched<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: &ConvGeometry) -> Tensor<T> {
    let n = x.shape()[0];
    let g = *geom;
    let mut y = Tensor::zeros(&[n, g.c_out, g.h_out, g.w_out]);
    let plane = g.h_out * g.w_out;
    let xs = x.data();
    let ws = w.data();

    let work = |nq: usize, out: &mut [T]| {
        let (ni, q) = (nq / g.c_out, nq % g.c_out);
        let xoff = ni * g.c_in * g.h_in * g.w_in;
        for ho in 0..g.h_out {
            for wo in 0..g.w_out {
                let mut acc = T::zero();
                for p in 0..g.c_in {
                    let wbase = ((p * g.c_out + q) * g.k) * g.k;
                    let xbase = xoff + p * g.h_in * g.w_in;
                    for i in 0..g.k {
                        let r = (g.stride * ho + i) as isize - g.padding as isize;
                        if r < 0 || r as usize >= g.h_in {
                            continue;
                        }
                        let xrow = xbase + r as usize * g.w_in;
                        let wrow = wbase + i * g.k;
                        for j in 0..g.k {
                            let c = (g.stride * wo + j) as isize - g.padding as isize;
                            if c < 0 || c as usize >= g.w_in {
                                continue;
                            }
                            acc += ws[wrow + j] * xs[xrow + c as usize];
                        }
                    }
                }
                out[ho * g.w_out + wo] = acc;
            }
        }
    };

    if parallel_enabled() {
        y.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(nq, out)| work(nq, out));
    } else {
        for (nq, out) in y.data_mut().chunks_mut(plane).enumerate() {
            work(nq, out);
        }
    }
    y
}

/// Gradient of `conv2d_batched` w.r.t. the input.
pub fn conv2d_backward_input<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeometry,
    n: usize,
) -> Tensor<T> {
    let g = *geom;
    let mut dx = Tensor::zeros(&[n, g.c_in, g.h_in, g.w_in]);
    let plane = g.h_in * g.w_in;
    let dys = dy.data();
    let ws = w.data();

    let work = |np: usize, out: &mut [T]| {
        let (ni, p) = (np / g.c_in, np % g.c_in);
        let dyoff = ni * g.c_out * g.h_out * g.w_out;
        for q in 0..g.c_out {
            let wbase = ((p * g.c_out + q) * g.k) * g.k;
            let dybase = dyoff + q * g.h_out * g.w_out;
            for ho in 0..g.h_out {
                for wo in 0..g.w_out {
                    let gout = dys[dybase + ho * g.w_out + wo];
                    for i in 0..g.k {
                        let r = (g.stride * ho + i) as isize - g.padding as isize;
                        if r < 0 || r as usize >= g.h_in {
                            continue;
                        }
                        for j in 0..g.k {
                            let c = (g.stride * wo + j) as isize - g.padding as isize;
                            if c < 0 || c as usize >= g.w_in {
                                continue;
                            }
                            out[r as usize * g.w_in + c as usize] += ws[wbase + i * g.k + j] * gout;
                        }
                    }
                }
            }
        }
    };

    if parallel_enabled() {
        dx.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(np, out)| work(np, out));
    } else {
        for (np, out) in dx.data_mut().chunks_mut(plane).enumerate() {
            work(np, out);
        }
    }
    dx
}

/// Gradient of `conv2d_batched` w.r.t. the weight.
pub fn conv2d_backward_weight<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    geom: &ConvGeometry,
) -> Tensor<T> {
    let g = *geom;
    let n = x.shape()[0];
    let mut dw = Tensor::zeros(&[g.c_in, g.c_out, g.k, g.k]);
    let dys = dy.data();
    let xs = x.data();

    let work = |pq: usize, out: &mut [T]| {
        let (p, q) = (pq / g.c_out, pq % g.c_out);
        for ni in 0..n {
            let xbase = (ni * g.c_in + p) * g.h_in * g.w_in;
            let dybase = (ni * g.c_out + q) * g.h_out * g.w_out;
            for ho in 0..g.h_out {
                for wo in 0..g.w_out {
                    let gout = dys[dybase + ho * g.w_out + wo];
                    for i in 0..g.k {
                        let r = (g.stride * ho + i) as isize - g.padding as isize;
                        if r < 0 || r as usize >= g.h_in {
                            continue;
                        }
                        for j in 0..g.k {
                            let c = (g.stride * wo + j) as isize - g.padding as isize;
                            if c < 0 || c as usize >= g.w_in {
                                continue;
                            }
                            out[i * g.k + j] += xs[xbase + r as usize * g.w_in + c as usize] * gout;
                        }
                    }
                }
            }
        }
    };

    let kk = g.k * g.k;
    if parallel_enabled() {
        dw.data_mut()
            .par_chunks_mut(kk)
            .enumerate()
            .for_each(|(pq, out)| work(pq, out));
    } else {
        for (pq, out) in dw.data_mut().chunks_mut(kk).enumerate() {
            work(pq, out);
        }
    }
    dw
}

/// Flatten a `(C_in, C_out, K, K)` kernel into the `(C_out, C_in*K*K)` filter
/// matrix; row q is the row-major flattening of `w[:, q, :, :]`.
pub fn matricize_kernel<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.ndim() != 4 {
        return Err(Error::Shape(format!(
            "matricize expects a 4-D kernel, got {:?}",
            w.shape()
        )));
    }
    let (ci, co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let mut m = Tensor::zeros(&[co, ci * kh * kw]);
    for p in 0..ci {
        for q in 0..co {
            for i in 0..kh {
                for j in 0..kw {
                    let v = w.at(&[p, q, i, j]);
                    m.set(&[q, (p * kh + i) * kw + j], v);
                }
            }
        }
    }
    Ok(m)
}

/// Inverse of [`matricize_kernel`].
pub fn dematricize_kernel<T: Scalar>(
    m: &Tensor<T>,
    c_in: usize,
    k: usize,
) -> Result<Tensor<T>> {
    if m.ndim() != 2 || m.shape()[1] != c_in * k * k {
        return Err(Error::Shape(format!(
            "dematricize: matrix {:?} does not match C_in={c_in}, K={k}",
            m.shape()
        )));
    }
    let co = m.shape()[0];
    let mut w = Tensor::zeros(&[c_in, co, k, k]);
    for p in 0..c_in {
        for q in 0..co {
            for i in 0..k {
                for j in 0..k {
                    w.set(&[p, q, i, j], m.at(&[q, (p * k + i) * k + j]));
                }
            }
        }
    }
    Ok(w)
}

/// Mean squared difference of two same-shaped tensors.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mse: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut acc = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / T::from_usize(a.len()))
}

/// Xavier-uniform initialization on [-a, a], a = sqrt(6 / (fan_in + fan_out)).
/// Deterministic for a fixed seed.
pub fn xavier_uniform_init<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Config("xavier fan must be positive".into()));
    }
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-a, a);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
    Tensor::new(shape.to_vec(), data)
}

/// `a (m,k) * b (k,n) -> (m,n)`, plain triple loop.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Shape(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for l in 0..k {
            let av = a.data()[i * k + l];
            let row = &b.data()[l * n..(l + 1) * n];
            let out = &mut c.data_mut()[i * n..(i + 1) * n];
            for (o, &bv) in out.iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    Ok(c)
}

/// Transpose of a 2-D tensor.
pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 {
        return Err(Error::Shape(format!("transpose expects 2-D, got {:?}", a.shape())));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut t = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            t.set(&[j, i], a.at(&[i, j]));
        }
    }
    Ok(t)
}

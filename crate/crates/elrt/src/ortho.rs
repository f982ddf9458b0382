//! Orthogonality regularizers on factor matrices and the spectral-norm
//! machinery the SRIP variant needs.
//!
//! All four penalties vanish on square orthogonal matrices. SO and DSO carry
//! the 1/Phi^2 normalization; MC and SRIP do not.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, transpose, Tensor};

/// Which penalty to apply to the factor matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    So,
    Dso,
    Mc,
    Srip,
    None,
}

impl std::str::FromStr for RegKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "so" => Ok(RegKind::So),
            "dso" => Ok(RegKind::Dso),
            "mc" => Ok(RegKind::Mc),
            "srip" => Ok(RegKind::Srip),
            "none" => Ok(RegKind::None),
            other => Err(Error::Parse(format!("unknown regularizer '{other}'"))),
        }
    }
}

impl std::fmt::Display for RegKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RegKind::So => "so",
            RegKind::Dso => "dso",
            RegKind::Mc => "mc",
            RegKind::Srip => "srip",
            RegKind::None => "none",
        };
        f.write_str(s)
    }
}

/// Regularizer configuration: kind, strength rho, and power-iteration knobs
/// used only by SRIP.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegConfig {
    pub kind: RegKind,
    pub rho: f64,
    pub power_iters: usize,
    pub power_tol: f64,
}

impl RegConfig {
    pub fn new(kind: RegKind) -> Self {
        Self {
            kind,
            rho: 1.0,
            power_iters: 20,
            power_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho < 0.0 {
            return Err(Error::Config("rho must be non-negative".into()));
        }
        if self.power_iters == 0 {
            return Err(Error::Config("power_iters must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig::new(RegKind::Dso)
    }
}

/// Gram residual a^T a - I_n of a 2-D matrix.
pub fn residual<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 {
        return Err(Error::Shape(format!(
            "residual expects 2-D, got {:?}",
            a.shape()
        )));
    }
    let at = transpose(a)?;
    let mut g = matmul(&at, a)?;
    let n = a.shape()[1];
    for i in 0..n {
        let v = g.at(&[i, i]) - T::one();
        g.set(&[i, i], v);
    }
    Ok(g)
}

/// Left Gram residual a a^T - I_phi.
pub fn residual_left<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    transpose(a).and_then(|at| residual(&at))
}

/// Soft orthogonality: (rho / Phi^2) * ||a^T a - I||_F^2, Phi = row count.
pub fn so<T: Scalar>(a: &Tensor<T>, rho: T) -> Result<T> {
    let phi = T::from_usize(a.shape()[0]);
    Ok(rho / (phi * phi) * residual(a)?.frob_norm_sq())
}

/// Double soft orthogonality: adds the a a^T - I term so over- and
/// under-complete matrices are both pulled toward orthonormality.
pub fn dso<T: Scalar>(a: &Tensor<T>, rho: T) -> Result<T> {
    let phi = T::from_usize(a.shape()[0]);
    let right = residual(a)?.frob_norm_sq();
    let left = residual_left(a)?.frob_norm_sq();
    Ok(rho / (phi * phi) * (right + left))
}

/// Mutual coherence: rho * max row-absolute-sum of a^T a - I (the
/// infinity-induced operator norm). Unnormalized.
pub fn mc<T: Scalar>(a: &Tensor<T>, rho: T) -> Result<T> {
    let r = residual(a)?;
    Ok(rho * inf_operator_norm(&r))
}

/// Max absolute row sum of a square matrix.
pub fn inf_operator_norm<T: Scalar>(m: &Tensor<T>) -> T {
    let n = m.shape()[1];
    let mut best = T::zero();
    for row in m.data().chunks(n) {
        let s: T = row.iter().map(|v| v.abs()).sum();
        if s > best {
            best = s;
        }
    }
    best
}

/// Row index attaining the infinity norm; ties broken by the first index.
pub fn inf_norm_arg_row<T: Scalar>(m: &Tensor<T>) -> usize {
    let n = m.shape()[1];
    let mut best = T::zero();
    let mut arg = 0;
    for (i, row) in m.data().chunks(n).enumerate() {
        let s: T = row.iter().map(|v| v.abs()).sum();
        if s > best {
            best = s;
            arg = i;
        }
    }
    arg
}

/// Largest absolute eigenvalue of a symmetric matrix by power iteration from
/// a seeded start vector. Stops after `iters` steps or when successive
/// Rayleigh quotients differ by at most `tol`.
pub fn spectral_norm_power<T: Scalar>(
    s: &Tensor<T>,
    iters: usize,
    tol: T,
    seed: u64,
) -> Result<T> {
    let (lambda, _) = power_iteration(s, iters, tol, seed)?;
    Ok(lambda.abs())
}

/// Power iteration on a symmetric matrix; returns the signed dominant
/// Rayleigh quotient and the final unit iterate.
pub fn power_iteration<T: Scalar>(
    s: &Tensor<T>,
    iters: usize,
    tol: T,
    seed: u64,
) -> Result<(T, Vec<T>)> {
    if s.ndim() != 2 || s.shape()[0] != s.shape()[1] {
        return Err(Error::Shape(format!(
            "power iteration expects square matrix, got {:?}",
            s.shape()
        )));
    }
    let n = s.shape()[0];
    if n == 0 {
        return Err(Error::Shape("empty matrix".into()));
    }
    let start: Tensor<T> = crate::tensor::xavier_uniform_init(&[n], 1, 1, seed)?;
    let mut v = start.into_data();
    normalize(&mut v);
    let mut lambda = T::zero();
    for _ in 0..iters {
        let u = symv(s, &v);
        let norm = l2(&u);
        if norm == T::zero() {
            // matrix annihilates the iterate; dominant eigenvalue is 0
            return Ok((T::zero(), v));
        }
        let next: Vec<T> = u.iter().map(|&x| x / norm).collect();
        let new_lambda = dot(&next, &symv(s, &next));
        let done = (new_lambda - lambda).abs() <= tol;
        v = next;
        lambda = new_lambda;
        if done {
            break;
        }
    }
    Ok((lambda, v))
}

/// Spectral restricted isometry penalty: rho * sigma(a^T a - I). Unnormalized.
pub fn srip<T: Scalar>(a: &Tensor<T>, rho: T, power_iters: usize, tol: T) -> Result<T> {
    let r = residual(a)?;
    Ok(rho * spectral_norm_power(&r, power_iters, tol, SRIP_POWER_SEED)?)
}

/// Fixed start-vector seed so SRIP values are reproducible.
pub const SRIP_POWER_SEED: u64 = 0x5249_5053;

fn symv<T: Scalar>(m: &Tensor<T>, v: &[T]) -> Vec<T> {
    let n = v.len();
    let mut out = vec![T::zero(); n];
    for i in 0..n {
        let row = &m.data()[i * n..(i + 1) * n];
        out[i] = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
    }
    out
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn l2<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

fn normalize<T: Scalar>(v: &mut [T]) {
    let n = l2(v);
    if n > T::zero() {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

//! Kernel-approximation study: truncated SVD of the matricized kernel versus
//! Tucker-2 decomposition at matched parameter budgets, plus the dense
//! eigen/SVD oracles the rest of the test suite leans on.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matricize_kernel, mse, transpose, Tensor};
use crate::tucker::Tucker2Conv;
use crate::ConvGeometry;

/// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations.
pub fn jacobi_eigenvalues<T: Scalar>(s: &Tensor<T>) -> Result<Vec<T>> {
    Ok(jacobi_eigen(s)?.0)
}

/// Full symmetric eigendecomposition by cyclic Jacobi rotations; returns
/// eigenvalues (descending) and the matching eigenvectors as matrix columns.
pub fn jacobi_eigen<T: Scalar>(s: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
    if s.ndim() != 2 || s.shape()[0] != s.shape()[1] {
        return Err(Error::Shape(format!(
            "jacobi expects square matrix, got {:?}",
            s.shape()
        )));
    }
    let n = s.shape()[0];
    let mut a = s.clone();
    let mut v = Tensor::zeros(&[n, n]);
    for i in 0..n {
        v.set(&[i, i], T::one());
    }
    let eps = T::epsilon() * T::from_f64(100.0) * (a.frob_norm_sq().sqrt() + T::one());
    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.at(&[p, q]).abs();
            }
        }
        if off < eps {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.at(&[p, q]);
                if apq.abs() < eps * T::from_f64(1e-3) {
                    continue;
                }
                let app = a.at(&[p, p]);
                let aqq = a.at(&[q, q]);
                let theta = (aqq - app) / (T::from_f64(2.0) * apq);
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let sn = t * c;
                // rotate rows/columns p and q
                for k in 0..n {
                    let akp = a.at(&[k, p]);
                    let akq = a.at(&[k, q]);
                    a.set(&[k, p], c * akp - sn * akq);
                    a.set(&[k, q], sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at(&[p, k]);
                    let aqk = a.at(&[q, k]);
                    a.set(&[p, k], c * apk - sn * aqk);
                    a.set(&[q, k], sn * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.at(&[k, p]);
                    let vkq = v.at(&[k, q]);
                    v.set(&[k, p], c * vkp - sn * vkq);
                    v.set(&[k, q], sn * vkp + c * vkq);
                }
            }
        }
    }
    let mut pairs: Vec<(T, usize)> = (0..n).map(|i| (a.at(&[i, i]), i)).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let eigs: Vec<T> = pairs.iter().map(|&(e, _)| e).collect();
    let mut vecs = Tensor::zeros(&[n, n]);
    for (col, &(_, src)) in pairs.iter().enumerate() {
        for k in 0..n {
            vecs.set(&[k, col], v.at(&[k, src]));
        }
    }
    Ok((eigs, vecs))
}

/// Singular values of a 2-D matrix (descending), via the Gram eigenproblem.
pub fn singular_values<T: Scalar>(m: &Tensor<T>) -> Result<Vec<T>> {
    let (a, b) = (m.shape()[0], m.shape()[1]);
    let gram = if b <= a {
        matmul(&transpose(m)?, m)?
    } else {
        matmul(m, &transpose(m)?)?
    };
    let eigs = jacobi_eigenvalues(&gram)?;
    Ok(eigs
        .into_iter()
        .map(|e| if e > T::zero() { e.sqrt() } else { T::zero() })
        .collect())
}

/// Best rank-r approximation of `m` in Frobenius norm: project onto the top-r
/// singular subspace of the smaller Gram matrix.
pub fn truncated_svd_approx<T: Scalar>(m: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if m.ndim() != 2 {
        return Err(Error::Shape(format!("expected matrix, got {:?}", m.shape())));
    }
    let (a, b) = (m.shape()[0], m.shape()[1]);
    if r == 0 || r > a.min(b) {
        return Err(Error::Config(format!(
            "rank {r} outside [1, {}]",
            a.min(b)
        )));
    }
    if b <= a {
        // right singular vectors: m V_r V_r^T
        let gram = matmul(&transpose(m)?, m)?;
        let (_, vecs) = jacobi_eigen(&gram)?;
        let vr = take_columns(&vecs, r);
        let proj = matmul(&vr, &transpose(&vr)?)?;
        matmul(m, &proj)
    } else {
        // left singular vectors: U_r U_r^T m
        let gram = matmul(m, &transpose(m)?)?;
        let (_, vecs) = jacobi_eigen(&gram)?;
        let ur = take_columns(&vecs, r);
        let proj = matmul(&ur, &transpose(&ur)?)?;
        matmul(&proj, m)
    }
}

fn take_columns<T: Scalar>(m: &Tensor<T>, r: usize) -> Tensor<T> {
    let (rows, _cols) = (m.shape()[0], m.shape()[1]);
    let mut out = Tensor::zeros(&[rows, r]);
    for i in 0..rows {
        for j in 0..r {
            out.set(&[i, j], m.at(&[i, j]));
        }
    }
    out
}

/// Mode-1 unfolding of a `(C_in, C_out, K, K)` kernel: `(C_in, C_out*K*K)`.
fn unfold_mode1<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let s = w.shape();
    w.reshape(vec![s[0], s[1] * s[2] * s[3]]).expect("mode-1 unfold")
}

/// Contract the C_out axis with `u2` (Phi2 x C_out): result (C_in, Phi2, K, K).
fn contract_mode2<T: Scalar>(w: &Tensor<T>, u2: &Tensor<T>) -> Tensor<T> {
    let (ci, co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let phi2 = u2.shape()[0];
    let mut out = Tensor::zeros(&[ci, phi2, kh, kw]);
    for p in 0..ci {
        for r2 in 0..phi2 {
            for q in 0..co {
                let u = u2.at(&[r2, q]);
                if u == T::zero() {
                    continue;
                }
                for i in 0..kh {
                    for j in 0..kw {
                        let v = out.at(&[p, r2, i, j]) + u * w.at(&[p, q, i, j]);
                        out.set(&[p, r2, i, j], v);
                    }
                }
            }
        }
    }
    out
}

/// Contract the C_in axis with `u1` (Phi1 x C_in): result (Phi1, C_out, K, K).
fn contract_mode1<T: Scalar>(w: &Tensor<T>, u1: &Tensor<T>) -> Tensor<T> {
    let (ci, co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let phi1 = u1.shape()[0];
    let mut out = Tensor::zeros(&[phi1, co, kh, kw]);
    for r1 in 0..phi1 {
        for p in 0..ci {
            let u = u1.at(&[r1, p]);
            if u == T::zero() {
                continue;
            }
            for q in 0..co {
                for i in 0..kh {
                    for j in 0..kw {
                        let v = out.at(&[r1, q, i, j]) + u * w.at(&[p, q, i, j]);
                        out.set(&[r1, q, i, j], v);
                    }
                }
            }
        }
    }
    out
}

/// Top-`rank` left singular vectors of `m`, returned as rows (rank x rows(m)).
fn leading_left_factor<T: Scalar>(m: &Tensor<T>, rank: usize) -> Result<Tensor<T>> {
    let gram = matmul(m, &transpose(m)?)?;
    let (_, vecs) = jacobi_eigen(&gram)?;
    let cols = take_columns(&vecs, rank);
    transpose(&cols)
}

/// Tucker-2 decomposition of a dense kernel by higher-order orthogonal
/// iteration over the two channel modes. Factors come back with orthonormal
/// rows; the core is the projection of `w` onto them. The fit
/// (||core|| / ||w||) is non-decreasing across iterations.
pub fn hooi_tucker2<T: Scalar>(
    w: &Tensor<T>,
    phi1: usize,
    phi2: usize,
    max_iters: usize,
    tol: T,
) -> Result<Tucker2Conv<T>> {
    hooi_tucker2_traced(w, phi1, phi2, max_iters, tol).map(|(layer, _)| layer)
}

/// Same as [`hooi_tucker2`] but also returns the per-iteration fit trace.
pub fn hooi_tucker2_traced<T: Scalar>(
    w: &Tensor<T>,
    phi1: usize,
    phi2: usize,
    max_iters: usize,
    tol: T,
) -> Result<(Tucker2Conv<T>, Vec<T>)> {
    if w.ndim() != 4 {
        return Err(Error::Shape(format!("expected 4-D kernel, got {:?}", w.shape())));
    }
    let (ci, co, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if w.shape()[3] != k {
        return Err(Error::Shape("kernel must be square in its spatial axes".into()));
    }
    if phi1 == 0 || phi1 > ci || phi2 == 0 || phi2 > co {
        return Err(Error::Config(format!(
            "HOOI ranks ({phi1},{phi2}) outside [1,{ci}] x [1,{co}]"
        )));
    }
    // HOSVD initialization from the raw unfoldings.
    let mut u1 = leading_left_factor(&unfold_mode1(w), phi1)?;
    let mut u2 = leading_left_factor(&matricize_kernel(w)?, phi2)?;

    let norm_sq = w.frob_norm_sq();
    let mut trace = Vec::new();
    let mut prev_fit = T::neg_infinity();
    for _ in 0..max_iters {
        // mode-1 update against the current U2
        let y = contract_mode2(w, &u2);
        u1 = leading_left_factor(&unfold_mode1(&y), phi1)?;
        // mode-2 update against the new U1
        let z = contract_mode1(w, &u1);
        // mode-2 unfolding of z is its matricization with channel axes swapped
        u2 = leading_left_factor(&matricize_kernel(&z)?, phi2)?;

        let core = contract_mode2(&contract_mode1(w, &u1), &u2);
        let fit = (core.frob_norm_sq() / norm_sq).sqrt();
        trace.push(fit);
        if fit - prev_fit < tol {
            break;
        }
        prev_fit = fit;
    }
    let core = contract_mode2(&contract_mode1(w, &u1), &u2);
    let geom = ConvGeometry::new(ci, co, k, 1, 0, k, k)?;
    let layer = Tucker2Conv::from_parts(u1, core, u2, geom, "hooi")?;
    Ok((layer, trace))
}

/// Maximal feasible ranks under a shared parameter budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetMatch {
    pub param_budget: usize,
    pub matrix_rank: usize,
    pub tucker_ranks: (usize, usize),
}

/// Pick the largest matrix rank and the best Tucker rank pair under `budget`.
/// Tucker rule: maximize the core capacity Phi1*Phi2 (the fraction of signal
/// a random-core kernel retains scales with the rank product, so a sum-based
/// rule would favor degenerate pairs like (1, C_out)); ties broken by the
/// more balanced pair, then the smaller Phi1.
pub fn match_budget(
    c_in: usize,
    c_out: usize,
    k: usize,
    budget: usize,
) -> Result<BudgetMatch> {
    let col = c_in * k * k;
    let per_rank = c_out + col;
    let max_r = c_out.min(col);
    let matrix_rank = (budget / per_rank).min(max_r);
    if matrix_rank == 0 {
        return Err(Error::Config(format!(
            "budget {budget} below one matrix rank ({per_rank})"
        )));
    }
    let mut best: Option<(usize, usize)> = None;
    for phi1 in 1..=c_in {
        for phi2 in 1..=c_out {
            let params = phi1 * c_in + phi1 * phi2 * k * k + phi2 * c_out;
            if params > budget {
                continue;
            }
            let better = match best {
                None => true,
                Some((b1, b2)) => {
                    let (p_new, p_old) = (phi1 * phi2, b1 * b2);
                    if p_new != p_old {
                        p_new > p_old
                    } else {
                        let bal = |p1: usize, p2: usize| {
                            (p1 as f64 / c_in as f64 - p2 as f64 / c_out as f64).abs()
                        };
                        let (i_new, i_old) = (bal(phi1, phi2), bal(b1, b2));
                        if i_new != i_old {
                            i_new < i_old
                        } else {
                            phi1 < b1
                        }
                    }
                }
            };
            if better {
                best = Some((phi1, phi2));
            }
        }
    }
    let tucker_ranks = best.ok_or_else(|| {
        Error::Config(format!("budget {budget} below the minimal Tucker pair"))
    })?;
    Ok(BudgetMatch {
        param_budget: budget,
        matrix_rank,
        tucker_ranks,
    })
}

/// One row of the approximation study.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub budget: usize,
    pub matrix_rank: usize,
    pub tucker_r1: usize,
    pub tucker_r2: usize,
    pub matrix_mse: f64,
    pub tucker_mse: f64,
}

#[derive(Debug, Clone)]
pub enum StudyEntry {
    Row(StudyRow),
    Skipped { budget: usize, reason: String },
}

/// HOOI defaults for the study.
pub const HOOI_MAX_ITERS: usize = 50;

/// Approximate `w` by both routes at each budget and report the MSE of each
/// reconstruction against the original kernel.
pub fn approx_error_study<T: Scalar>(w: &Tensor<T>, budgets: &[usize]) -> Result<Vec<StudyEntry>> {
    if budgets.is_empty() {
        return Err(Error::Config("no budgets given".into()));
    }
    if w.ndim() != 4 {
        return Err(Error::Shape(format!("expected 4-D kernel, got {:?}", w.shape())));
    }
    let (ci, co, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let m = matricize_kernel(w)?;
    let mut out = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let bm = match match_budget(ci, co, k, budget) {
            Ok(bm) => bm,
            Err(e) => {
                out.push(StudyEntry::Skipped {
                    budget,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let m_approx = truncated_svd_approx(&m, bm.matrix_rank)?;
        let matrix_mse = mse(&m, &m_approx)?.to_f64s();
        let (phi1, phi2) = bm.tucker_ranks;
        let layer = hooi_tucker2(w, phi1, phi2, HOOI_MAX_ITERS, T::from_f64(1e-8))?;
        let tucker_mse = mse(w, &layer.reconstruct_kernel())?.to_f64s();
        out.push(StudyEntry::Row(StudyRow {
            budget,
            matrix_rank: bm.matrix_rank,
            tucker_r1: phi1,
            tucker_r2: phi2,
            matrix_mse,
            tucker_mse,
        }));
    }
    Ok(out)
}

/// Serialize study entries as CSV (skipped budgets become comment lines).
pub fn study_to_csv(entries: &[StudyEntry]) -> String {
    let mut s = String::from("budget,matrix_rank,tucker_r1,tucker_r2,matrix_mse,tucker_mse\n");
    for e in entries {
        match e {
            StudyEntry::Row(r) => s.push_str(&format!(
                "{},{},{},{},{:.10e},{:.10e}\n",
                r.budget, r.matrix_rank, r.tucker_r1, r.tucker_r2, r.matrix_mse, r.tucker_mse
            )),
            StudyEntry::Skipped { budget, reason } => {
                s.push_str(&format!("# budget {budget} skipped: {reason}\n"))
            }
        }
    }
    s
}

//! Numeric checks of the convexity and recovery-precision results.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attack::objectives::numerical_rank;
use crate::attack::{step1_objective, step2_objective};
use crate::error::{LabError, Result};
use crate::tensor::Tensor;
use crate::vfl::{enumerate_masks, BatchMask, DEFAULT_ENUMERATION_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    H11,
    G11,
}

/// A symmetric `N x N` Hessian block.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlock {
    pub matrix: DMatrix<f64>,
    pub kind: BlockKind,
    pub n: usize,
    pub k: usize,
}

impl HessianBlock {
    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        symmetric_eigenvalues(&self.matrix)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }
}

pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn check_nk(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(LabError::InvalidArgument(format!("need 1 <= K <= N, got N={n}, K={k}")));
    }
    Ok(())
}

/// Per-row Hessian block of the expected Step I objective: `2K/N` on the
/// diagonal, `2K(K-1)/(N(N-1))` elsewhere.
pub fn build_h11(n: usize, k: usize) -> Result<HessianBlock> {
    check_nk(n, k)?;
    let (nf, kf) = (n as f64, k as f64);
    let diag = 2.0 * kf / nf;
    let off = if n > 1 { 2.0 * kf * (kf - 1.0) / (nf * (nf - 1.0)) } else { 0.0 };
    let matrix = DMatrix::from_fn(n, n, |i, j| if i == j { diag } else { off });
    Ok(HessianBlock {
        matrix,
        kind: BlockKind::H11,
        n,
        k,
    })
}

/// Spectrum of `H(1,1)` for `1 < K < N`: analytic and numeric, both ascending.
///
/// `H(1,1) = c * B` with `c = 2K(K-1)/(N(N-1))` and `B` having diagonal
/// `(N-1)/(K-1)` and unit off-diagonal, so `B` has eigenvalue
/// `(N-1)/(K-1) - 1` with multiplicity `N-1` and `(N-1)/(K-1) + N - 1` once.
pub fn h11_eigvals(n: usize, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(1 < k && k < n) {
        return Err(LabError::InvalidArgument(format!(
            "closed-form spectrum needs 1 < K < N, got N={n}, K={k}"
        )));
    }
    let (nf, kf) = (n as f64, k as f64);
    let scale = 2.0 * kf * (kf - 1.0) / (nf * (nf - 1.0));
    let r = (nf - 1.0) / (kf - 1.0);
    let mut analytic = vec![scale * (r - 1.0); n - 1];
    analytic.push(scale * (r + nf - 1.0));
    let numeric = build_h11(n, k)?.eigenvalues();
    Ok((analytic, numeric))
}

/// `G(1,1) = H(1,1) ⊙ V V^T` and whether it is guaranteed positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct G11 {
    pub block: HessianBlock,
    /// `N < d2` and `rank(V) = N`.
    pub positive_definite: bool,
}

pub fn build_g11(v: &Tensor, k: usize) -> Result<G11> {
    if v.shape().len() != 2 {
        return Err(LabError::dimension("V", "a matrix", format!("{:?}", v.shape())));
    }
    let (n, d2) = (v.rows(), v.row_len());
    let h = build_h11(n, k)?;
    let vm = DMatrix::from_row_slice(n, d2, v.data());
    let r = &vm * vm.transpose();
    let matrix = h.matrix.component_mul(&r);
    let positive_definite = n < d2 && numerical_rank(v, 1e-10) == n;
    Ok(G11 {
        block: HessianBlock {
            matrix,
            kind: BlockKind::G11,
            n,
            k,
        },
        positive_definite,
    })
}

/// Constants of the recovery-precision bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    /// `||H^T V*||_F^2`.
    pub lambda_theta: f64,
    /// `||pinv(V)||_F^2` of the recovered `V`.
    pub lambda_v: f64,
    /// `||pinv(V*)||_F^2`.
    pub lambda_star: f64,
    pub phi1: f64,
    pub phi2: f64,
}

/// `2 (N/K) (lambda_theta lambda_v lambda_star phi1 + lambda_v phi2)`.
pub fn recovery_bound(b: &BoundInputs, n: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(LabError::InvalidArgument("K must be at least 1".into()));
    }
    for (name, x) in [
        ("lambda_theta", b.lambda_theta),
        ("lambda_v", b.lambda_v),
        ("lambda_star", b.lambda_star),
        ("phi1", b.phi1),
        ("phi2", b.phi2),
    ] {
        if !(x >= 0.0) {
            return Err(LabError::InvalidArgument(format!("{name} must be non-negative, got {x}")));
        }
    }
    Ok(2.0 * (n as f64 / k as f64) * (b.lambda_theta * b.lambda_v * b.lambda_star * b.phi1 + b.lambda_v * b.phi2))
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.row_len(), t.data())
}

/// `||pinv(m)||_F^2`.
pub fn pinv_norm_sq(m: &Tensor) -> Result<f64> {
    let p = to_matrix(m)
        .pseudo_inverse(1e-12)
        .map_err(|e| LabError::InvalidArgument(format!("pseudo-inverse failed: {e}")))?;
    Ok(p.norm_squared())
}

/// Per-mask observations `(V*^T s, H^T S V*)` of an instance.
pub fn observations(h: &Tensor, v_star: &Tensor, mask: &BatchMask) -> Result<(Vec<f64>, Tensor)> {
    let (d1, d2) = (h.row_len(), v_star.row_len());
    let mut gb = vec![0.0; d2];
    let mut gw = vec![0.0; d1 * d2];
    for n in mask.indices() {
        let (hn, vn) = (h.row(n), v_star.row(n));
        for (g, v) in gb.iter_mut().zip(vn) {
            *g += v;
        }
        for (i, &hi) in hn.iter().enumerate() {
            for (j, &vj) in vn.iter().enumerate() {
                gw[i * d2 + j] += hi * vj;
            }
        }
    }
    Ok((gb, Tensor::new(vec![d1, d2], gw)?))
}

/// Measured bound constants for recovered `(v_hat, h_hat)` against the truth,
/// with `phi1`, `phi2` the largest per-mask objectives over `masks`.
pub fn measure_bound_inputs(
    v_hat: &Tensor,
    h_hat: &Tensor,
    v_star: &Tensor,
    h: &Tensor,
    masks: &[BatchMask],
) -> Result<BoundInputs> {
    let mut phi1: f64 = 0.0;
    let mut phi2: f64 = 0.0;
    for m in masks {
        let (gb, gw) = observations(h, v_star, m)?;
        phi1 = phi1.max(step1_objective(v_hat, m, &gb)?);
        phi2 = phi2.max(step2_objective(h_hat, v_hat, m, &gw)?);
    }
    let htv = to_matrix(h).transpose() * to_matrix(v_star);
    Ok(BoundInputs {
        lambda_theta: htv.norm_squared(),
        lambda_v: pinv_norm_sq(v_hat)?,
        lambda_star: pinv_norm_sq(v_star)?,
        phi1,
        phi2,
    })
}

/// Mean of `F1(V; s)` over every mask, with the observed bias gradient of
/// mask `s` taken as `V*^T s`.
pub fn f1_mask_mean(v: &Tensor, v_star: &Tensor, k: usize) -> Result<f64> {
    v.same_shape(v_star, "F1 mask mean")?;
    let n = v.rows();
    let masks = enumerate_masks(n, k, DEFAULT_ENUMERATION_CAP)?;
    let mut total = 0.0;
    for m in &masks {
        let (gb, _) = observations(&Tensor::zeros(vec![n, 1]), v_star, m)?;
        total += step1_objective(v, m, &gb)?;
    }
    Ok(total / masks.len() as f64)
}

/// `|mean_s F1(V; s) - (K/N) ||V - V*||_F^2|`. Zero for `K = 1` or when the
/// rows of `V - V*` sum to zero; not in general.
pub fn f1_identity_residual(v: &Tensor, v_star: &Tensor, k: usize) -> Result<f64> {
    let mean = f1_mask_mean(v, v_star, k)?;
    let expected = k as f64 / v.rows() as f64 * v.sub(v_star)?.norm_sq();
    Ok((mean - expected).abs())
}

/// `|mean_s F1(V; s) - tr(D^T H11 D) / 2|` with `D = V - V*`: the exact
/// expectation, which holds for every `K`.
pub fn f1_quadratic_form_residual(v: &Tensor, v_star: &Tensor, k: usize) -> Result<f64> {
    let mean = f1_mask_mean(v, v_star, k)?;
    let d = to_matrix(&v.sub(v_star)?);
    let h = build_h11(v.rows(), k)?.matrix;
    let exact = 0.5 * (d.transpose() * h * &d).trace();
    Ok((mean - exact).abs())
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// One row of the theory grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryRow {
    pub n: usize,
    pub k: usize,
    pub min_eig_h11: f64,
    pub min_eig_g11: f64,
    /// Bound minus measured `||H_hat - H||_F^2` on a perturbed synthetic
    /// instance; non-negative when the bound holds.
    pub bound_residual: f64,
}

/// Evaluates every `(N, K)` with `2 <= N <= n_max`, `1 <= K <= N`. Each cell
/// draws a Gaussian `V*` of shape `N x (N + 4)`, a Gaussian `H` of width 6,
/// and perturbs both by `perturbation` to stand in for recovered values.
pub fn theory_grid(n_max: usize, perturbation: f64, seed: u64) -> Result<Vec<TheoryRow>> {
    let mut rows = Vec::new();
    for n in 2..=n_max {
        for k in 1..=n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((n as u64) << 32) ^ k as u64);
            let d2 = n + 4;
            let v_star = gaussian(n, d2, 1.0, &mut rng);
            let h = gaussian(n, 6, 1.0, &mut rng);
            let v_hat = v_star.sub(&gaussian(n, d2, perturbation, &mut rng))?;
            let h_hat = h.sub(&gaussian(n, 6, perturbation, &mut rng))?;
            let masks = enumerate_masks(n, k, DEFAULT_ENUMERATION_CAP)?;
            let inputs = measure_bound_inputs(&v_hat, &h_hat, &v_star, &h, &masks)?;
            let bound = recovery_bound(&inputs, n, k)?;
            rows.push(TheoryRow {
                n,
                k,
                min_eig_h11: build_h11(n, k)?.min_eigenvalue(),
                min_eig_g11: build_g11(&v_star, k)?.block.min_eigenvalue(),
                bound_residual: bound - h_hat.sub(&h)?.norm_sq(),
            });
        }
    }
    Ok(rows)
}

pub fn write_theory_csv(path: &Path, rows: &[TheoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["N", "K", "min_eig_h11", "min_eig_g11", "bound_residual"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.k.to_string(),
            format!("{:.12e}", r.min_eig_h11),
            format!("{:.12e}", r.min_eig_g11),
            format!("{:.12e}", r.bound_residual),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    LabError::io(path, std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h11_small_cases() {
        let h = build_h11(4, 2).unwrap();
        assert!((h.matrix[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((h.matrix[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
        let one = build_h11(5, 1).unwrap();
        assert_eq!(one.matrix, DMatrix::identity(5, 5) * 0.4);
        let full = build_h11(3, 3).unwrap();
        assert!(full.matrix.iter().all(|&x| (x - 2.0).abs() < 1e-15));
        assert!(full.min_eigenvalue().abs() < 1e-12);
    }

    #[test]
    fn n5_k2_spectrum() {
        let (a, num) = h11_eigvals(5, 2).unwrap();
        for (x, y) in a.iter().zip([0.6, 0.6, 0.6, 0.6, 1.6]) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.iter().zip(&num) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn g11_orthonormal_rows_and_duplicates() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let g = build_g11(&v, 1).unwrap();
        assert!(g.positive_definite);
        assert_eq!(g.block.matrix[(0, 1)], 0.0);
        assert_eq!(g.block.matrix[(0, 0)], 2.0 / 2.0);
        let dup = Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0]]).unwrap();
        let g = build_g11(&dup, 2).unwrap();
        assert!(!g.positive_definite);
        assert!(g.block.min_eigenvalue().abs() < 1e-12);
        // With K < N the Hadamard product with a positive definite H11 stays
        // positive definite even for duplicated rows.
        let three = Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let g = build_g11(&three, 2).unwrap();
        assert!(!g.positive_definite);
        assert!(g.block.min_eigenvalue() > 1e-3);
    }

    #[test]
    fn bound_limits() {
        let b = BoundInputs {
            lambda_theta: 2.0,
            lambda_v: 3.0,
            lambda_star: 4.0,
            phi1: 0.0,
            phi2: 0.0,
        };
        assert_eq!(recovery_bound(&b, 8, 2).unwrap(), 0.0);
        let b = BoundInputs { phi1: 0.5, phi2: 0.25, ..b };
        assert!((recovery_bound(&b, 8, 2).unwrap() - 8.0 * (12.0 + 0.75)).abs() < 1e-12);
    }

    #[test]
    fn f1_expectation_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v_star = gaussian(5, 3, 1.0, &mut rng);
        let v = gaussian(5, 3, 1.0, &mut rng);
        assert!(f1_identity_residual(&v, &v_star, 1).unwrap() < 1e-10);
        assert!(f1_quadratic_form_residual(&v, &v_star, 2).unwrap() < 1e-10);
        assert!(f1_identity_residual(&v, &v_star, 2).unwrap() > 1e-3);
    }
}

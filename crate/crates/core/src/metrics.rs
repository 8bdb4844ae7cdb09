//! Recovery-quality metrics.

use crate::error::{LabError, Result};
use crate::tensor::Tensor;

/// PSNR reported when the error is exactly zero.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryMetrics {
    pub psnr_db: f64,
    pub mse: f64,
    pub per_image_psnr: Vec<f64>,
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// PSNR over all pixels of `N x F` image stacks, plus per-image values.
pub fn psnr(real: &Tensor, fake: &Tensor, max_val: f64) -> Result<RecoveryMetrics> {
    real.same_shape(fake, "psnr operands")?;
    if !(max_val > 0.0) {
        return Err(LabError::InvalidArgument(format!("psnr peak must be positive, got {max_val}")));
    }
    let total = mse(real.data(), fake.data());
    let per_image_psnr = if real.shape().len() >= 2 {
        (0..real.rows())
            .map(|i| psnr_from_mse(mse(real.row(i), fake.row(i)), max_val))
            .collect()
    } else {
        vec![psnr_from_mse(total, max_val)]
    };
    Ok(RecoveryMetrics {
        psnr_db: psnr_from_mse(total, max_val),
        mse: total,
        per_image_psnr,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationMatch {
    /// `perm[i]` is the fake row assigned to real row `i`.
    pub perm: Vec<usize>,
    pub matched: RecoveryMetrics,
    pub aligned: RecoveryMetrics,
}

/// Greedy nearest-MSE assignment without replacement: repeatedly takes the
/// globally cheapest remaining (real, fake) pair. Not optimal in general.
pub fn match_best_permutation(real: &Tensor, fake: &Tensor, max_val: f64) -> Result<PermutationMatch> {
    real.same_shape(fake, "permutation matching")?;
    let n = real.rows();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            pairs.push((mse(real.row(i), fake.row(j)), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut perm = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (_, i, j) in pairs {
        if perm[i] == usize::MAX && !used[j] {
            perm[i] = j;
            used[j] = true;
        }
    }
    let reordered = fake.select_rows(&perm);
    Ok(PermutationMatch {
        matched: psnr(real, &reordered, max_val)?,
        aligned: psnr(real, fake, max_val)?,
        perm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_hit_the_cap() {
        let a = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = psnr(&a, &a, 1.0).unwrap();
        assert_eq!(m.psnr_db, PSNR_CAP);
        assert_eq!(m.mse, 0.0);
    }

    #[test]
    fn twenty_db_at_mse_one_hundredth() {
        let a = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        let b = Tensor::new(vec![1, 4], vec![0.1; 4]).unwrap();
        let m = psnr(&a, &b, 1.0).unwrap();
        assert!((m.mse - 0.01).abs() < 1e-15);
        assert!((m.psnr_db - 20.0).abs() < 1e-9);
        assert_eq!(m, psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![3, 2]);
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn recovers_a_permutation() {
        let real = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![0.5, 0.2]]).unwrap();
        let fake = real.select_rows(&[2, 0, 1]);
        let m = match_best_permutation(&real, &fake, 1.0).unwrap();
        assert_eq!(m.perm, vec![1, 2, 0]);
        assert_eq!(m.matched.psnr_db, PSNR_CAP);
        let id = match_best_permutation(&real, &real, 1.0).unwrap();
        assert_eq!(id.perm, vec![0, 1, 2]);
    }

    #[test]
    fn greedy_takes_cheapest_pair_first() {
        // Brute force over both pairings: the greedy choice locks in the
        // single cheapest pair (real 0 -> fake 1, mse 0.0) even though the
        // crossed assignment is what remains.
        let real = Tensor::from_rows(&[vec![0.0], vec![0.4]]).unwrap();
        let fake = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let m = match_best_permutation(&real, &fake, 1.0).unwrap();
        assert_eq!(m.perm, vec![1, 0]);
        let straight = (1.0f64 + 0.16) / 2.0;
        let crossed = (0.0f64 + 0.36) / 2.0;
        assert!(crossed < straight);
        assert!((m.matched.mse - crossed).abs() < 1e-15);
    }
}

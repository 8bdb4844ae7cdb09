//! Per-mask objectives of the three recovery steps and their gradients.

use nalgebra::DMatrix;

use crate::attack::AttackWarning;
use crate::dual::softmax;
use crate::error::{LabError, Result};
use crate::model::{gradient_direction_vjp, representation_vjp, soft_pass, GradientReport, ModelParams};
use crate::tensor::Tensor;
use crate::vfl::BatchMask;

fn check_rows(t: &Tensor, mask: &BatchMask, what: &str) -> Result<()> {
    if t.shape().len() != 2 || t.rows() != mask.len() {
        return Err(LabError::dimension(what, format!("[{}, _]", mask.len()), format!("{:?}", t.shape())));
    }
    Ok(())
}

/// `V^T s - g_b1`.
fn step1_residual(v: &Tensor, mask: &BatchMask, grad_b1: &[f64]) -> Result<Vec<f64>> {
    check_rows(v, mask, "V")?;
    if v.row_len() != grad_b1.len() {
        return Err(LabError::dimension("bias gradient", v.row_len(), grad_b1.len()));
    }
    let mut r: Vec<f64> = grad_b1.iter().map(|g| -g).collect();
    for n in mask.indices() {
        for (ri, vi) in r.iter_mut().zip(v.row(n)) {
            *ri += vi;
        }
    }
    Ok(r)
}

/// `F1(V; s) = ||V^T s - grad_b1||^2`.
pub fn step1_objective(v: &Tensor, mask: &BatchMask, grad_b1: &[f64]) -> Result<f64> {
    Ok(step1_residual(v, mask, grad_b1)?.iter().map(|x| x * x).sum())
}

/// One SGD step on `F1(.; s)`. Only the selected rows change. Returns the
/// objective before the step.
pub fn step1_update(v: &mut Tensor, mask: &BatchMask, grad_b1: &[f64], lr1: f64) -> Result<f64> {
    let r = step1_residual(v, mask, grad_b1)?;
    for n in mask.indices() {
        for (vi, ri) in v.row_mut(n).iter_mut().zip(&r) {
            *vi -= lr1 * 2.0 * ri;
        }
    }
    Ok(r.iter().map(|x| x * x).sum())
}

/// Degenerate batch size: with `K = N` only the row sum of `V` is identifiable.
pub fn step1_degeneracy(n: usize, k: usize) -> Option<AttackWarning> {
    (k >= n).then_some(AttackWarning::DegenerateBatch { n, k })
}

/// `sum_n s[n] h_n v_n^T - grad_W1`, as a `d1 x d2` row-major buffer.
fn step2_residual(h_hat: &Tensor, v: &Tensor, mask: &BatchMask, grad_w1: &Tensor) -> Result<Vec<f64>> {
    check_rows(h_hat, mask, "H_hat")?;
    check_rows(v, mask, "V")?;
    let (d1, d2) = (h_hat.row_len(), v.row_len());
    if grad_w1.shape() != [d1, d2] {
        return Err(LabError::dimension("weight gradient", format!("[{d1}, {d2}]"), format!("{:?}", grad_w1.shape())));
    }
    let mut e: Vec<f64> = grad_w1.data().iter().map(|g| -g).collect();
    for n in mask.indices() {
        let (h, vn) = (h_hat.row(n), v.row(n));
        for (i, &hi) in h.iter().enumerate() {
            for (ej, &vj) in e[i * d2..(i + 1) * d2].iter_mut().zip(vn) {
                *ej += hi * vj;
            }
        }
    }
    Ok(e)
}

/// `F2(H; s) = ||sum_n s[n] h_n v_n^T - grad_W1||_F^2`.
pub fn step2_objective(h_hat: &Tensor, v_star: &Tensor, mask: &BatchMask, grad_w1: &Tensor) -> Result<f64> {
    Ok(step2_residual(h_hat, v_star, mask, grad_w1)?.iter().map(|x| x * x).sum())
}

/// One gradient step on `F2(.; s)`. The step is `lr2 / ||V_s||_F^2`, which
/// keeps the update stable whatever the scale of the recovered gradients.
/// Returns the objective before the step.
pub fn step2_update(h_hat: &mut Tensor, v: &Tensor, mask: &BatchMask, grad_w1: &Tensor, lr2: f64) -> Result<f64> {
    let e = step2_residual(h_hat, v, mask, grad_w1)?;
    let d2 = v.row_len();
    let idx = mask.indices();
    let scale: f64 = idx.iter().map(|&n| v.row(n).iter().map(|x| x * x).sum::<f64>()).sum();
    let step = if scale > 0.0 { lr2 / scale } else { 0.0 };
    for &n in &idx {
        let vn = v.row(n).to_vec();
        for (i, hi) in h_hat.row_mut(n).iter_mut().enumerate() {
            let g: f64 = e[i * d2..(i + 1) * d2].iter().zip(&vn).map(|(a, b)| a * b).sum();
            *hi -= step * 2.0 * g;
        }
    }
    Ok(e.iter().map(|x| x * x).sum())
}

/// Numerical rank via singular values relative to the largest one.
pub fn numerical_rank(m: &Tensor, rel_tol: f64) -> usize {
    let (r, c) = (m.rows(), m.row_len());
    if r == 0 || c == 0 {
        return 0;
    }
    let dm = DMatrix::from_row_slice(r, c, m.data());
    let sv = dm.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Warns when `N >= d2` or `rank(V) < N`; Step II recovery is then not
/// guaranteed, though the objective is still well defined.
pub fn step2_hypothesis(v_star: &Tensor) -> Option<AttackWarning> {
    let (n, d2) = (v_star.rows(), v_star.row_len());
    let rank = numerical_rank(v_star, 1e-10);
    (n >= d2 || rank < n).then_some(AttackWarning::Step2Hypothesis { n, d2, rank })
}

/// Anisotropic total variation of the selected images, zeroed below `xi`.
pub fn tv_truncated(images: &Tensor, height: usize, width: usize, mask: Option<&BatchMask>, xi: f64) -> Result<f64> {
    let tv = tv_plain(images, height, width, mask)?;
    Ok(if tv < xi { 0.0 } else { tv })
}

fn tv_plain(images: &Tensor, height: usize, width: usize, mask: Option<&BatchMask>) -> Result<f64> {
    if images.row_len() != height * width {
        return Err(LabError::dimension("tv image layout", height * width, images.row_len()));
    }
    let rows: Vec<usize> = match mask {
        Some(m) => m.indices(),
        None => (0..images.rows()).collect(),
    };
    let mut tv = 0.0;
    for n in rows {
        let img = images.row(n);
        for r in 0..height {
            for c in 0..width {
                let v = img[r * width + c];
                if c + 1 < width {
                    tv += (img[r * width + c + 1] - v).abs();
                }
                if r + 1 < height {
                    tv += (img[(r + 1) * width + c] - v).abs();
                }
            }
        }
    }
    Ok(tv)
}

/// Subgradient of the plain TV of one image, accumulated into `out`.
fn tv_subgradient(img: &[f64], height: usize, width: usize, scale: f64, out: &mut [f64]) {
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if c + 1 < width {
                let s = sign(img[i + 1] - img[i]) * scale;
                out[i + 1] += s;
                out[i] -= s;
            }
            if r + 1 < height {
                let j = i + width;
                let s = sign(img[j] - img[i]) * scale;
                out[j] += s;
                out[i] -= s;
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weights of the Step III objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step3Weights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub xi: f64,
}

/// The three Step III terms, unweighted, and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Step3Terms {
    pub grad_match: f64,
    pub tv: f64,
    pub representation: f64,
    pub total: f64,
}

/// Everything Step III needs about the real side of one round.
pub struct Step3Inputs<'a> {
    pub params: &'a ModelParams,
    pub mask: &'a BatchMask,
    pub real_grads: &'a GradientReport,
    /// Recovered representations, `N x d1`.
    pub h_star: &'a Tensor,
    pub height: usize,
    pub width: usize,
}

fn selected_rows(t: &Tensor, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&n| t.row(n).to_vec()).collect()
}

pub(crate) fn label_distributions(logits: &Tensor, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&n| softmax(logits.row(n))).collect()
}

/// `sum_T ||a_T - b_T||^2` over matching parameter tensors.
pub fn squared_distance(a: &[Vec<f64>], b: &GradientReport) -> f64 {
    a.iter()
        .zip(&b.grads)
        .map(|(x, y)| x.iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
        .sum()
}

/// `F3(D_hat; s)`: weighted gradient match, truncated TV and representation
/// terms over the selected fake samples.
pub fn step3_objective(
    fake_data: &Tensor,
    fake_label_logits: &Tensor,
    inp: &Step3Inputs<'_>,
    w: &Step3Weights,
) -> Result<Step3Terms> {
    validate_step3(fake_data, fake_label_logits, inp)?;
    let idx = inp.mask.indices();
    let xs = selected_rows(fake_data, &idx);
    let ys = label_distributions(fake_label_logits, &idx);
    let pass = soft_pass(inp.params, &xs, &ys);
    let grad_match = squared_distance(&pass.grads, inp.real_grads);
    let tv = tv_truncated(fake_data, inp.height, inp.width, Some(inp.mask), w.xi)?;
    let representation: f64 = idx
        .iter()
        .zip(&pass.h_rows)
        .map(|(&n, h)| h.iter().zip(inp.h_star.row(n)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(Step3Terms {
        grad_match,
        tv,
        representation,
        total: w.alpha * grad_match + w.beta * tv + w.gamma * representation,
    })
}

fn validate_step3(fake_data: &Tensor, logits: &Tensor, inp: &Step3Inputs<'_>) -> Result<()> {
    check_rows(fake_data, inp.mask, "fake data")?;
    check_rows(logits, inp.mask, "fake label logits")?;
    check_rows(inp.h_star, inp.mask, "recovered representations")?;
    let spec = inp.params.spec();
    if fake_data.row_len() != spec.input_dim() {
        return Err(LabError::dimension("fake data width", spec.input_dim(), fake_data.row_len()));
    }
    if logits.row_len() != spec.classes() {
        return Err(LabError::dimension("fake label width", spec.classes(), logits.row_len()));
    }
    if inp.h_star.row_len() != spec.d1() {
        return Err(LabError::dimension("representation width", spec.d1(), inp.h_star.row_len()));
    }
    if inp.real_grads.ids != inp.params.ids() {
        return Err(LabError::KeyMismatch("real gradients do not match the model parameters".into()));
    }
    Ok(())
}

/// Gradient of a Step III style objective with respect to the fake inputs
/// and label logits of the selected rows (other rows get zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Step3Gradient {
    pub terms: Step3Terms,
    pub d_data: Tensor,
    pub d_logits: Tensor,
}

/// How the gradient-matching term is scored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum MatchLoss {
    /// `alpha * ||g_real - g_fake||^2`.
    Squared,
    /// `1 - cos(g_real, g_fake)` over the flattened concatenation.
    Cosine,
    /// `sum_T 1 - exp(-||g_real,T - g_fake,T||^2 / width)`.
    GaussianKernel { width: f64 },
}

/// Value and cotangent (w.r.t. the fake gradients) of a matching loss.
pub(crate) fn match_loss(kind: MatchLoss, fake: &[Vec<f64>], real: &GradientReport) -> (f64, Vec<Vec<f64>>) {
    match kind {
        MatchLoss::Squared => {
            let r = fake
                .iter()
                .zip(&real.grads)
                .map(|(f, g)| f.iter().zip(g.data()).map(|(a, b)| 2.0 * (a - b)).collect())
                .collect();
            (squared_distance(fake, real), r)
        }
        MatchLoss::Cosine => {
            let dot: f64 = fake
                .iter()
                .zip(&real.grads)
                .map(|(f, g)| f.iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let nf = fake.iter().flatten().map(|a| a * a).sum::<f64>().sqrt();
            let nr = real.global_norm();
            if nf == 0.0 || nr == 0.0 {
                let zero = fake.iter().map(|f| vec![0.0; f.len()]).collect();
                return (1.0, zero);
            }
            let c = dot / (nf * nr);
            // d(1 - c)/df = -(g / (|f||g|) - c f / |f|^2)
            let r = fake
                .iter()
                .zip(&real.grads)
                .map(|(f, g)| {
                    f.iter()
                        .zip(g.data())
                        .map(|(a, b)| -(b / (nf * nr) - c * a / (nf * nf)))
                        .collect()
                })
                .collect();
            (1.0 - c, r)
        }
        MatchLoss::GaussianKernel { width } => {
            let mut value = 0.0;
            let r = fake
                .iter()
                .zip(&real.grads)
                .map(|(f, g)| {
                    let d2: f64 = f.iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                    let e = (-d2 / width).exp();
                    value += 1.0 - e;
                    f.iter().zip(g.data()).map(|(a, b)| e * 2.0 * (a - b) / width).collect()
                })
                .collect();
            (value, r)
        }
    }
}

/// Shared gradient routine for Step III and the gradient-matching baselines.
/// `match_weight` scales the matching term, `beta`/`xi` the truncated TV and
/// `gamma` the representation term (skipped when `h_star` is `None`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matching_gradient(
    fake_data: &Tensor,
    logits: &Tensor,
    params: &ModelParams,
    mask: &BatchMask,
    real_grads: &GradientReport,
    h_star: Option<&Tensor>,
    kind: MatchLoss,
    w: &Step3Weights,
    height: usize,
    width: usize,
) -> Result<Step3Gradient> {
    let idx = mask.indices();
    let xs = selected_rows(fake_data, &idx);
    let ys = label_distributions(logits, &idx);
    let pass = soft_pass(params, &xs, &ys);
    let (grad_match, cot) = match_loss(kind, &pass.grads, real_grads);

    let mut d_data = Tensor::zeros(fake_data.shape().to_vec());
    let mut d_logits = Tensor::zeros(logits.shape().to_vec());

    if w.alpha != 0.0 {
        let (dx, dy) = gradient_direction_vjp(params, &xs, &ys, &cot);
        for (j, &n) in idx.iter().enumerate() {
            for (o, g) in d_data.row_mut(n).iter_mut().zip(&dx[j]) {
                *o += w.alpha * g;
            }
            let y = &ys[j];
            let inner: f64 = y.iter().zip(&dy[j]).map(|(a, b)| a * b).sum();
            for (c, o) in d_logits.row_mut(n).iter_mut().enumerate() {
                *o += w.alpha * y[c] * (dy[j][c] - inner);
            }
        }
    }

    let tv = tv_plain(fake_data, height, width, Some(mask))?;
    let tv_value = if tv < w.xi { 0.0 } else { tv };
    if w.beta != 0.0 && tv >= w.xi {
        for &n in &idx {
            let img = fake_data.row(n).to_vec();
            tv_subgradient(&img, height, width, w.beta, d_data.row_mut(n));
        }
    }

    let mut representation = 0.0;
    if let Some(h_star) = h_star {
        for (j, &n) in idx.iter().enumerate() {
            let diff: Vec<f64> = pass.h_rows[j].iter().zip(h_star.row(n)).map(|(a, b)| a - b).collect();
            representation += diff.iter().map(|d| d * d).sum::<f64>();
            if w.gamma != 0.0 {
                let dh: Vec<f64> = diff.iter().map(|d| 2.0 * w.gamma * d).collect();
                let dx = representation_vjp(params, &xs[j], &dh)?;
                for (o, g) in d_data.row_mut(n).iter_mut().zip(&dx) {
                    *o += g;
                }
            }
        }
    }

    Ok(Step3Gradient {
        terms: Step3Terms {
            grad_match,
            tv: tv_value,
            representation,
            total: w.alpha * grad_match + w.beta * tv_value + w.gamma * representation,
        },
        d_data,
        d_logits,
    })
}

/// Gradient of [`step3_objective`] with respect to the fake data and label
/// logits.
pub fn step3_gradient(
    fake_data: &Tensor,
    fake_label_logits: &Tensor,
    inp: &Step3Inputs<'_>,
    w: &Step3Weights,
) -> Result<Step3Gradient> {
    validate_step3(fake_data, fake_label_logits, inp)?;
    matching_gradient(
        fake_data,
        fake_label_logits,
        inp.params,
        inp.mask,
        inp.real_grads,
        Some(inp.h_star),
        MatchLoss::Squared,
        w,
        inp.height,
        inp.width,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_v_gives_squared_gradient_norm() {
        let v = Tensor::zeros(vec![3, 2]);
        let mask = BatchMask::from_indices(3, &[0, 2]).unwrap();
        let f = step1_objective(&v, &mask, &[3.0, -4.0]).unwrap();
        assert_eq!(f, 25.0);
    }

    #[test]
    fn hand_expanded_quadratic() {
        // N=3, K=2, d2=1: F1 = (v0 + v2 - g)^2 for mask 101.
        let v = Tensor::new(vec![3, 1], vec![0.5, 7.0, -0.25]).unwrap();
        let mask = BatchMask::from_indices(3, &[0, 2]).unwrap();
        let g = 1.5;
        let expected = 0.5f64 * 0.5 + 0.25 * 0.25 + g * g + 2.0 * 0.5 * -0.25 - 2.0 * 0.5 * g + 2.0 * 0.25 * g;
        assert!((step1_objective(&v, &mask, &[g]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn step1_update_touches_only_selected_rows() {
        let mut v = Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap();
        let before = v.clone();
        let mask = BatchMask::from_indices(4, &[1, 3]).unwrap();
        step1_update(&mut v, &mask, &[0.1, 0.2], 0.05).unwrap();
        assert_eq!(v.row(0), before.row(0));
        assert_eq!(v.row(2), before.row(2));
        assert_ne!(v.row(1), before.row(1));
    }

    #[test]
    fn zero_h_gives_squared_weight_gradient() {
        let h = Tensor::zeros(vec![2, 3]);
        let v = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Tensor::new(vec![3, 2], vec![1.0, -1.0, 2.0, 0.0, 0.5, 0.5]).unwrap();
        let mask = BatchMask::from_indices(2, &[1]).unwrap();
        assert!((step2_objective(&h, &v, &mask, &g).unwrap() - g.norm_sq()).abs() < 1e-15);
    }

    #[test]
    fn tv_hand_values() {
        let img = Tensor::new(vec![1, 4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(tv_truncated(&img, 2, 2, None, 0.0).unwrap(), 2.0);
        assert_eq!(tv_truncated(&img, 2, 2, None, 3.0).unwrap(), 0.0);
        assert_eq!(tv_truncated(&img, 2, 2, None, 1.0).unwrap(), 2.0);
        let flat = Tensor::new(vec![1, 9], vec![0.3; 9]).unwrap();
        assert_eq!(tv_truncated(&flat, 3, 3, None, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn rank_check_flags_duplicates() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(step2_hypothesis(&v), Some(AttackWarning::Step2Hypothesis { rank: 1, .. })));
        let ok = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert!(step2_hypothesis(&ok).is_none());
        let wide = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(step2_hypothesis(&wide).is_some());
    }
}

//! Gradient-matching baselines run through the same fake-data loop, without
//! the first two recovery steps.

use serde::{Deserialize, Serialize};

use crate::attack::objectives::{label_distributions, match_loss, matching_gradient, tv_truncated, MatchLoss, Step3Weights};
use crate::attack::{current_psnr, descent_step, AttackHyper, AttackOutcome, AttackState, TraceRow};
use crate::error::{LabError, Result};
use crate::metrics::psnr;
use crate::model::{soft_pass, GradientReport};
use crate::tensor::Tensor;
use crate::vfl::Simulator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    Dlg,
    CosineTv { beta_tv: f64 },
    /// `None` uses the median of `||real_T||^2` over tensors, per round.
    Sapag { kernel_width: Option<f64> },
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Dlg => "dlg",
            Self::CosineTv { .. } => "cosine",
            Self::Sapag { .. } => "sapag",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::CosineTv { beta_tv } if !(*beta_tv >= 0.0) => {
                Err(LabError::Config(format!("beta_tv must be non-negative, got {beta_tv}")))
            }
            Self::Sapag { kernel_width: Some(w) } if !(*w > 0.0) => {
                Err(LabError::Config(format!("kernel_width must be positive, got {w}")))
            }
            _ => Ok(()),
        }
    }
}

fn raw(report: &GradientReport) -> Vec<Vec<f64>> {
    report.grads.iter().map(|t| t.data().to_vec()).collect()
}

fn check(fake: &GradientReport, real: &GradientReport) -> Result<()> {
    fake.same_keys(real)
}

/// `sum_T ||real_T - fake_T||^2`.
pub fn dlg_objective(fake: &GradientReport, real: &GradientReport) -> Result<f64> {
    check(fake, real)?;
    Ok(match_loss(MatchLoss::Squared, &raw(fake), real).0)
}

/// `1 - cos(real, fake)` over the flattened gradients plus `beta_tv * TV`.
/// The cosine part is 1 when the fake gradient is zero.
pub fn cosine_objective(
    fake: &GradientReport,
    real: &GradientReport,
    fake_images: &Tensor,
    height: usize,
    width: usize,
    beta_tv: f64,
) -> Result<f64> {
    check(fake, real)?;
    let c = match_loss(MatchLoss::Cosine, &raw(fake), real).0;
    Ok(c + beta_tv * tv_truncated(fake_images, height, width, None, 0.0)?)
}

/// `sum_T 1 - exp(-||real_T - fake_T||^2 / kernel_width)`.
pub fn sapag_objective(fake: &GradientReport, real: &GradientReport, kernel_width: f64) -> Result<f64> {
    if !(kernel_width > 0.0) {
        return Err(LabError::InvalidArgument(format!("kernel_width must be positive, got {kernel_width}")));
    }
    check(fake, real)?;
    Ok(match_loss(MatchLoss::GaussianKernel { width: kernel_width }, &raw(fake), real).0)
}

/// Median of the per-tensor squared norms.
pub fn median_kernel_width(real: &GradientReport) -> f64 {
    let mut sq: Vec<f64> = real.grads.iter().map(Tensor::norm_sq).collect();
    sq.sort_by(f64::total_cmp);
    let n = sq.len();
    if n == 0 {
        return 1.0;
    }
    let m = if n % 2 == 1 { sq[n / 2] } else { 0.5 * (sq[n / 2 - 1] + sq[n / 2]) };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Runs `hyper.iterations` rounds of fake-data descent on `kind`'s objective
/// with step `lr3`. Only `lr3`, `iterations`, `backtracking`, `psnr_target`,
/// `init_seed` and `trace_every` are read from `hyper`.
pub fn run_baseline(sim: &mut Simulator, kind: &BaselineKind, hyper: &AttackHyper) -> Result<AttackOutcome> {
    hyper.validate()?;
    kind.validate()?;
    let spec = sim.params().spec().clone();
    let mut state = AttackState::init(
        sim.n(),
        spec.d1(),
        spec.d2(),
        spec.input_dim(),
        spec.classes(),
        hyper.init_seed,
    );
    let real = sim.data().dataset.inputs.clone();
    let (h, w) = (sim.data().dataset.height, sim.data().dataset.width);
    let mut trace = Vec::new();
    let mut reached = None;
    let mut rounds = 0;
    for t in 0..hyper.iterations {
        let view = sim.step()?;
        rounds += 1;
        let (loss, weights) = match kind {
            BaselineKind::Dlg => (MatchLoss::Squared, Step3Weights { alpha: 1.0, beta: 0.0, gamma: 0.0, xi: 0.0 }),
            BaselineKind::CosineTv { beta_tv } => {
                (MatchLoss::Cosine, Step3Weights { alpha: 1.0, beta: *beta_tv, gamma: 0.0, xi: 0.0 })
            }
            BaselineKind::Sapag { kernel_width } => (
                MatchLoss::GaussianKernel {
                    width: kernel_width.unwrap_or_else(|| median_kernel_width(&view.report)),
                },
                Step3Weights { alpha: 1.0, beta: 0.0, gamma: 0.0, xi: 0.0 },
            ),
        };
        let g = matching_gradient(
            &state.fake_data,
            &state.fake_logits,
            &view.params,
            &view.mask,
            &view.report,
            None,
            loss,
            &weights,
            h,
            w,
        )
        .map_err(|e| e.in_phase(kind.name()))?;
        let idx = view.mask.indices();
        descent_step(
            &mut state.fake_data,
            &mut state.fake_logits,
            &view.mask,
            &g.d_data,
            &g.d_logits,
            hyper.lr3,
            g.terms.total,
            hyper.backtracking,
            |d, l| {
                let xs: Vec<Vec<f64>> = idx.iter().map(|&n| d.row(n).to_vec()).collect();
                let ys = label_distributions(l, &idx);
                let pass = soft_pass(&view.params, &xs, &ys);
                let m = match_loss(loss, &pass.grads, &view.report).0;
                let tv = if weights.beta != 0.0 {
                    tv_truncated(d, h, w, Some(&view.mask), 0.0)?
                } else {
                    0.0
                };
                Ok(m + weights.beta * tv)
            },
        )?;
        let p = current_psnr(&real, &state.fake_data)?;
        let hit = hyper.psnr_target.is_some_and(|target| p >= target);
        if hit || t + 1 == hyper.iterations || rounds % hyper.trace_every == 0 {
            trace.push(TraceRow {
                iter: rounds,
                phase: kind.name().to_string(),
                f1: None,
                f2: None,
                f3_grad: Some(g.terms.grad_match),
                f3_tv: Some(g.terms.tv),
                f3_rep: None,
                psnr: p,
            });
        }
        if hit {
            reached = Some(rounds);
            break;
        }
    }
    let metrics = psnr(&real, &state.fake_data, 1.0)?;
    Ok(AttackOutcome {
        state,
        trace,
        rounds,
        target_reached_at: reached,
        metrics,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(vals: &[&[f64]]) -> GradientReport {
        GradientReport {
            ids: (0..vals.len()).map(|i| format!("t{i}")).collect(),
            grads: vals.iter().map(|v| Tensor::from_vec(v.to_vec())).collect(),
            round: 0,
        }
    }

    #[test]
    fn dlg_hand_sums() {
        let real = report(&[&[1.0, 2.0], &[3.0]]);
        let fake = report(&[&[0.5, 2.5], &[1.0]]);
        assert_eq!(dlg_objective(&fake, &real).unwrap(), 0.25 + 0.25 + 4.0);
        assert_eq!(dlg_objective(&real, &real).unwrap(), 0.0);
        let zero = report(&[&[0.0, 0.0], &[0.0]]);
        assert_eq!(dlg_objective(&zero, &real).unwrap(), 14.0);
        let other = GradientReport { ids: vec!["a".into(), "b".into()], ..zero };
        assert!(matches!(dlg_objective(&other, &real), Err(LabError::KeyMismatch(_))));
    }

    #[test]
    fn cosine_identities() {
        let img = Tensor::new(vec![1, 4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let real = report(&[&[1.0, -2.0], &[0.5]]);
        let neg = report(&[&[-1.0, 2.0], &[-0.5]]);
        let zero = report(&[&[0.0, 0.0], &[0.0]]);
        assert!(cosine_objective(&real, &real, &img, 2, 2, 0.1).unwrap() - 0.2 < 1e-12);
        assert!((cosine_objective(&neg, &real, &img, 2, 2, 0.0).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(cosine_objective(&zero, &real, &img, 2, 2, 0.0).unwrap(), 1.0);
        let a = report(&[&[1.0, 2.0, 3.0]]);
        let b = report(&[&[4.0, -5.0, 6.0]]);
        let cos = 12.0 / (14f64.sqrt() * 77f64.sqrt());
        assert!((cosine_objective(&b, &a, &img, 2, 2, 0.0).unwrap() - (1.0 - cos)).abs() < 1e-12);
    }

    #[test]
    fn sapag_definitional_point_and_width_limit() {
        let real = report(&[&[1.0, 0.0], &[0.0]]);
        let fake = report(&[&[0.0, 0.0], &[1.0]]);
        let v = sapag_objective(&fake, &real, 1.0).unwrap();
        assert!((v - 2.0 * (1.0 - (-1f64).exp())).abs() < 1e-12);
        assert_eq!(sapag_objective(&real, &real, 3.0).unwrap(), 0.0);
        let mut prev = f64::INFINITY;
        for width in [1.0, 10.0, 100.0, 1e4, 1e8] {
            let v = sapag_objective(&fake, &real, width).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-7);
        assert!(sapag_objective(&fake, &real, 0.0).is_err());
    }
}

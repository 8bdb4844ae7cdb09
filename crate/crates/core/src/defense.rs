//! Upload-side countermeasures: fake gradients and a DP-noise baseline.
//!
//! Fake gradients: each worker draws a pool of `nu` Gaussian surrogates, each
//! tensor of each surrogate sorted in descending order. The true gradient's
//! entries are ranked by magnitude (descending), the surrogate nearest to the
//! rank-ordered true gradient is selected (the pool is redrawn while the
//! nearest is farther than `tau`), and every true entry is clamped into the
//! envelope `[-|psi_l|, |psi_l|]` of the surrogate entry paired with its rank.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::GradientReport;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Pool size.
    pub nu: usize,
    /// Variance of the surrogate entries.
    pub sigma2: f64,
    /// L2 acceptance threshold.
    pub tau: f64,
    pub max_regenerations: usize,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nu == 0 || !(self.sigma2 > 0.0) || !(self.tau > 0.0) {
            return Err(LabError::Config(format!(
                "fake gradients need nu >= 1, sigma2 > 0, tau > 0 (got {}, {}, {})",
                self.nu, self.sigma2, self.tau
            )));
        }
        Ok(())
    }
}

pub const DP_DELTA: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DPConfig {
    pub clip_norm: f64,
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    DP_DELTA
}

impl Default for DPConfig {
    fn default() -> Self {
        Self {
            clip_norm: 3.0,
            epsilon: 1.0,
            delta: DP_DELTA,
        }
    }
}

impl DPConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) || !(self.epsilon > 0.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(LabError::Config("dp needs clip_norm > 0, epsilon > 0, 0 < delta < 1".into()));
        }
        Ok(())
    }

    /// Gaussian-mechanism scale `clip * sqrt(2 ln(1.25/delta)) / epsilon`.
    pub fn noise_sigma(&self) -> f64 {
        if self.epsilon.is_infinite() {
            return 0.0;
        }
        self.clip_norm * (2.0 * (1.25 / self.delta).ln()).sqrt() / self.epsilon
    }
}

/// One surrogate: one sorted row per parameter tensor.
pub type FakeGradient = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct FakePool {
    pub members: Vec<FakeGradient>,
}

/// Draws `nu` surrogates with i.i.d. `N(0, sigma2)` entries, each row sorted
/// in descending order. `lens` holds the size of every parameter tensor.
pub fn gen_fake_pool<R: Rng + ?Sized>(lens: &[usize], nu: usize, sigma2: f64, rng: &mut R) -> Result<FakePool> {
    if nu == 0 {
        return Err(LabError::InvalidArgument("fake pool size must be >= 1".into()));
    }
    let normal = Normal::new(0.0, sigma2.max(0.0).sqrt())
        .map_err(|e| LabError::InvalidArgument(format!("sigma2 = {sigma2}: {e}")))?;
    let members = (0..nu)
        .map(|_| {
            lens.iter()
                .map(|&len| {
                    let mut row: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
                    row.sort_by(|a, b| b.total_cmp(a));
                    row
                })
                .collect()
        })
        .collect();
    Ok(FakePool { members })
}

/// Indices of `g` ordered by descending magnitude; ties keep index order.
fn magnitude_order(g: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub report: GradientReport,
    /// Distance from the accepted surrogate to the rank-ordered true gradient.
    pub accepted_distance: f64,
    pub regenerations: usize,
}

/// Projects `true_grad` onto the nearest surrogate of `pool`, redrawing the
/// pool while no member is within `config.tau`.
pub fn fake_project<R: Rng + ?Sized>(
    true_grad: &GradientReport,
    mut pool: FakePool,
    config: &DefenseConfig,
    rng: &mut R,
) -> Result<Projection> {
    config.validate()?;
    let lens: Vec<usize> = true_grad.grads.iter().map(Tensor::len).collect();
    for member in &pool.members {
        if member.len() != lens.len() || member.iter().zip(&lens).any(|(row, &l)| row.len() != l) {
            return Err(LabError::dimension(
                "fake pool member",
                format!("{lens:?}"),
                format!("{:?}", member.iter().map(Vec::len).collect::<Vec<_>>()),
            ));
        }
    }
    let orders: Vec<Vec<usize>> = true_grad.grads.iter().map(|t| magnitude_order(t.data())).collect();
    let ranked: Vec<Vec<f64>> = true_grad
        .grads
        .iter()
        .zip(&orders)
        .map(|(t, z)| z.iter().map(|&k| t.data()[k]).collect())
        .collect();
    let distance = |member: &FakeGradient| -> f64 {
        member
            .iter()
            .zip(&ranked)
            .map(|(psi, r)| psi.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    };

    let mut regenerations = 0;
    let (best, best_distance) = loop {
        let (i, d) = pool
            .members
            .iter()
            .map(distance)
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("pool is non-empty");
        if d <= config.tau {
            break (i, d);
        }
        if regenerations >= config.max_regenerations {
            return Err(LabError::RegenerationsExhausted {
                tau: config.tau,
                regenerations,
                closest: d,
            });
        }
        pool = gen_fake_pool(&lens, config.nu, config.sigma2, rng)?;
        regenerations += 1;
    };

    let psi = &pool.members[best];
    let grads = true_grad
        .grads
        .iter()
        .zip(&orders)
        .zip(psi)
        .map(|((t, zeta), row)| {
            let mut g = vec![0.0; t.len()];
            for (l, &k) in zeta.iter().enumerate() {
                let env = row[l].abs();
                g[k] = t.data()[k].clamp(-env, env);
            }
            Tensor::new(t.shape().to_vec(), g).expect("same shape")
        })
        .collect();
    Ok(Projection {
        report: GradientReport {
            ids: true_grad.ids.clone(),
            grads,
            round: true_grad.round,
        },
        accepted_distance: best_distance,
        regenerations,
    })
}

/// Clips the concatenated gradient to `clip_norm`, then adds i.i.d. Gaussian
/// noise of scale [`DPConfig::noise_sigma`].
pub fn dp_perturb<R: Rng + ?Sized>(true_grad: &GradientReport, dp: &DPConfig, rng: &mut R) -> Result<GradientReport> {
    dp.validate()?;
    let norm = true_grad.global_norm();
    let factor = if norm > dp.clip_norm { dp.clip_norm / norm } else { 1.0 };
    let sigma = dp.noise_sigma();
    let normal = Normal::new(0.0, sigma).map_err(|e| LabError::InvalidArgument(e.to_string()))?;
    let grads = true_grad
        .grads
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|&v| v * factor + normal.sample(rng)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        })
        .collect();
    Ok(GradientReport {
        ids: true_grad.ids.clone(),
        grads,
        round: true_grad.round,
    })
}

/// Which transformation workers apply before upload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Defense {
    #[default]
    None,
    Fake(DefenseConfig),
    Dp(DPConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRecord {
    pub round: usize,
    pub tensor_id: String,
    pub true_norm: f64,
    pub fake_norm: f64,
    pub l2_gap: f64,
    pub regenerations: usize,
}

impl Defense {
    /// Transforms one round's true gradients into the uploaded ones.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        grads: &GradientReport,
        round: usize,
        rng: &mut R,
    ) -> Result<(GradientReport, Vec<AuditRecord>)> {
        let (report, regenerations) = match self {
            Defense::None => return Ok((grads.clone(), Vec::new())),
            Defense::Fake(cfg) => {
                let lens: Vec<usize> = grads.grads.iter().map(Tensor::len).collect();
                let pool = gen_fake_pool(&lens, cfg.nu, cfg.sigma2, rng)?;
                let p = fake_project(grads, pool, cfg, rng)?;
                (p.report, p.regenerations)
            }
            Defense::Dp(dp) => (dp_perturb(grads, dp, rng)?, 0),
        };
        let audit = grads
            .grads
            .iter()
            .zip(&report.grads)
            .zip(&grads.ids)
            .map(|((t, f), id)| AuditRecord {
                round,
                tensor_id: id.clone(),
                true_norm: t.norm(),
                fake_norm: f.norm(),
                l2_gap: t.sub(f).map(|d| d.norm()).unwrap_or(f64::NAN),
                regenerations,
            })
            .collect();
        Ok((report, audit))
    }
}

/// One simulator round as seen by the server; the true gradients stay inside
/// the simulator and only the defended report is returned.
pub fn defended_round(sim: &mut crate::vfl::Simulator) -> Result<GradientReport> {
    Ok(sim.step()?.report)
}

pub fn write_audit_csv(path: &Path, records: &[AuditRecord]) -> Result<()> {
    let mut out = String::from("round,tensor_id,true_norm,fake_norm,l2_gap,regenerations\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:.12e},{:.12e},{:.12e},{}\n",
            r.round, r.tensor_id, r.true_norm, r.fake_norm, r.l2_gap, r.regenerations
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn report(values: &[f64]) -> GradientReport {
        GradientReport {
            ids: vec!["w".into()],
            grads: vec![Tensor::from_vec(values.to_vec())],
            round: 0,
        }
    }

    fn cfg(tau: f64) -> DefenseConfig {
        DefenseConfig {
            nu: 1,
            sigma2: 1.0,
            tau,
            max_regenerations: 0,
        }
    }

    #[test]
    fn clamp_rule_hand_trace() {
        let pool = FakePool {
            members: vec![vec![vec![2.0, 1.0, 0.2]]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = fake_project(&report(&[3.0, -1.0, 0.5]), pool, &cfg(100.0), &mut rng).unwrap();
        assert_eq!(p.report.grads[0].data(), &[2.0, -1.0, 0.2]);
    }

    #[test]
    fn zero_gradient_stays_zero() {
        let pool = FakePool {
            members: vec![vec![vec![0.7, 0.3, 0.1]]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = fake_project(&report(&[0.0; 3]), pool, &cfg(100.0), &mut rng).unwrap();
        assert_eq!(p.report.grads[0].data(), &[0.0; 3]);
    }

    #[test]
    fn self_projection_is_identity() {
        let t = [0.3, -2.0, 1.1, -0.05];
        let mut sorted: Vec<f64> = t.iter().map(|v: &f64| v.abs()).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let pool = FakePool {
            members: vec![vec![sorted]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = fake_project(&report(&t), pool, &cfg(1e6), &mut rng).unwrap();
        assert_eq!(p.report.grads[0].data(), &t);
    }

    #[test]
    fn exhausted_regenerations_are_reported() {
        let pool = FakePool {
            members: vec![vec![vec![0.0, 0.0]]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = fake_project(&report(&[50.0, -40.0]), pool, &cfg(1e-3), &mut rng).unwrap_err();
        assert!(matches!(err, LabError::RegenerationsExhausted { .. }));
    }

    #[test]
    fn pool_rows_are_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = gen_fake_pool(&[7, 3], 4, 2.0, &mut rng).unwrap();
        for m in &pool.members {
            for row in m {
                assert!(row.windows(2).all(|w| w[0] >= w[1]));
            }
        }
        let tiny = gen_fake_pool(&[5], 1, 1e-300, &mut rng).unwrap();
        assert!(tiny.members[0][0].iter().all(|v| v.abs() < 1e-140));
    }

    #[test]
    fn dp_clips_before_noise() {
        let dp = DPConfig {
            clip_norm: 3.0,
            epsilon: f64::INFINITY,
            delta: DP_DELTA,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = dp_perturb(&report(&[0.0, 6.0]), &dp, &mut rng).unwrap();
        assert_eq!(out.grads[0].data(), &[0.0, 3.0]);
    }

    #[test]
    fn dp_noise_is_seeded() {
        let dp = DPConfig::default();
        let a = dp_perturb(&report(&[1.0, 2.0]), &dp, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = dp_perturb(&report(&[1.0, 2.0]), &dp, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let expected = 3.0 * (2.0 * (1.25f64 / 1e-5).ln()).sqrt();
        assert!((dp.noise_sigma() - expected).abs() < 1e-12);
    }
}

//! Recovery attacks run by the honest-but-curious server.

pub mod baseline;
pub mod cafe;
pub mod objectives;

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dual::softmax;
use crate::error::{LabError, Result};
use crate::metrics::{psnr, RecoveryMetrics};
use crate::tensor::Tensor;
use crate::vfl::BatchMask;

pub use baseline::{cosine_objective, dlg_objective, run_baseline, sapag_objective, BaselineKind};
pub use cafe::{run_nested, run_single_loop};
pub use objectives::{
    step1_objective, step1_update, step2_objective, step2_update, step3_gradient, step3_objective, tv_truncated,
    Step3Inputs, Step3Terms, Step3Weights,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackWarning {
    /// `K = N`: only the row sum of `V` is determined.
    DegenerateBatch { n: usize, k: usize },
    /// `N >= d2` or `rank(V) < N`: Step II recovery is not guaranteed.
    Step2Hypothesis { n: usize, d2: usize, rank: usize },
}

impl fmt::Display for AttackWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DegenerateBatch { n, k } => {
                write!(f, "degenerate batch: K = {k} with N = {n}, per-sample gradients are not identifiable")
            }
            Self::Step2Hypothesis { n, d2, rank } => write!(
                f,
                "Step II hypothesis violated (N = {n}, d2 = {d2}, rank(V) = {rank}): representation recovery not guaranteed"
            ),
        }
    }
}

/// Objective weights, step sizes and budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackHyper {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub xi: f64,
    pub lr1: f64,
    /// Dimensionless: the Step II step is `lr2 / ||V_s||_F^2`.
    pub lr2: f64,
    pub lr3: f64,
    /// Iteration budget: per phase for the nested runner, total rounds for
    /// the single loop and the baselines.
    pub iterations: usize,
    pub switch1: f64,
    pub switch2: f64,
    /// Compare the switching thresholds against `F1 / ||grad_b1||^2` and
    /// `F2 / ||grad_W1||^2` instead of the raw objectives. Useful while the
    /// model trains, where the observed gradients shrink and drift.
    pub relative_switch: bool,
    /// Halve the Step III step until the objective on the current mask does
    /// not increase.
    pub backtracking: bool,
    /// Stop once the batch PSNR reaches this value.
    pub psnr_target: Option<f64>,
    /// Seed for the uniform initialization of the attack variables.
    pub init_seed: u64,
    /// Record one trace row every this many iterations (the last one is
    /// always recorded).
    pub trace_every: usize,
}

impl Default for AttackHyper {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta: 1e-4,
            gamma: 1e-3,
            xi: 60.0,
            lr1: 0.1,
            lr2: 0.5,
            lr3: 200.0,
            iterations: 5000,
            switch1: 1e-9,
            switch2: 5e-9,
            relative_switch: false,
            backtracking: true,
            psnr_target: None,
            init_seed: 7,
            trace_every: 1,
        }
    }
}

impl AttackHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("xi", self.xi)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LabError::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        for (name, v) in [("lr1", self.lr1), ("lr2", self.lr2), ("lr3", self.lr3)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(LabError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(LabError::Config("iterations must be at least 1".into()));
        }
        if self.trace_every == 0 {
            return Err(LabError::Config("trace_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> Step3Weights {
        Step3Weights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            xi: self.xi,
        }
    }
}

/// Early-exit thresholds for the first two nested phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopCriteria {
    pub phi1: f64,
    pub phi2: f64,
    /// A phase ends once this many consecutive per-mask objectives fall
    /// below its threshold.
    pub window: usize,
}

impl Default for StopCriteria {
    fn default() -> Self {
        Self {
            phi1: 1e-9,
            phi2: 5e-9,
            window: 32,
        }
    }
}

impl StopCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi1 > 0.0) || !(self.phi2 > 0.0) {
            return Err(LabError::Config(format!(
                "phi1 and phi2 must be positive, got {} and {}",
                self.phi1, self.phi2
            )));
        }
        if self.window == 0 {
            return Err(LabError::Config("window must be at least 1".into()));
        }
        Ok(())
    }
}

/// The attacker's variables.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackState {
    /// Recovered first-layer output gradients, `N x d2`.
    pub v: Tensor,
    /// Recovered representations, `N x d1`.
    pub h_hat: Tensor,
    /// Fake inputs, `N x F`, kept in `[0, 1]`.
    pub fake_data: Tensor,
    /// Unconstrained fake-label logits, `N x C`.
    pub fake_logits: Tensor,
}

impl AttackState {
    /// Every variable i.i.d. uniform on `[0, 1)`.
    pub fn init(n: usize, d1: usize, d2: usize, features: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.random::<f64>()).collect();
            Tensor::new(vec![r, c], data).expect("shape")
        };
        Self {
            v: draw(n, d2),
            h_hat: draw(n, d1),
            fake_data: draw(n, features),
            fake_logits: draw(n, classes),
        }
    }

    pub fn fake_labels(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..self.fake_logits.rows()).map(|n| softmax(self.fake_logits.row(n))).collect();
        Tensor::from_rows(&rows).expect("label rows")
    }
}

/// One line of the attack trace; `None` fields are left empty in the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub phase: String,
    pub f1: Option<f64>,
    pub f2: Option<f64>,
    pub f3_grad: Option<f64>,
    pub f3_tv: Option<f64>,
    pub f3_rep: Option<f64>,
    pub psnr: f64,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, trace_csv(rows)).map_err(|e| LabError::io(path, e))
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    let mut out = String::from("iter,phase,f1,f2,f3_grad,f3_tv,f3_rep,psnr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6}\n",
            r.iter,
            r.phase,
            opt(r.f1),
            opt(r.f2),
            opt(r.f3_grad),
            opt(r.f3_tv),
            opt(r.f3_rep),
            r.psnr
        ));
    }
    out
}

/// Result of one attack run.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub state: AttackState,
    pub trace: Vec<TraceRow>,
    /// Server rounds consumed.
    pub rounds: usize,
    /// First round (1-based count) at which the PSNR target was reached.
    pub target_reached_at: Option<usize>,
    /// Fake data vs the real inputs, rows aligned by sample index.
    pub metrics: RecoveryMetrics,
    pub warnings: Vec<AttackWarning>,
}

/// Batch PSNR of the current fake data.
pub(crate) fn current_psnr(real: &Tensor, fake: &Tensor) -> Result<f64> {
    Ok(psnr(real, fake, 1.0)?.psnr_db)
}

/// Takes one descent step on the selected rows of the fake data and logits.
/// With backtracking, the step is halved (up to 30 times) until `objective`
/// does not exceed `before`; if no step qualifies the variables are left
/// unchanged. Returns the objective after the step when it was evaluated.
#[allow(clippy::too_many_arguments)]
pub(crate) fn descent_step<F>(
    data: &mut Tensor,
    logits: &mut Tensor,
    mask: &BatchMask,
    d_data: &Tensor,
    d_logits: &Tensor,
    lr: f64,
    before: f64,
    backtracking: bool,
    mut objective: F,
) -> Result<Option<f64>>
where
    F: FnMut(&Tensor, &Tensor) -> Result<f64>,
{
    let idx = mask.indices();
    let mut step = lr;
    for _ in 0..if backtracking { 30 } else { 1 } {
        let mut nd = data.clone();
        let mut nl = logits.clone();
        for &n in &idx {
            for (x, g) in nd.row_mut(n).iter_mut().zip(d_data.row(n)) {
                *x = (*x - step * g).clamp(0.0, 1.0);
            }
            for (x, g) in nl.row_mut(n).iter_mut().zip(d_logits.row(n)) {
                *x -= step * g;
            }
        }
        if !backtracking {
            *data = nd;
            *logits = nl;
            return Ok(None);
        }
        let after = objective(&nd, &nl)?;
        if after <= before {
            *data = nd;
            *logits = nl;
            return Ok(Some(after));
        }
        step *= 0.5;
    }
    Ok(Some(before))
}

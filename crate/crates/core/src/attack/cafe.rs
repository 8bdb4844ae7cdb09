//! The nested-loop and single-loop three-step recovery runners.

use crate::attack::objectives::{
    step1_degeneracy, step1_update, step2_hypothesis, step2_update, step3_gradient, step3_objective, Step3Inputs,
    Step3Terms,
};
use crate::attack::{current_psnr, descent_step, AttackHyper, AttackOutcome, AttackState, StopCriteria, TraceRow};
use crate::error::{LabError, Result};
use crate::metrics::psnr;
use crate::tensor::Tensor;
use crate::vfl::{ServerView, Simulator};

fn observed(view: &ServerView) -> Result<(&[f64], &Tensor)> {
    let b = view
        .report
        .get("fc1.bias")
        .ok_or_else(|| LabError::KeyMismatch("gradient report has no fc1.bias".into()))?;
    let w = view
        .report
        .get("fc1.weight")
        .ok_or_else(|| LabError::KeyMismatch("gradient report has no fc1.weight".into()))?;
    Ok((b.data(), w))
}

/// One Step III update on the round's mask; returns the terms before the step.
fn step3_round(state: &mut AttackState, view: &ServerView, hyper: &AttackHyper, h: usize, w: usize) -> Result<Step3Terms> {
    let weights = hyper.weights();
    let inputs = Step3Inputs {
        params: &view.params,
        mask: &view.mask,
        real_grads: &view.report,
        h_star: &state.h_hat,
        height: h,
        width: w,
    };
    let g = step3_gradient(&state.fake_data, &state.fake_logits, &inputs, &weights)?;
    descent_step(
        &mut state.fake_data,
        &mut state.fake_logits,
        &view.mask,
        &g.d_data,
        &g.d_logits,
        hyper.lr3,
        g.terms.total,
        hyper.backtracking,
        |d, l| Ok(step3_objective(d, l, &inputs, &weights)?.total),
    )?;
    Ok(g.terms)
}

struct Recorder<'a> {
    real: &'a Tensor,
    every: usize,
    trace: Vec<TraceRow>,
}

impl Recorder<'_> {
    fn push(&mut self, row: TraceRow, force: bool) {
        if force || row.iter.is_multiple_of(self.every) {
            self.trace.push(row);
        }
    }
}

fn row(iter: usize, phase: &str, psnr: f64) -> TraceRow {
    TraceRow {
        iter,
        phase: phase.to_string(),
        f1: None,
        f2: None,
        f3_grad: None,
        f3_tv: None,
        f3_rep: None,
        psnr,
    }
}

fn with_terms(mut r: TraceRow, t: &Step3Terms) -> TraceRow {
    r.f3_grad = Some(t.grad_match);
    r.f3_tv = Some(t.tv);
    r.f3_rep = Some(t.representation);
    r
}

fn setup(sim: &Simulator, hyper: &AttackHyper) -> Result<(AttackState, Vec<crate::attack::AttackWarning>)> {
    hyper.validate()?;
    let spec = sim.params().spec();
    let state = AttackState::init(
        sim.n(),
        spec.d1(),
        spec.d2(),
        spec.input_dim(),
        spec.classes(),
        hyper.init_seed,
    );
    let warnings = step1_degeneracy(sim.n(), sim.k()).into_iter().collect();
    Ok((state, warnings))
}

fn finish(
    sim: &Simulator,
    state: AttackState,
    trace: Vec<TraceRow>,
    rounds: usize,
    target_reached_at: Option<usize>,
    warnings: Vec<crate::attack::AttackWarning>,
) -> Result<AttackOutcome> {
    let metrics = psnr(&sim.data().dataset.inputs, &state.fake_data, 1.0)?;
    Ok(AttackOutcome {
        state,
        trace,
        rounds,
        target_reached_at,
        metrics,
        warnings,
    })
}

/// Step I for up to `T` rounds, then Step II for up to `T` rounds, then
/// Step III for `T` rounds. Steps I and II end early once `stop.window`
/// consecutive per-mask objectives are below `phi1` / `phi2`.
pub fn run_nested(sim: &mut Simulator, hyper: &AttackHyper, stop: &StopCriteria) -> Result<AttackOutcome> {
    stop.validate()?;
    let (mut state, mut warnings) = setup(sim, hyper)?;
    let real = sim.data().dataset.inputs.clone();
    let (h, w) = (sim.data().dataset.height, sim.data().dataset.width);
    let mut rec = Recorder {
        real: &real,
        every: hyper.trace_every,
        trace: Vec::new(),
    };
    let mut rounds = 0;

    let start_psnr = current_psnr(&real, &state.fake_data)?;
    let mut streak = 0;
    for t in 0..hyper.iterations {
        let view = sim.step().map_err(|e| e.in_phase("step1"))?;
        rounds += 1;
        let (gb, _) = observed(&view)?;
        let f1 = step1_update(&mut state.v, &view.mask, gb, hyper.lr1).map_err(|e| e.in_phase("step1"))?;
        streak = if f1 < stop.phi1 { streak + 1 } else { 0 };
        let done = streak >= stop.window || t + 1 == hyper.iterations;
        let mut r = row(rounds, "step1", start_psnr);
        r.f1 = Some(f1);
        rec.push(r, done);
        if done {
            break;
        }
    }
    warnings.extend(step2_hypothesis(&state.v));

    streak = 0;
    for t in 0..hyper.iterations {
        let view = sim.step().map_err(|e| e.in_phase("step2"))?;
        rounds += 1;
        let (_, gw) = observed(&view)?;
        let f2 = step2_update(&mut state.h_hat, &state.v, &view.mask, gw, hyper.lr2).map_err(|e| e.in_phase("step2"))?;
        streak = if f2 < stop.phi2 { streak + 1 } else { 0 };
        let done = streak >= stop.window || t + 1 == hyper.iterations;
        let mut r = row(rounds, "step2", start_psnr);
        r.f2 = Some(f2);
        rec.push(r, done);
        if done {
            break;
        }
    }

    let mut reached = None;
    for t in 0..hyper.iterations {
        let view = sim.step().map_err(|e| e.in_phase("step3"))?;
        rounds += 1;
        let terms = step3_round(&mut state, &view, hyper, h, w).map_err(|e| e.in_phase("step3"))?;
        let p = current_psnr(rec.real, &state.fake_data)?;
        let hit = hyper.psnr_target.is_some_and(|target| p >= target);
        rec.push(with_terms(row(rounds, "step3", p), &terms), hit || t + 1 == hyper.iterations);
        if hit {
            reached = Some(rounds);
            break;
        }
    }
    let trace = rec.trace;
    finish(sim, state, trace, rounds, reached, warnings)
}

/// Every round updates each active step on the round's mask. Step II starts
/// once the Step I objective drops below `switch1`, Step III once the Step II
/// objective drops below `switch2`. Runs for `T` rounds or until the PSNR
/// target is met.
pub fn run_single_loop(sim: &mut Simulator, hyper: &AttackHyper) -> Result<AttackOutcome> {
    let (mut state, mut warnings) = setup(sim, hyper)?;
    let real = sim.data().dataset.inputs.clone();
    let (h, w) = (sim.data().dataset.height, sim.data().dataset.width);
    let mut rec = Recorder {
        real: &real,
        every: hyper.trace_every,
        trace: Vec::new(),
    };
    let (mut step2_on, mut step3_on) = (false, false);
    let mut reached = None;
    let mut p = current_psnr(&real, &state.fake_data)?;
    let mut rounds = 0;
    for t in 0..hyper.iterations {
        let view = sim.step()?;
        rounds += 1;
        let (gb, gw) = observed(&view)?;
        let f1 = step1_update(&mut state.v, &view.mask, gb, hyper.lr1).map_err(|e| e.in_phase("step1"))?;
        let scale = |g: &[f64]| if hyper.relative_switch { g.iter().map(|x| x * x).sum::<f64>() } else { 1.0 };
        if !step2_on && f1 < hyper.switch1 * scale(gb) {
            step2_on = true;
            warnings.extend(step2_hypothesis(&state.v));
        }
        let mut phase = "step1";
        let mut f2 = None;
        if step2_on {
            phase = "step2";
            let v = step2_update(&mut state.h_hat, &state.v, &view.mask, gw, hyper.lr2).map_err(|e| e.in_phase("step2"))?;
            f2 = Some(v);
            if v < hyper.switch2 * scale(gw.data()) {
                step3_on = true;
            }
        }
        let mut terms = None;
        if step3_on {
            phase = "step3";
            terms = Some(step3_round(&mut state, &view, hyper, h, w).map_err(|e| e.in_phase("step3"))?);
            p = current_psnr(rec.real, &state.fake_data)?;
        }
        let hit = step3_on && hyper.psnr_target.is_some_and(|target| p >= target);
        let mut r = row(rounds, phase, p);
        r.f1 = Some(f1);
        r.f2 = f2;
        if let Some(t) = &terms {
            r = with_terms(r, t);
        }
        rec.push(r, hit || t + 1 == hyper.iterations);
        if hit {
            reached = Some(rounds);
            break;
        }
    }
    if !step2_on {
        // Step II never started; still report whether it could succeed.
        warnings.extend(step2_hypothesis(&state.v));
    }
    let trace = rec.trace;
    finish(sim, state, trace, rounds, reached, warnings)
}

//! Command implementations behind the `cafe-lab` binary: each writes CSVs,
//! PNG grids and a replay manifest into an output directory.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attack::{run_baseline, run_nested, run_single_loop, write_trace_csv, AttackOutcome};
use crate::config::{AttackMethod, ExperimentConfig, SweepAxis};
use crate::defense::{write_audit_csv, Defense};
use crate::error::{LabError, Result};
use crate::io::save_png_grid;
use crate::theory::{theory_grid, write_theory_csv};
use crate::vfl::{write_round_log, Simulator};

/// One line of a metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: String,
    pub psnr: f64,
    pub mse: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("run_id,method,psnr,mse\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.9e}\n", r.run_id, r.method, r.psnr, r.mse));
    }
    out
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub name: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub warnings: Vec<String>,
    pub files: Vec<String>,
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| LabError::io(&p, e))
    }

    fn finish(mut self, cfg: &ExperimentConfig, command: &str, mut warnings: Vec<String>) -> Result<Manifest> {
        warnings.dedup();
        self.write("config.toml", &cfg.to_toml())?;
        let p = self.dir.join("manifest.json");
        self.files.push("manifest.json".into());
        let manifest = Manifest {
            name: cfg.name.clone(),
            command: command.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            warnings,
            files: self.files,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&p, json + "\n").map_err(|e| LabError::io(&p, e))?;
        Ok(manifest)
    }
}

/// Runs the configured attack against a simulator built with `defense`.
pub fn attack_with(cfg: &ExperimentConfig, defense: Defense) -> Result<AttackOutcome> {
    let mut sim = cfg.simulator_with(defense)?;
    attack_sim(cfg, &mut sim)
}

fn attack_sim(cfg: &ExperimentConfig, sim: &mut Simulator) -> Result<AttackOutcome> {
    let hyper = cfg.hyper();
    match cfg.attack.method {
        AttackMethod::CafeNested => run_nested(sim, &hyper, &cfg.attack.stop),
        AttackMethod::CafeSingle => run_single_loop(sim, &hyper),
        _ => run_baseline(sim, &cfg.attack.baseline().expect("baseline method"), &hyper),
    }
}

fn row(run_id: String, cfg: &ExperimentConfig, o: &AttackOutcome) -> MetricsRow {
    MetricsRow {
        run_id,
        method: cfg.attack.method.name().to_string(),
        psnr: o.metrics.psnr_db,
        mse: o.metrics.mse,
    }
}

/// `attack`: trace, metrics, real and recovered image grids. With a defense
/// configured, an undefended reference run is added to the metrics.
pub fn cmd_attack(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    let mut out = Output::new(out_dir)?;
    let mut warnings = cfg.advisories();
    let outcome = attack_with(cfg, cfg.defense)?;
    warnings.extend(outcome.warnings.iter().map(ToString::to_string));
    let mut rows = Vec::new();
    if cfg.defense != Defense::None {
        let reference = attack_with(cfg, Defense::None)?;
        rows.push(row(format!("{}/undefended", cfg.name), cfg, &reference));
        rows.push(row(format!("{}/defended", cfg.name), cfg, &outcome));
    } else {
        rows.push(row(cfg.name.clone(), cfg, &outcome));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let trace = out.path("trace.csv");
    write_trace_csv(&trace, &outcome.trace)?;
    out.write("metrics.csv", &metrics_csv(&rows))?;
    let ds = cfg.dataset()?;
    let cols = ds.len().min(8);
    let real = out.path("real.png");
    save_png_grid(&ds.inputs, ds.height, ds.width, 1, cols, &real)?;
    let recovered = out.path("recovered.png");
    save_png_grid(&outcome.state.fake_data, ds.height, ds.width, 1, cols, &recovered)?;
    out.finish(cfg, "attack", warnings)
}

/// Loss summary of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub initial_full_loss: f64,
    pub final_full_loss: f64,
}

/// Trains for `train.rounds` rounds with parameter updates on, under `defense`.
pub fn train_with(cfg: &ExperimentConfig, defense: Defense) -> Result<(TrainSummary, Simulator)> {
    let mut c = cfg.clone();
    c.train.train = true;
    let mut sim = c.simulator_with(defense)?;
    let initial_full_loss = sim.full_loss()?;
    let losses = sim.train()?;
    let final_full_loss = sim.full_loss()?;
    Ok((
        TrainSummary {
            losses,
            initial_full_loss,
            final_full_loss,
        },
        sim,
    ))
}

/// `train`: per-round log, defense audit (if any) and a loss summary.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    let mut out = Output::new(out_dir)?;
    let (summary, sim) = train_with(cfg, cfg.defense)?;
    let log = out.path("round_log.csv");
    write_round_log(&log, sim.log())?;
    if cfg.defense != Defense::None {
        let audit = out.path("audit.csv");
        write_audit_csv(&audit, sim.audit())?;
    }
    let kind = match cfg.defense {
        Defense::None => "none",
        Defense::Fake(_) => "fake",
        Defense::Dp(_) => "dp",
    };
    out.write(
        "train_metrics.csv",
        &format!(
            "run_id,defense,initial_loss,final_loss\n{},{kind},{:.9e},{:.9e}\n",
            cfg.name, summary.initial_full_loss, summary.final_full_loss
        ),
    )?;
    out.finish(cfg, "train", cfg.advisories())
}

/// `verify-theory`: the `N, K` grid of spectra and bound residuals.
pub fn cmd_verify_theory(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    let mut out = Output::new(out_dir)?;
    let rows = theory_grid(cfg.theory.n_max, cfg.theory.perturbation, cfg.seed)?;
    let mut warnings = Vec::new();
    for r in &rows {
        if r.bound_residual < 0.0 {
            warnings.push(format!("recovery bound violated at N={}, K={} by {:.3e}", r.n, r.k, -r.bound_residual));
        }
    }
    let p = out.path("theory.csv");
    write_theory_csv(&p, &rows)?;
    out.finish(cfg, "verify-theory", warnings)
}

/// Worker threads for sweeps: `CAFE_LAB_THREADS` if set to a positive
/// integer, otherwise the available parallelism.
pub fn sweep_threads() -> usize {
    std::env::var("CAFE_LAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Runs the attack at every point of the sweep axis; rows come back in the
/// order of `values` whatever the thread count.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], threads: usize) -> Result<Vec<MetricsRow>> {
    let points: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| cfg.with_axis(axis, v))
        .collect::<Result<_>>()?;
    let threads = threads.max(1).min(points.len().max(1));
    let mut results: Vec<Option<Result<AttackOutcome>>> = (0..points.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (chunk_points, chunk_results) in points.chunks(points.len().div_ceil(threads)).zip(results.chunks_mut(points.len().div_ceil(threads))) {
            s.spawn(move || {
                for (p, r) in chunk_points.iter().zip(chunk_results.iter_mut()) {
                    *r = Some(attack_with(p, p.defense));
                }
            });
        }
    });
    values
        .iter()
        .zip(points.iter().zip(results))
        .map(|(&v, (p, r))| {
            let o = r.expect("every point ran")?;
            Ok(row(format!("{}/{}={}", cfg.name, axis.name(), format_value(v)), p, &o))
        })
        .collect()
}

/// `sweep`: one metrics row per grid point. `axis` and `values` override the
/// config's `[sweep]` section; an axis other than the section's needs values.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: Option<SweepAxis>,
    values: Option<Vec<f64>>,
    out_dir: &Path,
) -> Result<Manifest> {
    let (axis, values) = match (cfg.sweep.as_ref(), axis, values) {
        (_, Some(a), Some(v)) => (a, v),
        (Some(s), None, v) => (s.axis, v.unwrap_or_else(|| s.values.clone())),
        (Some(s), Some(a), None) if a == s.axis => (a, s.values.clone()),
        (_, Some(a), None) => {
            return Err(LabError::Config(format!(
                "no values for the {} axis; pass --values",
                a.name()
            )))
        }
        (None, None, _) => {
            return Err(LabError::Config(format!(
                "config {:?} has no [sweep] section; pass --axis and --values",
                cfg.name
            )))
        }
    };
    if values.is_empty() {
        return Err(LabError::Config("sweep needs at least one value".into()));
    }
    let mut out = Output::new(out_dir)?;
    let rows = sweep(cfg, axis, &values, sweep_threads())?;
    out.write("metrics.csv", &metrics_csv(&rows))?;
    out.finish(cfg, &format!("sweep {}", axis.name()), cfg.advisories())
}

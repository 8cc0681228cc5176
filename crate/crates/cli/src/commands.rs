use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use mbo_core::diagnostics::{
    energy_multiphase, energy_two_phase, lagrange_scaling, least_squares, ledger_check, LambdaSeries, LedgerReport,
};
use mbo_core::grid::equivalent_radius;
use mbo_core::oracles::{circle_mcf, forced_ball, two_ball_vp};
use mbo_core::schemes::{run, RunStatus, SchemeKind, SpaceTimeForce, State, SurfaceTensionMatrix, Trajectory};
use mbo_core::{Grid, HeatKernelPlan, PhaseField};

use crate::config::{ExperimentConfig, InitSpec, SweepAxis, SweepMode, SweepSpec};
use crate::dump::{dump_name, Dump};
use crate::error::CliError;
use crate::setup;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Pass => 0,
            Self::Fail => 2,
        }
    }

    fn from_bool(ok: bool) -> Self {
        if ok {
            Self::Pass
        } else {
            Self::Fail
        }
    }
}

pub const LEDGER_COLUMNS: &str = "n,t,lambda,E_h,D_h,slack,radius";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// Ledger CSV: one row per recorded step.
pub fn ledger_csv(traj: &Trajectory) -> String {
    let mut out = format!("{LEDGER_COLUMNS}\n");
    for r in &traj.records {
        let _ = writeln!(
            out,
            "{},{:.16e},{},{:.16e},{:.16e},{:.16e},{}",
            r.step,
            r.time,
            opt(r.lambda),
            r.energy_after,
            r.dissipation,
            r.ed_slack,
            opt(r.bounding_radius)
        );
    }
    out
}

fn print_ledger_summary(report: &LedgerReport) {
    println!("initial energy  {:.10e}", report.initial_energy);
    println!("steps checked   {}", report.steps.len());
    if !report.steps.is_empty() {
        println!(
            "min slack       {:.3e} (tolerance {:.3e})",
            report.min_slack(),
            -1e-9 * report.scale
        );
    }
    println!(
        "cumulative      {:.10e} <= {:.10e}",
        report.cumulative_lhs, report.cumulative_rhs
    );
    match report.first_failure {
        Some(n) => println!("ledger FAIL (first failing step {n})"),
        None if report.pass => println!("ledger PASS"),
        None => println!("ledger FAIL (cumulative balance)"),
    }
}

/// Runs the experiment, writes dumps and `ledger.csv`, and audits the ledger.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Verdict, CliError> {
    let (initial, first_step, h) = match &cfg.resume {
        Some(path) => {
            let dump = Dump::read(path)?;
            if dump.grid != cfg.grid {
                return Err(CliError::config(format!(
                    "resume file {} does not match the configured grid",
                    path.display()
                )));
            }
            if let Some(h) = cfg.h {
                if h.to_bits() != dump.h.to_bits() {
                    return Err(CliError::config(format!(
                        "resume file has h = {:e}, config has h = {h:e}",
                        dump.h
                    )));
                }
            }
            (setup::state_from_dump(&dump, cfg.scheme)?, dump.step, dump.h)
        }
        None => {
            let h = cfg.h.ok_or_else(|| CliError::config("missing required key 'h'"))?;
            let init = cfg.init.as_ref().expect("parser requires init or resume");
            (setup::initial_state(init, cfg.scheme, &cfg.grid, cfg.seed)?, 0, h)
        }
    };
    let steps = setup::step_count(cfg, h, first_step)?;
    let mut sc = setup::scheme_config(cfg, cfg.grid, h, steps, &initial)?;
    sc.first_step = first_step;
    info!("running {} for {steps} steps from step {first_step}", cfg.scheme.name());
    let traj = run(&sc, initial)?;

    create_dir(&cfg.output)?;
    let last = traj.states.len() - 1;
    for (k, state) in traj.states.iter().enumerate() {
        let step = first_step + k;
        let periodic = cfg.dump_every > 0 && step % cfg.dump_every == 0;
        if k == 0 || k == last || periodic {
            setup::dump_of(state, h, step).write(&cfg.output.join(dump_name(step)))?;
        }
    }
    write_file(&cfg.output.join("ledger.csv"), ledger_csv(&traj))?;

    match traj.status {
        RunStatus::Completed => println!("completed {} steps", traj.states.len() - 1),
        RunStatus::Extinct { step } => println!("phase extinct at step {step}"),
        RunStatus::Pinned { step } => println!("pinned at step {step}"),
    }
    let report = ledger_check(&traj)?;
    print_ledger_summary(&report);
    Ok(Verdict::from_bool(report.pass))
}

/// Re-audits a stored trajectory of consecutive dumps.
pub fn cmd_check(paths: &[PathBuf], cfg: &ExperimentConfig) -> Result<Verdict, CliError> {
    if paths.len() < 2 {
        return Err(CliError::config("check needs at least two consecutive dumps"));
    }
    let mut dumps = paths.iter().map(|p| Dump::read(p)).collect::<Result<Vec<_>, _>>()?;
    dumps.sort_by_key(|d| d.step);
    let first = &dumps[0];
    for pair in dumps.windows(2) {
        if pair[1].step != pair[0].step + 1 {
            return Err(CliError::config(format!(
                "dumps must be consecutive steps, found {} followed by {}",
                pair[0].step, pair[1].step
            )));
        }
        if pair[1].grid != first.grid || pair[1].h.to_bits() != first.h.to_bits() {
            return Err(CliError::config(format!(
                "dump of step {} has a different grid or h",
                pair[1].step
            )));
        }
    }
    if first.grid != cfg.grid {
        return Err(CliError::config("dumps do not match the configured grid"));
    }
    let states = dumps
        .iter()
        .map(|d| setup::state_from_dump(d, cfg.scheme))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sc = setup::scheme_config(cfg, first.grid, first.h, states.len() - 1, &states[0])?;
    sc.first_step = first.step;
    let center = states[0].solid().centroid().unwrap_or([0.0; 3]);
    let traj = Trajectory {
        config: sc,
        lambdas: vec![None; states.len() - 1],
        states,
        records: Vec::new(),
        status: RunStatus::Completed,
        center,
    };
    let report = ledger_check(&traj)?;
    println!("{:>8} {:>24} {:>24} {:>24}", "n", "E_h", "D_h", "slack");
    for s in &report.steps {
        println!(
            "{:>8} {:>24.16e} {:>24.16e} {:>24.16e}",
            s.step, s.energy_after, s.dissipation, s.slack
        );
    }
    print_ledger_summary(&report);
    Ok(Verdict::from_bool(report.pass))
}

/// Energy of a dump; grain tensions come from `cfg` or default to 1.
pub fn cmd_energy(path: &Path, h: Option<f64>, cfg: Option<&ExperimentConfig>) -> Result<f64, CliError> {
    let dump = Dump::read(path)?;
    let h = h.unwrap_or(dump.h);
    let plan = HeatKernelPlan::new(dump.grid, h).map_err(|e| CliError::config(format!("h: {e}")))?;
    let energy = if dump.phases == 2 {
        let mask = dump.labels.iter().map(|&l| l == 1).collect();
        energy_two_phase(&plan, &PhaseField::from_mask(dump.grid, mask)?)?
    } else {
        let state = match setup::state_from_dump(&dump, SchemeKind::GrainGrowth)? {
            State::Multi(m) => m,
            State::TwoPhase(_) => unreachable!("grain growth dumps load as multiphase"),
        };
        let sigma = match cfg {
            Some(c) => setup::tensions(c, state.grains())?,
            None => SurfaceTensionMatrix::equal(state.grains())?,
        };
        energy_multiphase(&plan, &state, &sigma)?
    };
    println!("E_h = {energy:.16e}");
    Ok(energy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub h: f64,
    pub n: usize,
    pub steps: usize,
    /// Measured value: radius (`eoc`) or `M(h)` (`lambda`).
    pub measured: f64,
    /// Oracle value (`eoc`) or bad iteration count (`lambda`).
    pub reference: f64,
    pub error: f64,
    /// Order against the previous row.
    pub local_order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub mode: SweepMode,
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `log error` (or `log M`) against `log h` or `log dx`.
    pub order: Option<f64>,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let mut out = match self.mode {
            SweepMode::Eoc => "h,n,steps,measured,oracle,error,order\n".to_string(),
            SweepMode::Lambda => "h,n,steps,M,bad_iterations,order\n".to_string(),
        };
        for r in &self.rows {
            let order = opt(r.local_order);
            let _ = match self.mode {
                SweepMode::Eoc => writeln!(
                    out,
                    "{:.16e},{},{},{:.16e},{:.16e},{:.16e},{order}",
                    r.h, r.n, r.steps, r.measured, r.reference, r.error
                ),
                SweepMode::Lambda => writeln!(
                    out,
                    "{:.16e},{},{},{:.16e},{},{order}",
                    r.h, r.n, r.steps, r.measured, r.reference as usize
                ),
            };
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let fmt_order = |o: Option<f64>| o.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        match self.mode {
            SweepMode::Eoc => {
                let _ = writeln!(
                    out,
                    "{:>12} {:>6} {:>7} {:>14} {:>14} {:>12} {:>7}",
                    "h", "n", "steps", "measured", "oracle", "error", "order"
                );
                for r in &self.rows {
                    let _ = writeln!(
                        out,
                        "{:>12.4e} {:>6} {:>7} {:>14.8} {:>14.8} {:>12.4e} {:>7}",
                        r.h,
                        r.n,
                        r.steps,
                        r.measured,
                        r.reference,
                        r.error,
                        fmt_order(r.local_order)
                    );
                }
            }
            SweepMode::Lambda => {
                let _ = writeln!(
                    out,
                    "{:>12} {:>6} {:>7} {:>14} {:>5} {:>7}",
                    "h", "n", "steps", "M(h)", "bad", "order"
                );
                for r in &self.rows {
                    let _ = writeln!(
                        out,
                        "{:>12.4e} {:>6} {:>7} {:>14.6e} {:>5} {:>7}",
                        r.h,
                        r.n,
                        r.steps,
                        r.measured,
                        r.reference as usize,
                        fmt_order(r.local_order)
                    );
                }
            }
        }
        let _ = writeln!(out, "fitted order: {}", fmt_order(self.order));
        out
    }
}

/// Sharp-interface prediction of the tracked radii at time `t`.
enum Oracle {
    Circle { r0: f64 },
    Forced { r0: f64, f: f64 },
    TwoBall { centers: [Vec<f64>; 2], r0: [f64; 2] },
}

impl Oracle {
    fn for_config(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let init = cfg
            .init
            .as_ref()
            .ok_or_else(|| CliError::config("eoc sweeps start from 'init', not from a resume file"))?;
        match (cfg.scheme, init, &cfg.force) {
            (SchemeKind::Mbo, InitSpec::Ball { radius, .. }, _) => Ok(Self::Circle { r0: *radius }),
            (SchemeKind::Forced, InitSpec::Ball { radius, .. }, Some(SpaceTimeForce::Constant(f))) => {
                Ok(Self::Forced { r0: *radius, f: *f })
            }
            (SchemeKind::VolumePreserving, InitSpec::Balls { centers, radii }, _) if centers.len() == 2 => {
                Ok(Self::TwoBall {
                    centers: [centers[0].clone(), centers[1].clone()],
                    r0: [radii[0], radii[1]],
                })
            }
            _ => Err(CliError::config(
                "no oracle for this setup; eoc sweeps support mbo with a ball, forced with a constant force \
                 and a ball, and volume_preserving with two balls",
            )),
        }
    }

    fn predict(&self, t: f64, dim: usize) -> Result<Vec<f64>, CliError> {
        let past = |e: mbo_core::Error| CliError::config(format!("oracle: {e}"));
        Ok(match self {
            Self::Circle { r0 } => vec![circle_mcf(*r0, t, dim).map_err(past)?],
            Self::Forced { r0, f } => vec![forced_ball(*r0, *f, t, dim).map_err(past)?],
            Self::TwoBall { r0, .. } => {
                let b = two_ball_vp(r0[0], r0[1], t, dim).map_err(past)?;
                vec![b.r1, b.r2]
            }
        })
    }

    fn measure(&self, solid: &PhaseField) -> Vec<f64> {
        match self {
            Self::Circle { .. } | Self::Forced { .. } => vec![equivalent_radius(solid)],
            Self::TwoBall { centers, .. } => {
                // each cell goes to the nearer initial center
                let g = solid.grid();
                let dim = g.dim();
                let mut masks = [vec![false; g.len()], vec![false; g.len()]];
                for (idx, _) in solid.mask().iter().enumerate().filter(|(_, &b)| b) {
                    let x = g.cell_center(idx);
                    let d0 = g.periodic_distance(&centers[0], &x[..dim]);
                    let d1 = g.periodic_distance(&centers[1], &x[..dim]);
                    masks[usize::from(d1 < d0)][idx] = true;
                }
                masks
                    .into_iter()
                    .map(|m| equivalent_radius(&PhaseField::from_mask(*g, m).expect("mask matches grid")))
                    .collect()
            }
        }
    }
}

fn fitted_order(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if ys.iter().any(|&y| y.is_nan() || y <= 0.0) || xs.windows(2).all(|w| w[0] == w[1]) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    Some(least_squares(&lx, &ly).0).filter(|s| s.is_finite())
}

fn local_orders(xs: &[f64], ys: &[f64]) -> Vec<Option<f64>> {
    (0..xs.len())
        .map(|k| {
            if k == 0 || xs[k] == xs[k - 1] || !(ys[k] > 0.0 && ys[k - 1] > 0.0) {
                return None;
            }
            Some((ys[k] / ys[k - 1]).ln() / (xs[k] / xs[k - 1]).ln())
        })
        .collect()
}

/// Runs every sweep point and fits the observed order.
pub fn sweep_report(cfg: &ExperimentConfig) -> Result<SweepReport, CliError> {
    let Some(SweepSpec { axis, mode, .. }) = &cfg.sweep else {
        return Err(CliError::config("sweep needs 'sweep.h' or 'sweep.n'"));
    };
    if axis.len() < 3 {
        return Err(CliError::config(format!(
            "a sweep needs at least 3 points, got {}",
            axis.len()
        )));
    }
    if cfg.resume.is_some() {
        return Err(CliError::config("sweeps start from 'init'; remove 'resume'"));
    }
    let points: Vec<(f64, Grid)> = match axis {
        SweepAxis::H(hs) => hs.iter().map(|&h| (h, cfg.grid)).collect(),
        SweepAxis::N(ns) => {
            let h = cfg.h.ok_or_else(|| CliError::config("missing required key 'h'"))?;
            ns.iter()
                .map(|&n| {
                    Grid::new(cfg.grid.dim(), &vec![n; cfg.grid.dim()], cfg.grid.side())
                        .map(|g| (h, g))
                        .map_err(|e| CliError::config(format!("sweep.n: {e}")))
                })
                .collect::<Result<_, _>>()?
        }
    };
    let oracle = match mode {
        SweepMode::Eoc => Some(Oracle::for_config(cfg)?),
        SweepMode::Lambda if cfg.scheme != SchemeKind::VolumePreserving => {
            return Err(CliError::config("lambda sweeps need the volume_preserving scheme"))
        }
        SweepMode::Lambda => None,
    };
    let init = cfg.init.as_ref().expect("checked above");

    let mut rows = Vec::with_capacity(points.len());
    let mut series = Vec::with_capacity(points.len());
    for (h, grid) in points {
        let steps = setup::step_count(cfg, h, 0)?;
        let t = steps as f64 * h;
        let predicted = oracle.as_ref().map(|o| o.predict(t, grid.dim())).transpose()?;
        let initial = setup::initial_state(init, cfg.scheme, &grid, cfg.seed)?;
        let mut sc = setup::scheme_config(cfg, grid, h, steps, &initial)?;
        sc.record_diagnostics = false;
        info!("sweep point h = {h:e}, n = {}: {steps} steps", grid.cells_along(0));
        let traj = run(&sc, initial)?;
        let n = grid.cells_along(0);
        match (&oracle, predicted) {
            (Some(o), Some(pred)) => {
                let solid = traj.last().solid();
                let measured = o.measure(&solid);
                let (k, error) = measured.iter().zip(&pred).map(|(m, p)| (m - p).abs()).enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (k, e)| if e > best.1 { (k, e) } else { best },
                );
                rows.push(SweepRow {
                    h,
                    n,
                    steps,
                    measured: measured[k],
                    reference: pred[k],
                    error,
                    local_order: None,
                });
            }
            _ => {
                let lambdas: Vec<f64> = traj
                    .lambdas
                    .iter()
                    .map(|l| l.expect("volume-preserving steps have λ"))
                    .collect();
                series.push(LambdaSeries { h, lambdas });
            }
        }
    }
    if *mode == SweepMode::Lambda {
        let scaling = lagrange_scaling(&series)?;
        for (p, s) in scaling.points.iter().zip(&series) {
            rows.push(SweepRow {
                h: p.h,
                n: cfg.grid.cells_along(0),
                steps: s.lambdas.len(),
                measured: p.m,
                reference: p.bad_iterations as f64,
                error: p.m,
                local_order: None,
            });
        }
    }
    let xs: Vec<f64> = rows
        .iter()
        .map(|r| match axis {
            SweepAxis::H(_) => r.h,
            SweepAxis::N(_) => cfg.grid.side() / r.n as f64,
        })
        .collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.error).collect();
    for (r, o) in rows.iter_mut().zip(local_orders(&xs, &ys)) {
        r.local_order = o;
    }
    Ok(SweepReport {
        mode: *mode,
        order: fitted_order(&xs, &ys),
        rows,
    })
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Verdict, CliError> {
    let report = sweep_report(cfg)?;
    create_dir(&cfg.output)?;
    write_file(&cfg.output.join("sweep.csv"), report.csv())?;
    print!("{}", report.table());
    let min_order = cfg.sweep.as_ref().and_then(|s| s.min_order);
    let mut ok = true;
    if let Some(min) = min_order {
        ok = report.order.is_some_and(|o| o >= min);
        println!("required order {min}: {}", if ok { "PASS" } else { "FAIL" });
    }
    if report.mode == SweepMode::Lambda {
        let bad: f64 = report.rows.iter().map(|r| r.reference).sum();
        if bad > 0.0 {
            println!("{bad} bad iterations (|λ − ½| ≥ ¼)");
        }
    }
    Ok(Verdict::from_bool(ok))
}

//! Turns a parsed config into core objects. Failures here are config errors.

use mbo_core::grid::{rasterize_ball, rasterize_slab, voronoi_labels_in, SolidRegion};
use mbo_core::schemes::{SchemeConfig, SchemeKind, State, SurfaceTensionMatrix};
use mbo_core::{Grid, MultiPhaseState, PhaseField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, InitSpec, Region, Seeds};
use crate::dump::Dump;
use crate::error::CliError;

fn cfg_err(context: &str) -> impl Fn(mbo_core::Error) -> CliError + '_ {
    move |e| CliError::config(format!("{context}: {e}"))
}

fn pad(p: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    out[..p.len()].copy_from_slice(p);
    out
}

/// Initial state described by `init` on `grid`.
pub fn initial_state(spec: &InitSpec, kind: SchemeKind, grid: &Grid, seed: u64) -> Result<State, CliError> {
    let ctx = cfg_err("init");
    let two_phase = |field: PhaseField| {
        if kind.is_multiphase() {
            State::Multi(MultiPhaseState::from_phase(&field))
        } else {
            State::TwoPhase(field)
        }
    };
    match spec {
        InitSpec::Ball { center, radius } => Ok(two_phase(rasterize_ball(grid, center, *radius).map_err(ctx)?)),
        InitSpec::Balls { centers, radii } => {
            let mut mask = vec![false; grid.len()];
            for (c, &r) in centers.iter().zip(radii) {
                let ball = rasterize_ball(grid, c, r).map_err(&ctx)?;
                for (m, &b) in mask.iter_mut().zip(ball.mask()) {
                    *m |= b;
                }
            }
            Ok(two_phase(PhaseField::from_mask(*grid, mask).map_err(ctx)?))
        }
        InitSpec::Slab {
            axis,
            offset,
            thickness,
        } => Ok(two_phase(
            rasterize_slab(grid, *axis, *offset, *thickness).map_err(ctx)?,
        )),
        InitSpec::Voronoi { seeds, region } => {
            if !kind.is_multiphase() {
                return Err(CliError::config(format!(
                    "init: voronoi needs grain_growth, not {}",
                    kind.name()
                )));
            }
            let region = match region {
                Region::Margin(w) => SolidRegion::SeamBand { margin: *w },
                Region::Ball { center, radius } => SolidRegion::Ball {
                    center: pad(center),
                    radius: *radius,
                },
            };
            let seeds = match seeds {
                Seeds::Explicit(s) => s.clone(),
                Seeds::Random(count) => random_seeds(grid, region, *count, seed)?,
            };
            Ok(State::Multi(voronoi_labels_in(grid, &seeds, region).map_err(ctx)?))
        }
    }
}

/// Rejection sampling inside the solid region.
fn random_seeds(grid: &Grid, region: SolidRegion, count: usize, seed: u64) -> Result<Vec<Vec<f64>>, CliError> {
    let dim = grid.dim();
    let side = grid.side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inside = |x: &[f64]| match region {
        SolidRegion::SeamBand { margin } => x.iter().all(|&c| c >= margin && side - c >= margin),
        SolidRegion::Ball { center, radius } => grid.periodic_distance(&center[..dim], x) < radius,
    };
    let mut out = Vec::with_capacity(count);
    let mut tries = 0usize;
    while out.len() < count {
        tries += 1;
        if tries > 10_000 * count {
            return Err(CliError::config(
                "init: could not place random seeds inside the solid region",
            ));
        }
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..side)).collect();
        if inside(&x) {
            out.push(x);
        }
    }
    Ok(out)
}

/// Tension matrix for `grains` grains, unset pairs defaulting to 1.
pub fn tensions(cfg: &ExperimentConfig, grains: usize) -> Result<SurfaceTensionMatrix, CliError> {
    let mut sigma: Vec<f64> = (0..grains * grains)
        .map(|k| if k / grains == k % grains { 0.0 } else { 1.0 })
        .collect();
    for e in &cfg.sigma {
        if e.j > grains {
            return Err(CliError::config(format!(
                "line {}: sigma.{}.{} names grain {} but the initial state has {grains}",
                e.line, e.i, e.j, e.j
            )));
        }
        sigma[(e.i - 1) * grains + (e.j - 1)] = e.value;
        sigma[(e.j - 1) * grains + (e.i - 1)] = e.value;
    }
    SurfaceTensionMatrix::new(grains, sigma).map_err(cfg_err("sigma"))
}

/// Scheme settings for a run of `steps` steps of size `h` starting from `initial`.
pub fn scheme_config(
    cfg: &ExperimentConfig,
    grid: Grid,
    h: f64,
    steps: usize,
    initial: &State,
) -> Result<SchemeConfig, CliError> {
    let mut sc = SchemeConfig::new(cfg.scheme, grid, h, steps);
    sc.stop_on_repeat = cfg.stop_on_repeat;
    sc.force = cfg.force.clone();
    if let State::Multi(m) = initial {
        sc.tensions = Some(tensions(cfg, m.grains())?);
    }
    sc.validate().map_err(cfg_err("scheme"))?;
    Ok(sc)
}

/// Number of steps reaching `t_final` from global step `first`, or `steps`.
pub fn step_count(cfg: &ExperimentConfig, h: f64, first: usize) -> Result<usize, CliError> {
    if let Some(s) = cfg.steps {
        return Ok(s);
    }
    let t = cfg.t_final.expect("parser requires steps or t_final");
    let total = (t / h).round();
    if (total * h - t).abs() > 1e-9 * t.max(h) {
        return Err(CliError::config(format!("t_final = {t} is not a multiple of h = {h}")));
    }
    let total = total as usize;
    if total < first {
        return Err(CliError::config(format!(
            "t_final = {t} lies before the resumed step {first}"
        )));
    }
    Ok(total - first)
}

/// Reads a dump back into a state suited to `kind`.
pub fn state_from_dump(dump: &Dump, kind: SchemeKind) -> Result<State, CliError> {
    let grid = dump.grid;
    if kind.is_multiphase() {
        let state = MultiPhaseState::new(grid, dump.labels.clone(), dump.phases - 1)?;
        return Ok(State::Multi(state));
    }
    if dump.phases != 2 {
        return Err(CliError::config(format!(
            "{} needs a two-phase dump, got phases={}",
            kind.name(),
            dump.phases
        )));
    }
    let mask = dump.labels.iter().map(|&l| l == 1).collect();
    Ok(State::TwoPhase(PhaseField::from_mask(grid, mask)?))
}

pub fn dump_of(state: &State, h: f64, step: usize) -> Dump {
    let phases = match state {
        State::TwoPhase(_) => 2,
        State::Multi(m) => m.grains() + 1,
    };
    Dump {
        grid: *state.grid(),
        h,
        step,
        phases,
        labels: state.labels(),
    }
}

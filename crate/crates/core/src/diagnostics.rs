//! Energies, dissipations, linearized energies, first variations and the
//! per-step energy-dissipation ledger.
//!
//! Every integral is a cell sum times the cell volume. Bilinear forms use the
//! unclamped convolution so that they stay exactly symmetric.

use std::f64::consts::PI;

use rayon::prelude::*;
use statrs::function::erf::erf_inv;

use crate::error::{Error, Result};
use crate::grid::{bounding_radius, Grid, MultiPhaseState, PhaseField, RealField};
use crate::kernel::HeatKernelPlan;
use crate::schemes::{
    step_forced, step_grain_growth, step_mbo, step_volume_preserving, SchemeConfig, SchemeKind, SpaceTimeForce, State,
    SurfaceTensionMatrix, Trajectory,
};

/// Relative float tolerance for inequalities that hold exactly in exact arithmetic.
pub const EXACT_TOLERANCE: f64 = 1e-9;

/// Audit entry for one step `χ^{n-1} → χ^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub lambda: Option<f64>,
    pub energy_before: f64,
    pub energy_after: f64,
    /// `D_h(χ^n − χ^{n−1})`, or `−E_h(ω)` for grain growth.
    pub dissipation: f64,
    /// `(1/√π) ∫ f(nh) (χ^n − χ^{n−1})`; zero without a force.
    pub forcing_work: f64,
    pub ed_slack: f64,
    pub bounding_radius: Option<f64>,
    pub good_iteration: Option<bool>,
}

fn integral(grid: &Grid, values: impl IndexedParallelIterator<Item = f64>) -> f64 {
    // fixed chunking keeps the reduction order independent of the thread count
    let v: Vec<f64> = values.collect();
    v.par_chunks(4096)
        .map(|c| c.iter().sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum::<f64>()
        * grid.cell_volume()
}

fn check_plan(plan: &HeatKernelPlan, grid: &Grid) -> Result<()> {
    if plan.grid() != grid {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// `E_h(χ) = (1/√h) ∫ (1−χ) G_h*χ`.
pub fn energy_two_phase(plan: &HeatKernelPlan, chi: &PhaseField) -> Result<f64> {
    check_plan(plan, chi.grid())?;
    let phi = plan.convolve_values(&chi.as_f64())?;
    let mask = chi.mask();
    Ok(integral(
        chi.grid(),
        phi.par_iter().zip(mask).map(|(&p, &c)| if c { 0.0 } else { p }),
    ) / plan.h().sqrt())
}

/// A field with values in `{−1, 0, 1}`, typically `χ^n − χ^{n−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedField {
    grid: Grid,
    values: Vec<i8>,
}

impl SignedField {
    pub fn new(grid: Grid, values: Vec<i8>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        if let Some(v) = values.iter().find(|v| !(-1..=1).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "signed field value {v} outside {{-1, 0, 1}}"
            )));
        }
        Ok(Self { grid, values })
    }

    /// `after − before`.
    pub fn difference(after: &PhaseField, before: &PhaseField) -> Result<Self> {
        if after.grid() != before.grid() {
            return Err(Error::GridMismatch);
        }
        let values = after
            .mask()
            .iter()
            .zip(before.mask())
            .map(|(&a, &b)| a as i8 - b as i8)
            .collect();
        Ok(Self {
            grid: *after.grid(),
            values,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// `D_h(ω) = (1/√h) ∫ ω G_h*ω`.
pub fn dissipation_two_phase(plan: &HeatKernelPlan, omega: &SignedField) -> Result<f64> {
    check_plan(plan, omega.grid())?;
    let w = omega.as_f64();
    if w.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let gw = plan.convolve_values(&w)?;
    Ok(integral(omega.grid(), w.par_iter().zip(&gw).map(|(a, b)| a * b)) / plan.h().sqrt())
}

/// `L_{λ,h}(φ, χ) = (1/√h) ∫ (1−χ)φ + χ(2λ−φ)`.
pub fn linearized_energy(phi: &RealField, chi: &PhaseField, lambda: f64, h: f64) -> Result<f64> {
    if phi.grid() != chi.grid() {
        return Err(Error::GridMismatch);
    }
    let vals = phi
        .values()
        .par_iter()
        .zip(chi.mask())
        .map(|(&p, &c)| if c { 2.0 * lambda - p } else { p });
    Ok(integral(chi.grid(), vals) / h.sqrt())
}

fn check_tensions(state: &MultiPhaseState, sigma: &SurfaceTensionMatrix) -> Result<()> {
    if sigma.grains() != state.grains() {
        return Err(Error::InvalidTensions(format!(
            "matrix is for {} grains, state has {}",
            sigma.grains(),
            state.grains()
        )));
    }
    Ok(())
}

/// `(1/√h) Σ_{i,j} σ̂_ij ∫ a_i G_h*b_j` over labels `0..=P` with the extended matrix.
fn multiphase_form(plan: &HeatKernelPlan, a: &[Vec<f64>], b: &[Vec<f64>], sigma: &SurfaceTensionMatrix) -> Result<f64> {
    let grid = *plan.grid();
    let conv: Vec<Vec<f64>> = b.par_iter().map(|bj| plan.convolve_values(bj)).collect::<Result<_>>()?;
    let vals = (0..grid.len()).into_par_iter().map(|c| {
        let mut acc = 0.0;
        for (i, ai) in a.iter().enumerate() {
            let ai = ai[c];
            if ai == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for (j, gj) in conv.iter().enumerate() {
                row += sigma.extended(i, j) * gj[c];
            }
            acc += ai * row;
        }
        acc
    });
    Ok(integral(&grid, vals) / plan.h().sqrt())
}

fn phase_indicators(state: &MultiPhaseState) -> Vec<Vec<f64>> {
    (0..=state.grains())
        .map(|l| state.labels().iter().map(|&x| (x as usize == l) as u8 as f64).collect())
        .collect()
}

/// Multiphase energy with the vapor entering through the extended matrix.
pub fn energy_multiphase(plan: &HeatKernelPlan, state: &MultiPhaseState, sigma: &SurfaceTensionMatrix) -> Result<f64> {
    check_plan(plan, state.grid())?;
    check_tensions(state, sigma)?;
    let chi = phase_indicators(state);
    multiphase_form(plan, &chi, &chi, sigma)
}

/// Per-phase signed field with `Σ_i ω_i = 0` in every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedMultiField {
    grid: Grid,
    phases: Vec<Vec<i8>>,
}

impl SignedMultiField {
    pub fn new(grid: Grid, phases: Vec<Vec<i8>>) -> Result<Self> {
        if phases.len() < 2 {
            return Err(Error::InvalidInput("need at least vapor and one grain".into()));
        }
        for p in &phases {
            if p.len() != grid.len() {
                return Err(Error::GridMismatch);
            }
            if p.iter().any(|v| !(-1..=1).contains(v)) {
                return Err(Error::InvalidInput("signed field value outside {-1, 0, 1}".into()));
            }
        }
        for c in 0..grid.len() {
            let s: i32 = phases.iter().map(|p| p[c] as i32).sum();
            if s != 0 {
                return Err(Error::InvalidInput(format!("phases do not sum to zero in cell {c}")));
            }
        }
        Ok(Self { grid, phases })
    }

    /// `after − before`, phase by phase.
    pub fn difference(after: &MultiPhaseState, before: &MultiPhaseState) -> Result<Self> {
        if after.grid() != before.grid() || after.grains() != before.grains() {
            return Err(Error::GridMismatch);
        }
        let mut phases = vec![vec![0i8; after.grid().len()]; after.grains() + 1];
        for (c, (&a, &b)) in after.labels().iter().zip(before.labels()).enumerate() {
            if a != b {
                phases[a as usize][c] = 1;
                phases[b as usize][c] = -1;
            }
        }
        Ok(Self {
            grid: *after.grid(),
            phases,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn phases(&self) -> &[Vec<i8>] {
        &self.phases
    }

    fn as_f64(&self) -> Vec<Vec<f64>> {
        self.phases
            .iter()
            .map(|p| p.iter().map(|&v| v as f64).collect())
            .collect()
    }
}

/// `−E_h(ω)` on the process space; non-negative for admissible tensions.
pub fn dissipation_multiphase(
    plan: &HeatKernelPlan,
    omega: &SignedMultiField,
    sigma: &SurfaceTensionMatrix,
) -> Result<f64> {
    check_plan(plan, omega.grid())?;
    if omega.phases().len() != sigma.grains() + 1 {
        return Err(Error::InvalidTensions("phase count does not match the matrix".into()));
    }
    if omega.phases().iter().all(|p| p.iter().all(|&v| v == 0)) {
        return Ok(0.0);
    }
    let w = omega.as_f64();
    Ok(-multiphase_form(plan, &w, &w, sigma)?)
}

/// `L_h(φ, χ) = (2/√h) Σ_i ∫ χ_i φ_i` with `φ_i = G_h * Σ_j σ̂_ij χ⁰_j`.
pub fn linearized_energy_multiphase(
    plan: &HeatKernelPlan,
    previous: &MultiPhaseState,
    state: &MultiPhaseState,
    sigma: &SurfaceTensionMatrix,
) -> Result<f64> {
    check_plan(plan, state.grid())?;
    check_tensions(state, sigma)?;
    check_tensions(previous, sigma)?;
    Ok(2.0 * multiphase_form(plan, &phase_indicators(state), &phase_indicators(previous), sigma)?)
}

/// Two sides of an exact algebraic identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identity {
    pub lhs: f64,
    pub rhs: f64,
}

impl Identity {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

/// `E(χ) + D(χ−χ⁰) + ((2λ−1)/√h)∫χ = L_{λ,h}(G_h*χ⁰, χ) − E(χ⁰)`.
pub fn minimizing_movement_identity(
    plan: &HeatKernelPlan,
    previous: &PhaseField,
    chi: &PhaseField,
    lambda: f64,
) -> Result<Identity> {
    let h = plan.h();
    let phi = RealField::from_values(*chi.grid(), plan.convolve_values(&previous.as_f64())?)?;
    let lhs = energy_two_phase(plan, chi)?
        + dissipation_two_phase(plan, &SignedField::difference(chi, previous)?)?
        + (2.0 * lambda - 1.0) / h.sqrt() * chi.count() as f64 * chi.grid().cell_volume();
    let rhs = linearized_energy(&phi, chi, lambda, h)? - energy_two_phase(plan, previous)?;
    Ok(Identity { lhs, rhs })
}

/// `E(χ) + D(χ−χ⁰) − (1/√π)∫fχ = L_{½,h}(G_h*χ⁰, χ) − (1/√π)∫fχ − E(χ⁰)`.
pub fn minimizing_movement_identity_forced(
    plan: &HeatKernelPlan,
    previous: &PhaseField,
    chi: &PhaseField,
    force: &RealField,
) -> Result<Identity> {
    let work = forcing_integral(force, chi)?;
    let base = minimizing_movement_identity(plan, previous, chi, 0.5)?;
    Ok(Identity {
        lhs: base.lhs - work,
        rhs: base.rhs - work,
    })
}

/// `E(χ) − E(χ−χ⁰) = L_h(φ, χ) − E(χ⁰)`.
pub fn minimizing_movement_identity_multiphase(
    plan: &HeatKernelPlan,
    previous: &MultiPhaseState,
    state: &MultiPhaseState,
    sigma: &SurfaceTensionMatrix,
) -> Result<Identity> {
    let omega = SignedMultiField::difference(state, previous)?;
    let lhs = energy_multiphase(plan, state, sigma)? + dissipation_multiphase(plan, &omega, sigma)?;
    let rhs = linearized_energy_multiphase(plan, previous, state, sigma)? - energy_multiphase(plan, previous, sigma)?;
    Ok(Identity { lhs, rhs })
}

/// `(1/√π) ∫ f χ`.
fn forcing_integral(force: &RealField, chi: &PhaseField) -> Result<f64> {
    if force.grid() != chi.grid() {
        return Err(Error::GridMismatch);
    }
    let vals = force
        .values()
        .par_iter()
        .zip(chi.mask())
        .map(|(&f, &c)| if c { f } else { 0.0 });
    Ok(integral(chi.grid(), vals) / PI.sqrt())
}

fn good_iteration(kind: SchemeKind, lambda: Option<f64>) -> Option<bool> {
    match (kind, lambda) {
        (SchemeKind::VolumePreserving, Some(l)) => Some((l - 0.5).abs() < 0.25),
        // λ here equals 1 − 2λ of the two-phase scheme
        (SchemeKind::GrainGrowth, Some(l)) => Some(l.abs() < 0.5),
        _ => None,
    }
}

fn state_energy(plan: &HeatKernelPlan, config: &SchemeConfig, s: &State) -> Result<f64> {
    match s {
        State::TwoPhase(p) => energy_two_phase(plan, p),
        State::Multi(m) => energy_multiphase(plan, m, config.tensions.as_ref().ok_or_else(missing_tensions)?),
    }
}

fn missing_tensions() -> Error {
    Error::InvalidInput("grain growth needs surface tensions".into())
}

struct StepBalance {
    energy_after: f64,
    dissipation: f64,
    forcing_work: f64,
}

fn step_balance(
    plan: &HeatKernelPlan,
    config: &SchemeConfig,
    prev: &State,
    next: &State,
    n: usize,
) -> Result<StepBalance> {
    let energy_after = state_energy(plan, config, next)?;
    let (dissipation, forcing_work) = match (prev, next) {
        (State::TwoPhase(a), State::TwoPhase(b)) => {
            let d = dissipation_two_phase(plan, &SignedField::difference(b, a)?)?;
            let w = match (&config.force, config.kind) {
                (Some(force), SchemeKind::Forced) => {
                    let f = force.sample(&config.grid, n as f64 * config.h)?;
                    forcing_integral(&f, b)? - forcing_integral(&f, a)?
                }
                _ => 0.0,
            };
            (d, w)
        }
        (State::Multi(a), State::Multi(b)) => {
            let sigma = config.tensions.as_ref().ok_or_else(missing_tensions)?;
            (
                dissipation_multiphase(plan, &SignedMultiField::difference(b, a)?, sigma)?,
                0.0,
            )
        }
        _ => return Err(Error::InvalidInput("state kinds differ between steps".into())),
    };
    Ok(StepBalance {
        energy_after,
        dissipation,
        forcing_work,
    })
}

/// Builds the audit record for one step.
pub fn step_record(
    plan: &HeatKernelPlan,
    config: &SchemeConfig,
    prev: &State,
    next: &State,
    lambda: Option<f64>,
    n: usize,
    center: &[f64; 3],
) -> Result<StepRecord> {
    let energy_before = state_energy(plan, config, prev)?;
    let b = step_balance(plan, config, prev, next, n)?;
    let solid = next.solid();
    let bounding = if solid.is_empty() {
        None
    } else {
        Some(bounding_radius(&solid, &center[..config.grid.dim()])?)
    };
    Ok(StepRecord {
        step: n,
        time: n as f64 * config.h,
        lambda,
        energy_before,
        energy_after: b.energy_after,
        dissipation: b.dissipation,
        forcing_work: b.forcing_work,
        ed_slack: energy_before - b.energy_after - b.dissipation + b.forcing_work,
        bounding_radius: bounding,
        good_iteration: good_iteration(config.kind, lambda),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerStep {
    pub step: usize,
    pub energy_after: f64,
    pub dissipation: f64,
    pub forcing_work: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerReport {
    pub initial_energy: f64,
    pub steps: Vec<LedgerStep>,
    /// `E_h(χ^N) + Σ dissipation`.
    pub cumulative_lhs: f64,
    /// `E_h(χ^0) + Σ forcing work`.
    pub cumulative_rhs: f64,
    /// Tolerance unit: `E_h(χ^0)`, or 1 when that vanishes.
    pub scale: f64,
    pub first_failure: Option<usize>,
    pub pass: bool,
}

impl LedgerReport {
    pub fn min_slack(&self) -> f64 {
        self.steps.iter().map(|s| s.slack).fold(f64::INFINITY, f64::min)
    }
}

/// Recomputes every per-step energy-dissipation inequality from the stored states.
pub fn ledger_check(traj: &Trajectory) -> Result<LedgerReport> {
    let config = &traj.config;
    let plan = HeatKernelPlan::new(config.grid, config.h)?;
    let energies: Vec<f64> = traj
        .states
        .par_iter()
        .map(|s| state_energy(&plan, config, s))
        .collect::<Result<_>>()?;
    let balances: Vec<StepBalance> = (1..traj.states.len())
        .into_par_iter()
        .map(|k| {
            step_balance(
                &plan,
                config,
                &traj.states[k - 1],
                &traj.states[k],
                config.first_step + k,
            )
        })
        .collect::<Result<_>>()?;
    let initial_energy = energies[0];
    let scale = if initial_energy > 0.0 { initial_energy } else { 1.0 };
    let tol = EXACT_TOLERANCE * scale;
    let mut steps = Vec::with_capacity(balances.len());
    let mut first_failure = None;
    let mut total_dissipation = 0.0;
    let mut total_work = 0.0;
    for (k, b) in balances.iter().enumerate() {
        let slack = energies[k] - b.energy_after - b.dissipation + b.forcing_work;
        if slack < -tol && first_failure.is_none() {
            first_failure = Some(config.first_step + k + 1);
        }
        total_dissipation += b.dissipation;
        total_work += b.forcing_work;
        steps.push(LedgerStep {
            step: config.first_step + k + 1,
            energy_after: b.energy_after,
            dissipation: b.dissipation,
            forcing_work: b.forcing_work,
            slack,
        });
    }
    let cumulative_lhs = energies.last().copied().unwrap_or(initial_energy) + total_dissipation;
    let cumulative_rhs = initial_energy + total_work;
    let cumulative_ok = cumulative_lhs <= cumulative_rhs + tol * steps.len().max(1) as f64;
    Ok(LedgerReport {
        initial_energy,
        pass: first_failure.is_none() && cumulative_ok,
        steps,
        cumulative_lhs,
        cumulative_rhs,
        scale,
        first_failure,
    })
}

/// Multiplier series of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSeries {
    pub h: f64,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPoint {
    pub h: f64,
    /// `h Σ_n (λ_n − ½)²`.
    pub m: f64,
    pub bad_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeScaling {
    pub points: Vec<ScalingPoint>,
    /// Least-squares slope of `log M` against `log h`; `None` if some `M` vanishes.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

/// Empirical `L²` scaling of the volume-preserving multipliers.
pub fn lagrange_scaling(series: &[LambdaSeries]) -> Result<LagrangeScaling> {
    if series.len() < 3 {
        return Err(Error::NotEnoughSamples {
            needed: 3,
            got: series.len(),
        });
    }
    let points: Vec<ScalingPoint> = series
        .iter()
        .map(|s| ScalingPoint {
            h: s.h,
            m: s.h * s.lambdas.iter().map(|l| (l - 0.5).powi(2)).sum::<f64>(),
            bad_iterations: s.lambdas.iter().filter(|l| (*l - 0.5).abs() >= 0.25).count(),
        })
        .collect();
    let (slope, intercept) = if points.iter().all(|p| p.m > 0.0) {
        let xs: Vec<f64> = points.iter().map(|p| p.h.ln()).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.m.ln()).collect();
        let (s, i) = least_squares(&xs, &ys);
        (Some(s), Some(i))
    } else {
        (None, None)
    };
    Ok(LagrangeScaling {
        points,
        slope,
        intercept,
    })
}

/// Slope and intercept of the least-squares line through `(xs, ys)`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// `C₀` with `∫₀^{C₀} G¹ = ¼`, i.e. `C₀ = 2 erf⁻¹(½)`.
pub fn good_iteration_depth() -> f64 {
    2.0 * erf_inv(0.5)
}

/// Growth constant `1/G¹(C₀)` of the good-iteration radius bound.
pub fn tightness_constant() -> f64 {
    let c0 = good_iteration_depth();
    (4.0 * PI).sqrt() * (c0 * c0 / 4.0).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TightnessStep {
    pub step: usize,
    pub radius: Option<f64>,
    pub bound: Option<f64>,
    pub good: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TightnessReport {
    pub constant: f64,
    pub initial_radius: Option<f64>,
    pub steps: Vec<TightnessStep>,
    /// Steps whose radius exceeded the bound (warnings, not failures).
    pub violations: Vec<usize>,
    pub bad_iterations: usize,
}

/// Checks the per-step radius growth bounds against the trajectory center.
///
/// Bounds get one cell of slack since radii are measured at cell centers.
pub fn tightness_monitor(traj: &Trajectory) -> Result<TightnessReport> {
    let config = &traj.config;
    let grid = config.grid;
    let dim = grid.dim();
    let dx = grid.max_dx();
    let c = tightness_constant();
    let sqrt_h = config.h.sqrt();
    let radii: Vec<Option<f64>> = traj
        .states
        .par_iter()
        .map(|s| {
            let solid = s.solid();
            if solid.is_empty() {
                Ok(None)
            } else {
                bounding_radius(&solid, &traj.center[..dim]).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let mut steps = Vec::new();
    let mut violations = Vec::new();
    let mut bad_iterations = 0;
    for n in 1..traj.states.len() {
        let lambda = traj.lambdas.get(n - 1).copied().flatten();
        let good = good_iteration(config.kind, lambda).unwrap_or(true);
        if !good {
            bad_iterations += 1;
        }
        let bound = radii[n - 1].map(|r| {
            dx + if !good {
                3.0 * r
            } else {
                match (config.kind, lambda) {
                    (SchemeKind::VolumePreserving, Some(l)) => r + c * sqrt_h * (l - 0.5).abs(),
                    (SchemeKind::GrainGrowth, Some(l)) => r + 0.5 * c * sqrt_h * l.abs(),
                    (SchemeKind::Forced, _) => {
                        let f = config.force.as_ref().map_or(0.0, SpaceTimeForce::sup_norm);
                        r + c * config.h * f / (2.0 * PI.sqrt())
                    }
                    _ => r,
                }
            }
        });
        if let (Some(r), Some(b)) = (radii[n], bound) {
            if r > b {
                log::warn!("step {n}: radius {r:.5} exceeds growth bound {b:.5}");
                violations.push(n);
            }
        }
        steps.push(TightnessStep {
            step: n,
            radius: radii[n],
            bound,
            good,
        });
    }
    Ok(TightnessReport {
        constant: c,
        initial_radius: radii[0],
        steps,
        violations,
        bad_iterations,
    })
}

/// Smooth test vector field `ξ` sampled at cell centers, with its divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct TestVectorField {
    components: Vec<RealField>,
    divergence: RealField,
}

impl TestVectorField {
    pub fn new(components: Vec<RealField>, divergence: RealField) -> Result<Self> {
        let grid = *divergence.grid();
        if components.len() != grid.dim() || components.iter().any(|c| c.grid() != &grid) {
            return Err(Error::GridMismatch);
        }
        Ok(Self { components, divergence })
    }

    pub fn zero(grid: Grid) -> Self {
        Self {
            components: vec![RealField::zeros(grid); grid.dim()],
            divergence: RealField::zeros(grid),
        }
    }

    pub fn constant(grid: Grid, v: &[f64]) -> Result<Self> {
        if v.len() != grid.dim() {
            return Err(Error::InvalidInput(format!("expected {} components", grid.dim())));
        }
        Ok(Self {
            components: v.iter().map(|&c| RealField::constant(grid, c)).collect(),
            divergence: RealField::zeros(grid),
        })
    }

    /// `ξ(x) = (x − c) η(|x − c|)` with the periodic offset; `eta` returns `(η, η')`.
    pub fn radial(grid: Grid, center: &[f64], eta: impl Fn(f64) -> (f64, f64)) -> Result<Self> {
        grid.check_point(center)?;
        let d = grid.dim();
        let mut comps = vec![vec![0.0; grid.len()]; d];
        let mut div = vec![0.0; grid.len()];
        for idx in 0..grid.len() {
            let x = grid.cell_center(idx);
            let z = grid.periodic_delta(center, &x[..d]);
            let r = z[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
            let (e, de) = eta(r);
            for a in 0..d {
                comps[a][idx] = z[a] * e;
            }
            div[idx] = d as f64 * e + r * de;
        }
        Ok(Self {
            components: comps
                .into_iter()
                .map(|c| RealField::from_values(grid, c))
                .collect::<Result<_>>()?,
            divergence: RealField::from_values(grid, div)?,
        })
    }

    /// Radial field with Gaussian profile `η(r) = exp(−((r − R)/w)²)` around the sphere of radius `R`.
    pub fn radial_bump(grid: Grid, center: &[f64], radius: f64, width: f64) -> Result<Self> {
        Self::radial(grid, center, |r| {
            let s = (r - radius) / width;
            let e = (-s * s).exp();
            (e, -2.0 * s / width * e)
        })
    }

    pub fn grid(&self) -> &Grid {
        self.divergence.grid()
    }

    pub fn components(&self) -> &[RealField] {
        &self.components
    }

    pub fn divergence(&self) -> &RealField {
        &self.divergence
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(1/√h) ∫ ξ·(1−χ)∇G*χ − (1−χ)∇G*(ξχ) + (∇·ξ)(1−χ)G*χ + (1−χ)G*((∇·ξ)χ)`.
pub fn first_variation_energy(plan: &HeatKernelPlan, chi: &PhaseField, xi: &TestVectorField) -> Result<f64> {
    let grid = *chi.grid();
    check_plan(plan, &grid)?;
    if xi.grid() != &grid {
        return Err(Error::GridMismatch);
    }
    let c = chi.as_f64();
    let outside: Vec<f64> = c.iter().map(|v| 1.0 - v).collect();
    let div = xi.divergence().values();
    let mut density = vec![0.0; grid.len()];
    for (j, xj) in xi.components().iter().enumerate() {
        let grad = plan.grad_component_values(&c, j)?;
        let xc: Vec<f64> = xj.values().iter().zip(&c).map(|(a, b)| a * b).collect();
        let grad_xc = plan.grad_component_values(&xc, j)?;
        for k in 0..grid.len() {
            density[k] += outside[k] * (xj.get(k) * grad[k] - grad_xc[k]);
        }
    }
    let gc = plan.convolve_values(&c)?;
    let dc: Vec<f64> = div.iter().zip(&c).map(|(a, b)| a * b).collect();
    let gdc = plan.convolve_values(&dc)?;
    for k in 0..grid.len() {
        density[k] += outside[k] * (div[k] * gc[k] + gdc[k]);
    }
    Ok(integral(&grid, density.into_par_iter()) / plan.h().sqrt())
}

/// `(2/√h) ∫ χ ξ·∇G*ω + (∇·ξ) χ G*ω` for a weight `χ` and field `ω`.
fn transport_pairing(plan: &HeatKernelPlan, chi: &[f64], omega: &[f64], xi: &TestVectorField) -> Result<Vec<f64>> {
    let grid = plan.grid();
    let gw = plan.convolve_values(omega)?;
    let div = xi.divergence().values();
    let mut density: Vec<f64> = (0..grid.len()).map(|k| chi[k] * div[k] * gw[k]).collect();
    for (j, xj) in xi.components().iter().enumerate() {
        let grad = plan.grad_component_values(omega, j)?;
        for k in 0..grid.len() {
            density[k] += chi[k] * xj.get(k) * grad[k];
        }
    }
    Ok(density)
}

/// `δD_h(·−χ⁰)(χ¹, ξ) = (2/√h) ∫ χ¹ ξ·∇G*ω + (∇·ξ) χ¹ G*ω` with `ω = χ¹ − χ⁰`.
pub fn first_variation_dissipation(
    plan: &HeatKernelPlan,
    chi1: &PhaseField,
    chi0: &PhaseField,
    xi: &TestVectorField,
) -> Result<f64> {
    check_plan(plan, chi1.grid())?;
    if xi.grid() != chi1.grid() {
        return Err(Error::GridMismatch);
    }
    let omega = SignedField::difference(chi1, chi0)?;
    if omega.values().iter().all(|&v| v == 0) {
        return Ok(0.0);
    }
    let density = transport_pairing(plan, &chi1.as_f64(), &omega.as_f64(), xi)?;
    Ok(2.0 * integral(chi1.grid(), density.into_par_iter()) / plan.h().sqrt())
}

/// `(2/√h) Σ_ij σ̂_ij ∫ χ_i [ξ·∇G*w_j + (∇·ξ) G*w_j]`.
fn multiphase_variation(
    plan: &HeatKernelPlan,
    chi: &[Vec<f64>],
    w: &[Vec<f64>],
    sigma: &SurfaceTensionMatrix,
    xi: &TestVectorField,
) -> Result<f64> {
    let grid = *plan.grid();
    let m = chi.len();
    let mut total = vec![0.0; grid.len()];
    for (j, wj) in w.iter().enumerate().take(m) {
        if wj.iter().all(|&v| v == 0.0) {
            continue;
        }
        let weight: Vec<f64> = (0..grid.len())
            .map(|k| (0..m).map(|i| sigma.extended(i, j) * chi[i][k]).sum())
            .collect();
        let density = transport_pairing(plan, &weight, wj, xi)?;
        for k in 0..grid.len() {
            total[k] += density[k];
        }
    }
    Ok(2.0 * integral(&grid, total.into_par_iter()) / plan.h().sqrt())
}

/// First variation of the multiphase energy.
pub fn first_variation_energy_multiphase(
    plan: &HeatKernelPlan,
    state: &MultiPhaseState,
    sigma: &SurfaceTensionMatrix,
    xi: &TestVectorField,
) -> Result<f64> {
    check_plan(plan, state.grid())?;
    check_tensions(state, sigma)?;
    let chi = phase_indicators(state);
    multiphase_variation(plan, &chi, &chi, sigma, xi)
}

/// First variation of `E_h(· − χ⁰)` at `χ`.
pub fn first_variation_distance_multiphase(
    plan: &HeatKernelPlan,
    state: &MultiPhaseState,
    previous: &MultiPhaseState,
    sigma: &SurfaceTensionMatrix,
    xi: &TestVectorField,
) -> Result<f64> {
    check_plan(plan, state.grid())?;
    check_tensions(state, sigma)?;
    let omega = SignedMultiField::difference(state, previous)?;
    multiphase_variation(plan, &phase_indicators(state), &omega.as_f64(), sigma, xi)
}

/// One scheme step whose Euler-Lagrange residual is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum StepPair<'a> {
    Mbo {
        after: &'a PhaseField,
        before: &'a PhaseField,
    },
    VolumePreserving {
        after: &'a PhaseField,
        before: &'a PhaseField,
        lambda: f64,
    },
    /// `time` is the sampling time `nh` of the step.
    Forced {
        after: &'a PhaseField,
        before: &'a PhaseField,
        force: &'a SpaceTimeForce,
        time: f64,
    },
    GrainGrowth {
        after: &'a MultiPhaseState,
        before: &'a MultiPhaseState,
        lambda: f64,
        sigma: &'a SurfaceTensionMatrix,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElgResidual {
    pub energy_term: f64,
    pub dissipation_term: f64,
    pub constraint_term: f64,
    pub residual: f64,
    /// Whether re-running the scheme from `before` reproduces `after` (and `λ`);
    /// when false the residual has no meaning.
    pub from_scheme_step: bool,
}

/// Sum of the terms of the discrete Euler-Lagrange equation of one step.
pub fn euler_lagrange_residual(plan: &HeatKernelPlan, pair: StepPair<'_>, xi: &TestVectorField) -> Result<ElgResidual> {
    let sqrt_h = plan.h().sqrt();
    let (energy_term, dissipation_term, constraint_term, from_scheme_step) = match pair {
        StepPair::Mbo { after, before } | StepPair::VolumePreserving { after, before, .. } => {
            let (lambda, reproduced) = match pair {
                StepPair::VolumePreserving { lambda, .. } => {
                    let s = step_volume_preserving(plan, before)?;
                    (lambda, s.state == *after && s.lambda == lambda)
                }
                _ => (0.5, step_mbo(plan, before)? == *after),
            };
            let e = first_variation_energy(plan, after, xi)?;
            let d = first_variation_dissipation(plan, after, before, xi)?;
            let div = xi.divergence().values();
            let vol = integral(
                after.grid(),
                div.par_iter().zip(after.mask()).map(|(&v, &c)| if c { v } else { 0.0 }),
            );
            (e, d, (2.0 * lambda - 1.0) / sqrt_h * vol, reproduced)
        }
        StepPair::Forced {
            after,
            before,
            force,
            time,
        } => {
            let grid = *after.grid();
            let f = force.sample(&grid, time)?;
            let reproduced = step_forced(plan, before, &f)? == *after;
            let grad_f = force.sample_gradient(&grid, time)?;
            let div = xi.divergence().values();
            let vals = (0..grid.len()).into_par_iter().map(|k| {
                if !after.get(k) {
                    return 0.0;
                }
                let xk: Vec<f64> = xi.components().iter().map(|c| c.get(k)).collect();
                let gk: Vec<f64> = grad_f.iter().map(|c| c.get(k)).collect();
                f.get(k) * div[k] + dot(&xk, &gk)
            });
            let work = integral(&grid, vals) / PI.sqrt();
            let e = first_variation_energy(plan, after, xi)?;
            let d = first_variation_dissipation(plan, after, before, xi)?;
            (e, d, -work, reproduced)
        }
        StepPair::GrainGrowth {
            after,
            before,
            lambda,
            sigma,
        } => {
            let s = step_grain_growth(plan, before, sigma)?;
            let reproduced = s.state == *after && s.lambda == lambda;
            let e = first_variation_energy_multiphase(plan, after, sigma, xi)?;
            let d = first_variation_distance_multiphase(plan, after, before, sigma, xi)?;
            let div = xi.divergence().values();
            let solid = integral(
                after.grid(),
                div.par_iter()
                    .zip(after.labels())
                    .map(|(&v, &l)| if l != 0 { v } else { 0.0 }),
            );
            (e, -d, -2.0 * lambda / sqrt_h * solid, reproduced)
        }
    };
    if !from_scheme_step {
        log::warn!("Euler-Lagrange residual requested for a pair that is not a scheme step");
    }
    Ok(ElgResidual {
        energy_term,
        dissipation_term,
        constraint_term,
        residual: energy_term + dissipation_term + constraint_term,
        from_scheme_step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// `E_h(χ) ≥ (√h₀/(√h+√h₀))^{d+1} E_{h₀}(χ)` for `0 < h ≤ h₀`.
pub fn approx_monotonicity_check(chi: &PhaseField, h: f64, h0: f64) -> Result<MonotonicityCheck> {
    if !(h > 0.0 && h <= h0) {
        return Err(Error::InvalidInput(format!("need 0 < h <= h0, got h = {h}, h0 = {h0}")));
    }
    let grid = *chi.grid();
    let lhs = energy_two_phase(&HeatKernelPlan::new(grid, h)?, chi)?;
    let e0 = energy_two_phase(&HeatKernelPlan::new(grid, h0)?, chi)?;
    let factor = (h0.sqrt() / (h.sqrt() + h0.sqrt())).powi(grid.dim() as i32 + 1);
    let rhs = factor * e0;
    Ok(MonotonicityCheck {
        lhs,
        rhs,
        pass: lhs >= rhs * (1.0 - 1e-6),
    })
}

//! Time-stepping schemes: plain MBO, volume-preserving, forced, and
//! multiphase grain growth with a vapor phase.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::diagnostics::{self, StepRecord};
use crate::error::{Error, Result};
use crate::grid::{Grid, MultiPhaseState, PhaseField, RealField};
use crate::kernel::HeatKernelPlan;
use crate::threshold::{select_bottom_cells, select_top_cells};

/// Pairwise grain tensions with the solid-vapor tension normalized to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceTensionMatrix {
    grains: usize,
    sigma: Vec<f64>,
    extended: Vec<f64>,
    margin: Option<f64>,
    extended_margin: f64,
}

impl SurfaceTensionMatrix {
    /// Validates and stores `sigma` (row-major, `grains × grains`).
    pub fn new(grains: usize, sigma: Vec<f64>) -> Result<Self> {
        if grains == 0 || grains > u8::MAX as usize {
            return Err(Error::InvalidTensions(format!(
                "grain count must be in 1..=255, got {grains}"
            )));
        }
        if sigma.len() != grains * grains {
            return Err(Error::InvalidTensions(format!(
                "expected {} entries for {grains} grains, got {}",
                grains * grains,
                sigma.len()
            )));
        }
        if let Some(v) = sigma.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidTensions(format!("non-finite entry {v}")));
        }
        let at = |i: usize, j: usize| sigma[i * grains + j];
        for i in 0..grains {
            if at(i, i) != 0.0 {
                return Err(Error::InvalidTensions(format!(
                    "sigma_{0}{0} = {1} must vanish",
                    i + 1,
                    at(i, i)
                )));
            }
            for j in 0..grains {
                if i == j {
                    continue;
                }
                if at(i, j) != at(j, i) {
                    return Err(Error::InvalidTensions(format!(
                        "sigma_{}{} = {} differs from sigma_{}{} = {}",
                        i + 1,
                        j + 1,
                        at(i, j),
                        j + 1,
                        i + 1,
                        at(j, i)
                    )));
                }
                if at(i, j) <= 0.0 {
                    return Err(Error::InvalidTensions(format!(
                        "sigma_{}{} = {} must be positive",
                        i + 1,
                        j + 1,
                        at(i, j)
                    )));
                }
                if at(i, j) >= 2.0 {
                    return Err(Error::InvalidTensions(format!(
                        "sigma_{}{} = {} violates sigma_ij < 2 (twice the normalized vapor tension)",
                        i + 1,
                        j + 1,
                        at(i, j)
                    )));
                }
            }
        }
        for i in 0..grains {
            for j in 0..grains {
                for k in 0..grains {
                    if i != j && j != k && i != k && at(i, j) >= at(i, k) + at(k, j) {
                        return Err(Error::InvalidTensions(format!(
                            "triangle inequality fails: sigma_{}{} = {} >= sigma_{}{} + sigma_{}{} = {}",
                            i + 1,
                            j + 1,
                            at(i, j),
                            i + 1,
                            k + 1,
                            k + 1,
                            j + 1,
                            at(i, k) + at(k, j)
                        )));
                    }
                }
            }
        }
        let margin = if grains >= 2 {
            let top = largest_mean_zero_eigenvalue(grains, &sigma);
            if top >= 0.0 {
                return Err(Error::InvalidTensions(format!(
                    "sigma is not negative definite on mean-zero vectors (largest eigenvalue {top:.6e})"
                )));
            }
            Some(-top)
        } else {
            None
        };
        let m = grains + 1;
        let mut extended = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                extended[i * m + j] = match (i, j) {
                    (0, 0) => 0.0,
                    (0, _) | (_, 0) => 1.0,
                    _ => at(i - 1, j - 1),
                };
            }
        }
        let top = largest_mean_zero_eigenvalue(m, &extended);
        if top >= 0.0 {
            return Err(Error::InvalidTensions(format!(
                "extended matrix is not negative definite on mean-zero vectors (largest eigenvalue {top:.6e})"
            )));
        }
        Ok(Self {
            grains,
            sigma,
            extended,
            margin,
            extended_margin: -top,
        })
    }

    /// `σ_ij = 1` for all `i ≠ j`.
    pub fn equal(grains: usize) -> Result<Self> {
        let sigma = (0..grains * grains)
            .map(|k| if k / grains == k % grains { 0.0 } else { 1.0 })
            .collect();
        Self::new(grains, sigma)
    }

    pub fn grains(&self) -> usize {
        self.grains
    }

    /// `σ_ij` with grain labels `1..=P`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sigma[(i - 1) * self.grains + (j - 1)]
    }

    /// Entry of the extended matrix, labels `0..=P` with vapor `0`.
    pub fn extended(&self, i: usize, j: usize) -> f64 {
        self.extended[i * (self.grains + 1) + j]
    }

    /// `σ̲ > 0` with `σ ≤ -σ̲` on mean-zero vectors; `None` for a single grain.
    pub fn definiteness_margin(&self) -> Option<f64> {
        self.margin
    }

    /// Same margin for the extended matrix.
    pub fn extended_definiteness_margin(&self) -> f64 {
        self.extended_margin
    }
}

/// Largest eigenvalue of `m` restricted to the mean-zero subspace, via an
/// orthonormal Helmert basis.
fn largest_mean_zero_eigenvalue(size: usize, m: &[f64]) -> f64 {
    let mat = DMatrix::from_row_slice(size, size, m);
    let mut basis = DMatrix::zeros(size, size - 1);
    for k in 1..size {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            basis[(i, k - 1)] = 1.0 / norm;
        }
        basis[(k, k - 1)] = -(k as f64) / norm;
    }
    let reduced = basis.transpose() * mat * &basis;
    reduced.symmetric_eigen().eigenvalues.max()
}

/// Space-time forcing term `f(x, t)` with an analytic spatial gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum SpaceTimeForce {
    Constant(f64),
    /// `mean + amplitude · sin(2π m·x / side + omega t)`.
    Wave {
        mean: f64,
        amplitude: f64,
        mode: [i32; 3],
        omega: f64,
    },
}

impl SpaceTimeForce {
    pub fn value(&self, grid: &Grid, x: &[f64], t: f64) -> f64 {
        match *self {
            Self::Constant(c) => c,
            Self::Wave {
                mean,
                amplitude,
                mode,
                omega,
            } => mean + amplitude * wave_phase(grid, &mode, x, omega, t).sin(),
        }
    }

    pub fn gradient(&self, grid: &Grid, x: &[f64], t: f64) -> [f64; 3] {
        match *self {
            Self::Constant(_) => [0.0; 3],
            Self::Wave {
                amplitude, mode, omega, ..
            } => {
                let c = amplitude * wave_phase(grid, &mode, x, omega, t).cos();
                let mut g = [0.0; 3];
                for (a, gi) in g.iter_mut().enumerate().take(grid.dim()) {
                    *gi = c * 2.0 * PI * mode[a] as f64 / grid.side();
                }
                g
            }
        }
    }

    /// `f(·, t)` sampled at cell centers.
    pub fn sample(&self, grid: &Grid, t: f64) -> Result<RealField> {
        RealField::from_fn(*grid, |x| self.value(grid, x, t))
    }

    /// Components of `∇f(·, t)` at cell centers.
    pub fn sample_gradient(&self, grid: &Grid, t: f64) -> Result<Vec<RealField>> {
        (0..grid.dim())
            .map(|a| RealField::from_fn(*grid, |x| self.gradient(grid, x, t)[a]))
            .collect()
    }

    /// `sup |f|` over space and time.
    pub fn sup_norm(&self) -> f64 {
        match *self {
            Self::Constant(c) => c.abs(),
            Self::Wave { mean, amplitude, .. } => mean.abs() + amplitude.abs(),
        }
    }
}

fn wave_phase(grid: &Grid, mode: &[i32; 3], x: &[f64], omega: f64, t: f64) -> f64 {
    let dot: f64 = (0..grid.dim()).map(|a| mode[a] as f64 * x[a]).sum();
    2.0 * PI * dot / grid.side() + omega * t
}

/// One plain MBO step: `{G_h * χ > 1/2}`.
pub fn step_mbo(plan: &HeatKernelPlan, chi: &PhaseField) -> Result<PhaseField> {
    let phi = plan.convolve(chi)?;
    Ok(threshold_above(&phi, |_| 0.5))
}

/// Output of a volume-constrained step.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedStep<S> {
    pub state: S,
    pub lambda: f64,
}

/// One volume-preserving step: keep the `|χ|` cells with the largest `G_h * χ`.
pub fn step_volume_preserving(plan: &HeatKernelPlan, chi: &PhaseField) -> Result<ConstrainedStep<PhaseField>> {
    if chi.is_empty() {
        return Err(Error::DegeneratePhase("volume-preserving step needs a non-empty phase"));
    }
    if chi.is_full() {
        return Err(Error::DegeneratePhase("volume-preserving step needs a non-full phase"));
    }
    let phi = plan.convolve(chi)?;
    let sel = select_top_cells(&phi, chi.count())?;
    let lambda = sel.lambda.expect("non-empty target");
    Ok(ConstrainedStep {
        state: sel.mask,
        lambda,
    })
}

/// One forced step with the force already sampled at the new time level.
pub fn step_forced(plan: &HeatKernelPlan, chi: &PhaseField, force: &RealField) -> Result<PhaseField> {
    if force.grid() != chi.grid() {
        return Err(Error::GridMismatch);
    }
    let phi = plan.convolve(chi)?;
    let scale = plan.h().sqrt() / (2.0 * PI.sqrt());
    let f = force.values();
    Ok(threshold_above(&phi, |i| 0.5 - f[i] * scale))
}

fn threshold_above(phi: &RealField, cut: impl Fn(usize) -> f64 + Sync) -> PhaseField {
    let mask = phi.values().par_iter().enumerate().map(|(i, &v)| v > cut(i)).collect();
    PhaseField::from_mask(*phi.grid(), mask).expect("mask matches grid")
}

/// One grain-growth step with total solid volume preserved.
///
/// By linearity `φ_i − φ_0 = 1 − 2 G_h*χ_solid + Σ_j σ_ij G_h*χ_j`, which
/// needs `P + 1` convolutions and reduces to `1 − 2φ` for a single grain.
pub fn step_grain_growth(
    plan: &HeatKernelPlan,
    state: &MultiPhaseState,
    tensions: &SurfaceTensionMatrix,
) -> Result<ConstrainedStep<MultiPhaseState>> {
    let grid = *state.grid();
    if plan.grid() != &grid {
        return Err(Error::GridMismatch);
    }
    let grains = state.grains();
    if tensions.grains() != grains {
        return Err(Error::InvalidTensions(format!(
            "matrix is for {} grains, state has {grains}",
            tensions.grains()
        )));
    }
    let solid_count = state.solid_count();
    if solid_count == 0 {
        return Err(Error::DegeneratePhase("grain growth needs at least one solid cell"));
    }
    let fields: Vec<RealField> = (0..=grains)
        .into_par_iter()
        .map(|label| {
            if label == 0 {
                plan.convolve(&state.solid())
            } else {
                plan.convolve(&state.phase(label))
            }
        })
        .collect::<Result<_>>()?;
    let (solid_phi, grain_phi) = fields.split_first().expect("at least two fields");
    let (scores, winners): (Vec<f64>, Vec<u8>) = (0..grid.len())
        .into_par_iter()
        .map(|c| {
            let base = 1.0 - 2.0 * solid_phi.get(c);
            let mut best = f64::INFINITY;
            let mut arg = 1u8;
            for i in 1..=grains {
                let mut s = base;
                for (j, psi) in grain_phi.iter().enumerate() {
                    let sij = tensions.get(i, j + 1);
                    if sij != 0.0 {
                        s += sij * psi.get(c);
                    }
                }
                if s < best {
                    best = s;
                    arg = i as u8;
                }
            }
            (best, arg)
        })
        .unzip();
    let scores = RealField::from_values(grid, scores)?;
    let sel = select_bottom_cells(&scores, solid_count)?;
    let labels = winners
        .iter()
        .zip(sel.mask.mask())
        .map(|(&w, &keep)| if keep { w } else { 0 })
        .collect();
    Ok(ConstrainedStep {
        state: MultiPhaseState::new(grid, labels, grains)?,
        lambda: sel.lambda.expect("non-empty target"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    Mbo,
    VolumePreserving,
    Forced,
    GrainGrowth,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mbo => "mbo",
            Self::VolumePreserving => "volume_preserving",
            Self::Forced => "forced",
            Self::GrainGrowth => "grain_growth",
        }
    }

    pub fn is_multiphase(self) -> bool {
        self == Self::GrainGrowth
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mbo" => Ok(Self::Mbo),
            "volume_preserving" => Ok(Self::VolumePreserving),
            "forced" => Ok(Self::Forced),
            "grain_growth" => Ok(Self::GrainGrowth),
            other => Err(Error::InvalidInput(format!("unknown scheme '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    pub h: f64,
    pub steps: usize,
    pub grid: Grid,
    pub force: Option<SpaceTimeForce>,
    pub tensions: Option<SurfaceTensionMatrix>,
    /// Stop early once a step reproduces its input exactly.
    pub stop_on_repeat: bool,
    /// Evaluate energies and dissipations for every step.
    pub record_diagnostics: bool,
    /// Center for bounding radii; defaults to the centroid of the initial solid.
    pub center: Option<[f64; 3]>,
    /// Index of the initial state; step `k` of the run is global step
    /// `first_step + k` and samples the force at that time.
    pub first_step: usize,
}

impl SchemeConfig {
    pub fn new(kind: SchemeKind, grid: Grid, h: f64, steps: usize) -> Self {
        Self {
            kind,
            h,
            steps,
            grid,
            force: None,
            tensions: None,
            stop_on_repeat: true,
            record_diagnostics: true,
            center: None,
            first_step: 0,
        }
    }

    pub fn with_force(mut self, force: SpaceTimeForce) -> Self {
        self.force = Some(force);
        self
    }

    pub fn with_tensions(mut self, tensions: SurfaceTensionMatrix) -> Self {
        self.tensions = Some(tensions);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::InvalidInput(format!(
                "time step must be positive, got {}",
                self.h
            )));
        }
        match self.kind {
            SchemeKind::Forced if self.force.is_none() => {
                Err(Error::InvalidInput("forced scheme needs a force".into()))
            }
            SchemeKind::GrainGrowth if self.tensions.is_none() => {
                Err(Error::InvalidInput("grain growth needs surface tensions".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum State {
    TwoPhase(PhaseField),
    Multi(MultiPhaseState),
}

impl State {
    pub fn grid(&self) -> &Grid {
        match self {
            Self::TwoPhase(p) => p.grid(),
            Self::Multi(m) => m.grid(),
        }
    }

    /// Indicator of all non-vapor cells.
    pub fn solid(&self) -> PhaseField {
        match self {
            Self::TwoPhase(p) => p.clone(),
            Self::Multi(m) => m.solid(),
        }
    }

    pub fn as_two_phase(&self) -> Option<&PhaseField> {
        match self {
            Self::TwoPhase(p) => Some(p),
            Self::Multi(_) => None,
        }
    }

    pub fn as_multi(&self) -> Option<&MultiPhaseState> {
        match self {
            Self::Multi(m) => Some(m),
            Self::TwoPhase(_) => None,
        }
    }

    /// Cell labels, `0/1` for a two-phase state.
    pub fn labels(&self) -> Vec<u8> {
        match self {
            Self::TwoPhase(p) => p.mask().iter().map(|&b| b as u8).collect(),
            Self::Multi(m) => m.labels().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// The phase emptied (or filled the torus) at this step.
    Extinct {
        step: usize,
    },
    /// The step reproduced its input exactly.
    Pinned {
        step: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub config: SchemeConfig,
    pub states: Vec<State>,
    /// Realized threshold per step (`None` for schemes without one).
    pub lambdas: Vec<Option<f64>>,
    pub records: Vec<StepRecord>,
    pub status: RunStatus,
    pub center: [f64; 3],
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len())
            .map(|k| (self.config.first_step + k) as f64 * self.config.h)
            .collect()
    }

    pub fn last(&self) -> &State {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Iterates the configured scheme from `initial`.
pub fn run(config: &SchemeConfig, initial: State) -> Result<Trajectory> {
    config.validate()?;
    if initial.grid() != &config.grid {
        return Err(Error::GridMismatch);
    }
    match (&initial, config.kind.is_multiphase()) {
        (State::TwoPhase(_), true) => {
            return Err(Error::InvalidInput(
                "grain growth needs a multiphase initial state".into(),
            ))
        }
        (State::Multi(_), false) => {
            return Err(Error::InvalidInput(format!(
                "{} needs a two-phase initial state",
                config.kind.name()
            )))
        }
        _ => {}
    }
    let plan = HeatKernelPlan::new(config.grid, config.h)?;
    let center = match config.center {
        Some(c) => c,
        None => initial.solid().centroid().unwrap_or([0.0; 3]),
    };
    let mut traj = Trajectory {
        config: config.clone(),
        states: vec![initial],
        lambdas: Vec::new(),
        records: Vec::new(),
        status: RunStatus::Completed,
        center,
    };
    for n in config.first_step + 1..=config.first_step + config.steps {
        let prev = traj.last().clone();
        let (next, lambda) = advance(config, &plan, &prev, n)?;
        if config.record_diagnostics {
            let record = diagnostics::step_record(&plan, config, &prev, &next, lambda, n, &center)?;
            check_domain(&record, config);
            traj.records.push(record);
        }
        let repeated = next == prev;
        let extinct = match &next {
            State::TwoPhase(p) => p.is_empty() || p.is_full(),
            State::Multi(m) => m.solid_count() == 0,
        };
        traj.states.push(next);
        traj.lambdas.push(lambda);
        if extinct {
            traj.status = RunStatus::Extinct { step: n };
            break;
        }
        if repeated && config.stop_on_repeat {
            traj.status = RunStatus::Pinned { step: n };
            break;
        }
    }
    Ok(traj)
}

fn advance(config: &SchemeConfig, plan: &HeatKernelPlan, prev: &State, n: usize) -> Result<(State, Option<f64>)> {
    Ok(match (config.kind, prev) {
        (SchemeKind::Mbo, State::TwoPhase(chi)) => (State::TwoPhase(step_mbo(plan, chi)?), None),
        (SchemeKind::VolumePreserving, State::TwoPhase(chi)) => {
            let s = step_volume_preserving(plan, chi)?;
            (State::TwoPhase(s.state), Some(s.lambda))
        }
        (SchemeKind::Forced, State::TwoPhase(chi)) => {
            let force = config.force.as_ref().expect("validated");
            let f = force.sample(&config.grid, n as f64 * config.h)?;
            (State::TwoPhase(step_forced(plan, chi, &f)?), None)
        }
        (SchemeKind::GrainGrowth, State::Multi(m)) => {
            let s = step_grain_growth(plan, m, config.tensions.as_ref().expect("validated"))?;
            (State::Multi(s.state), Some(s.lambda))
        }
        _ => unreachable!("state kind checked before stepping"),
    })
}

/// Warns when the solid approaches the torus seam.
fn check_domain(record: &StepRecord, config: &SchemeConfig) {
    if let Some(r) = record.bounding_radius {
        if r > 0.4 * config.grid.side() {
            log::warn!(
                "step {}: bounding radius {r:.4} exceeds 40% of the side length; periodic images may interact",
                record.step
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{rasterize_ball, rasterize_slab, voronoi_labels};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize) -> Grid {
        Grid::square(n, 1.0).unwrap()
    }

    #[test]
    fn equal_tensions_are_admissible() {
        let s = SurfaceTensionMatrix::equal(3).unwrap();
        assert!((s.definiteness_margin().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(s.extended(0, 2), 1.0);
        assert_eq!(s.extended(2, 3), 1.0);
        assert_eq!(s.extended(0, 0), 0.0);
        assert!(s.extended_definiteness_margin() > 0.0);
    }

    #[test]
    fn single_grain_has_no_mean_zero_margin() {
        let s = SurfaceTensionMatrix::equal(1).unwrap();
        assert_eq!(s.definiteness_margin(), None);
        // extended [[0,1],[1,0]] on (1,-1)/√2 gives -1
        assert!((s.extended_definiteness_margin() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tension_violations_are_rejected() {
        let msg = |r: Result<SurfaceTensionMatrix>| match r {
            Err(Error::InvalidTensions(m)) => m,
            other => panic!("expected rejection, got {other:?}"),
        };
        assert!(msg(SurfaceTensionMatrix::new(2, vec![0.0, 1.0, 1.2, 0.0])).contains("differs"));
        assert!(msg(SurfaceTensionMatrix::new(2, vec![0.1, 1.0, 1.0, 0.0])).contains("vanish"));
        assert!(msg(SurfaceTensionMatrix::new(2, vec![0.0, -1.0, -1.0, 0.0])).contains("positive"));
        assert!(msg(SurfaceTensionMatrix::new(2, vec![0.0, 2.0, 2.0, 0.0])).contains("< 2"));
        let s = vec![0.0, 1.9, 0.5, 1.9, 0.0, 0.5, 0.5, 0.5, 0.0];
        assert!(msg(SurfaceTensionMatrix::new(3, s)).contains("triangle"));
        assert!(msg(SurfaceTensionMatrix::new(2, vec![0.0, 1.0])).contains("entries"));
    }

    #[test]
    fn trivial_mbo_states() {
        let g = unit(32);
        let plan = HeatKernelPlan::new(g, 1e-3).unwrap();
        assert!(step_mbo(&plan, &PhaseField::empty(g)).unwrap().is_empty());
        assert!(step_mbo(&plan, &PhaseField::full(g)).unwrap().is_full());
    }

    #[test]
    fn degenerate_volume_preserving_input() {
        let g = unit(16);
        let plan = HeatKernelPlan::new(g, 1e-2).unwrap();
        assert!(matches!(
            step_volume_preserving(&plan, &PhaseField::empty(g)),
            Err(Error::DegeneratePhase(_))
        ));
        assert!(matches!(
            step_volume_preserving(&plan, &PhaseField::full(g)),
            Err(Error::DegeneratePhase(_))
        ));
    }

    #[test]
    fn half_slab_is_a_volume_preserving_fixed_point() {
        let g = unit(64);
        let h = 1e-3;
        let plan = HeatKernelPlan::new(g, h).unwrap();
        let slab = rasterize_slab(&g, 1, 0.5, 0.5).unwrap();
        let s = step_volume_preserving(&plan, &slab).unwrap();
        assert_eq!(s.state, slab);
        // λ is the value in the innermost cell layer, half a cell from the interface
        let layer = g.dx(0) / 2.0 / (4.0 * PI * h).sqrt();
        assert!(s.lambda > 0.5 && s.lambda < 0.5 + layer, "{}", s.lambda);
    }

    #[test]
    fn zero_force_matches_plain_mbo() {
        let g = unit(64);
        let plan = HeatKernelPlan::new(g, 4e-4).unwrap();
        let ball = rasterize_ball(&g, &[0.45, 0.52], 0.2).unwrap();
        let f = RealField::zeros(g);
        assert_eq!(step_forced(&plan, &ball, &f).unwrap(), step_mbo(&plan, &ball).unwrap());
    }

    #[test]
    fn single_grain_reduces_to_volume_preserving() {
        let g = unit(64);
        let plan = HeatKernelPlan::new(g, 4e-4).unwrap();
        let chi = PhaseField::from_fn(g, |x| (x[0] - 0.4).powi(2) / 0.05 + (x[1] - 0.6).powi(2) / 0.02 < 1.0);
        let vp = step_volume_preserving(&plan, &chi).unwrap();
        let sigma = SurfaceTensionMatrix::equal(1).unwrap();
        let gg = step_grain_growth(&plan, &MultiPhaseState::from_phase(&chi), &sigma).unwrap();
        assert_eq!(gg.state.phase(1), vp.state);
        assert!((gg.lambda - (1.0 - 2.0 * vp.lambda)).abs() <= 1e-12);
    }

    #[test]
    fn all_solid_single_grain_is_unchanged() {
        let g = unit(16);
        let plan = HeatKernelPlan::new(g, 1e-2).unwrap();
        let state = MultiPhaseState::new(g, vec![1; g.len()], 1).unwrap();
        let sigma = SurfaceTensionMatrix::equal(1).unwrap();
        assert_eq!(step_grain_growth(&plan, &state, &sigma).unwrap().state, state);
    }

    #[test]
    fn grain_growth_rejects_empty_solid() {
        let g = unit(16);
        let plan = HeatKernelPlan::new(g, 1e-2).unwrap();
        let state = MultiPhaseState::new(g, vec![0; g.len()], 2).unwrap();
        let sigma = SurfaceTensionMatrix::equal(2).unwrap();
        assert!(matches!(
            step_grain_growth(&plan, &state, &sigma),
            Err(Error::DegeneratePhase(_))
        ));
    }

    #[test]
    fn grain_growth_preserves_solid_count() {
        let g = unit(64);
        let plan = HeatKernelPlan::new(g, 1e-3).unwrap();
        let seeds = vec![vec![0.3, 0.3], vec![0.7, 0.4], vec![0.5, 0.75]];
        let state = voronoi_labels(&g, &seeds, 0.1).unwrap();
        let sigma = SurfaceTensionMatrix::equal(3).unwrap();
        let mut s = state.clone();
        for _ in 0..5 {
            s = step_grain_growth(&plan, &s, &sigma).unwrap().state;
            assert_eq!(s.solid_count(), state.solid_count());
        }
    }

    #[test]
    fn run_with_zero_steps_keeps_initial_state() {
        let g = unit(32);
        let ball = rasterize_ball(&g, &[0.5, 0.5], 0.2).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::Mbo, g, 1e-3, 0);
        let t = run(&cfg, State::TwoPhase(ball.clone())).unwrap();
        assert_eq!(t.states, vec![State::TwoPhase(ball)]);
        assert!(t.records.is_empty());
        assert_eq!(t.status, RunStatus::Completed);
    }

    #[test]
    fn resumed_run_continues_the_forcing_clock() {
        let g = unit(64);
        let ball = rasterize_ball(&g, &[0.5, 0.5], 0.25).unwrap();
        let force = SpaceTimeForce::Wave {
            mean: 1.0,
            amplitude: 6.0,
            mode: [1, 0, 0],
            omega: 40.0,
        };
        let mut whole = SchemeConfig::new(SchemeKind::Forced, g, 1e-3, 8).with_force(force.clone());
        whole.stop_on_repeat = false;
        whole.center = Some([0.5, 0.5, 0.0]);
        let full = run(&whole, State::TwoPhase(ball)).unwrap();
        let mut tail = whole.clone();
        tail.steps = 3;
        tail.first_step = 5;
        let resumed = run(&tail, full.states[5].clone()).unwrap();
        assert_eq!(resumed.states[..], full.states[5..]);
        assert_eq!(resumed.records[0].step, 6);
        assert_eq!(resumed.records, full.records[5..]);
        assert_eq!(resumed.times()[0], full.times()[5]);
    }

    #[test]
    fn under_resolved_ball_pins() {
        let g = unit(64);
        let dx = g.dx(0);
        let ball = rasterize_ball(&g, &[0.5, 0.5], 0.2).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::Mbo, g, (0.5 * dx).powi(2), 50);
        let t = run(&cfg, State::TwoPhase(ball)).unwrap();
        assert!(
            matches!(t.status, RunStatus::Pinned { step } if step <= 5),
            "{:?}",
            t.status
        );
    }

    #[test]
    fn shrinking_ball_goes_extinct() {
        let g = unit(32);
        let ball = rasterize_ball(&g, &[0.5, 0.5], 0.1).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::Mbo, g, 2e-3, 100);
        let t = run(&cfg, State::TwoPhase(ball)).unwrap();
        assert!(matches!(t.status, RunStatus::Extinct { .. }), "{:?}", t.status);
        assert!(t.last().solid().is_empty());
    }

    #[test]
    fn run_rejects_mismatched_state_kind() {
        let g = unit(16);
        let ball = rasterize_ball(&g, &[0.5, 0.5], 0.2).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::GrainGrowth, g, 1e-3, 1)
            .with_tensions(SurfaceTensionMatrix::equal(1).unwrap());
        assert!(run(&cfg, State::TwoPhase(ball)).is_err());
        let cfg = SchemeConfig::new(SchemeKind::Forced, g, 1e-3, 1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wave_force_gradient_matches_finite_difference() {
        let g = unit(32);
        let f = SpaceTimeForce::Wave {
            mean: 1.0,
            amplitude: 0.5,
            mode: [1, 2, 0],
            omega: 3.0,
        };
        let x = [0.3, 0.7];
        let grad = f.gradient(&g, &x, 0.2);
        let eps = 1e-6;
        for a in 0..2 {
            let mut p = x;
            let mut m = x;
            p[a] += eps;
            m[a] -= eps;
            let fd = (f.value(&g, &p, 0.2) - f.value(&g, &m, 0.2)) / (2.0 * eps);
            assert!((fd - grad[a]).abs() < 1e-6);
        }
        assert_eq!(f.sup_norm(), 1.5);
    }

    fn random_blob(g: Grid, rng: &mut ChaCha8Rng) -> PhaseField {
        let c = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let r0 = rng.gen_range(0.12..0.25);
        PhaseField::from_fn(g, |x| {
            let (dx, dy) = (x[0] - c[0], x[1] - c[1]);
            let th = dy.atan2(dx);
            let r = r0 + a[0] * (2.0 * th).cos() + a[1] * (3.0 * th).sin() + a[2] * (5.0 * th).cos();
            dx.hypot(dy) < r
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn mbo_comparison_principle(seed in any::<u64>(), h in 2e-4f64..4e-3) {
            let g = unit(48);
            let plan = HeatKernelPlan::new(g, h).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let small = random_blob(g, &mut rng);
            let mut large = small.clone();
            for i in 0..g.len() {
                if rng.gen_bool(0.3) {
                    large.set(i, true);
                }
            }
            prop_assert!(step_mbo(&plan, &small).unwrap().is_subset_of(&step_mbo(&plan, &large).unwrap()));
        }

        #[test]
        fn steps_commute_with_shifts(seed in any::<u64>(), sx in -20isize..20, sy in -20isize..20) {
            let g = unit(48);
            let plan = HeatKernelPlan::new(g, 1e-3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chi = random_blob(g, &mut rng);
            let off = [sx, sy];
            prop_assert_eq!(step_mbo(&plan, &chi.shifted(&off)).unwrap(), step_mbo(&plan, &chi).unwrap().shifted(&off));
            let a = step_volume_preserving(&plan, &chi.shifted(&off)).unwrap();
            let b = step_volume_preserving(&plan, &chi).unwrap();
            prop_assert_eq!(a.lambda, b.lambda);
            // exact ties at the cut may be resolved differently after a shift
            prop_assert!(a.state.symmetric_difference(&b.state.shifted(&off)) <= 2 * tie_count(&plan, &chi, b.lambda));
            let force = SpaceTimeForce::Constant(2.0).sample(&g, 0.0).unwrap();
            prop_assert_eq!(
                step_forced(&plan, &chi.shifted(&off), &force).unwrap(),
                step_forced(&plan, &chi, &force).unwrap().shifted(&off)
            );
            let seeds = vec![vec![0.3, 0.35], vec![0.65, 0.4], vec![0.5, 0.7]];
            let m = voronoi_labels(&g, &seeds, 0.1).unwrap();
            let sigma = SurfaceTensionMatrix::equal(3).unwrap();
            let ga = step_grain_growth(&plan, &m.shifted(&off), &sigma).unwrap();
            let gb = step_grain_growth(&plan, &m, &sigma).unwrap();
            prop_assert_eq!(ga.lambda, gb.lambda);
            let moved = gb.state.shifted(&off);
            let differing = ga.state.labels().iter().zip(moved.labels()).filter(|(a, b)| a != b).count();
            prop_assert!(differing <= 2 * grain_tie_count(&plan, &m, &sigma, gb.lambda));
        }
    }

    fn tie_count(plan: &HeatKernelPlan, chi: &PhaseField, lambda: f64) -> usize {
        plan.convolve(chi)
            .unwrap()
            .values()
            .iter()
            .filter(|&&v| v == lambda)
            .count()
    }

    fn grain_tie_count(plan: &HeatKernelPlan, m: &MultiPhaseState, sigma: &SurfaceTensionMatrix, lambda: f64) -> usize {
        // cells whose score equals the cut, plus cells with a tied argmin
        let g = *m.grid();
        let solid = plan.convolve(&m.solid()).unwrap();
        let psi: Vec<RealField> = (1..=m.grains()).map(|l| plan.convolve(&m.phase(l)).unwrap()).collect();
        (0..g.len())
            .filter(|&c| {
                let s: Vec<f64> = (1..=m.grains())
                    .map(|i| {
                        let mut v = 1.0 - 2.0 * solid.get(c);
                        for (j, p) in psi.iter().enumerate() {
                            if sigma.get(i, j + 1) != 0.0 {
                                v += sigma.get(i, j + 1) * p.get(c);
                            }
                        }
                        v
                    })
                    .collect();
                let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
                min == lambda || s.iter().filter(|&&v| v == min).count() > 1
            })
            .count()
    }
}

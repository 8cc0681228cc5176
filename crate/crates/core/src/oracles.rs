//! Sharp-interface reference solutions.

use crate::error::{Error, Result};
use crate::grid::MultiPhaseState;

/// Default RK4 step for the ODE oracles.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Radius of a sphere moving by mean curvature, `√(R₀² − 2(d−1)t)`.
pub fn circle_mcf(r0: f64, t: f64, d: usize) -> Result<f64> {
    check_radius(r0)?;
    check_dim(d)?;
    let extinction = r0 * r0 / (2.0 * (d as f64 - 1.0));
    if t > extinction {
        return Err(Error::PastExtinction { t, extinction });
    }
    Ok((r0 * r0 - 2.0 * (d as f64 - 1.0) * t).max(0.0).sqrt())
}

fn check_radius(r: f64) -> Result<()> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidInput(format!("radius must be positive, got {r}")));
    }
    Ok(())
}

fn check_dim(d: usize) -> Result<()> {
    if !(2..=3).contains(&d) {
        return Err(Error::InvalidInput(format!("dimension must be 2 or 3, got {d}")));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidInput(format!("time must be non-negative, got {t}")));
    }
    Ok(())
}

fn rk4<const N: usize>(y: [f64; N], dt: f64, f: impl Fn(&[f64; N]) -> [f64; N]) -> [f64; N] {
    let add = |a: &[f64; N], b: &[f64; N], s: f64| {
        let mut out = *a;
        for i in 0..N {
            out[i] += s * b[i];
        }
        out
    };
    let k1 = f(&y);
    let k2 = f(&add(&y, &k1, dt / 2.0));
    let k3 = f(&add(&y, &k2, dt / 2.0));
    let k4 = f(&add(&y, &k3, dt));
    let mut out = y;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// State of the two-ball volume-preserving flow at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoBall {
    pub r1: f64,
    pub r2: f64,
    /// Time at which one ball vanished, if it did before the requested time.
    pub extinction: Option<f64>,
}

/// Two disjoint balls under `V = H − ⟨H⟩`.
///
/// Integrated in the volume variables `V_i = R_i^d`, whose sum is invariant and
/// whose right-hand side stays bounded up to extinction. After one ball
/// vanishes the survivor is stationary.
pub fn two_ball_vp(r10: f64, r20: f64, t: f64, d: usize) -> Result<TwoBall> {
    two_ball_vp_with_step(r10, r20, t, d, DEFAULT_STEP)
}

pub fn two_ball_vp_with_step(r10: f64, r20: f64, t: f64, d: usize, dt: f64) -> Result<TwoBall> {
    check_radius(r10)?;
    check_radius(r20)?;
    check_dim(d)?;
    check_time(t)?;
    let df = d as f64;
    let rhs = move |v: &[f64; 2]| {
        let r = [v[0].max(0.0).powf(1.0 / df), v[1].max(0.0).powf(1.0 / df)];
        let mean = (df - 1.0) * (r[0].powi(d as i32 - 2) + r[1].powi(d as i32 - 2))
            / (r[0].powi(d as i32 - 1) + r[1].powi(d as i32 - 1));
        // V_i' = d R_i^{d-1} (−(d−1)/R_i + ⟨H⟩)
        let mut out = [0.0; 2];
        for i in 0..2 {
            out[i] = df * (-(df - 1.0) * r[i].powi(d as i32 - 2) + mean * r[i].powi(d as i32 - 1));
        }
        out
    };
    let total = r10.powi(d as i32) + r20.powi(d as i32);
    let mut v = [r10.powi(d as i32), r20.powi(d as i32)];
    let mut time = 0.0;
    if r10 != r20 {
        while time < t {
            let step = dt.min(t - time);
            let next = rk4(v, step, rhs);
            if next[0] <= 0.0 || next[1] <= 0.0 {
                // locate the vanishing time inside this step by bisection
                let k = if next[0] <= 0.0 { 0 } else { 1 };
                let (mut lo, mut hi) = (0.0, step);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if rk4(v, mid, rhs)[k] > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let extinction = time + 0.5 * (lo + hi);
                let survivor = total.powf(1.0 / df);
                let (r1, r2) = if k == 0 { (0.0, survivor) } else { (survivor, 0.0) };
                return Ok(TwoBall {
                    r1,
                    r2,
                    extinction: Some(extinction).filter(|&e| e <= t),
                });
            }
            v = next;
            time += step;
        }
    }
    Ok(TwoBall {
        r1: v[0].powf(1.0 / df),
        r2: v[1].powf(1.0 / df),
        extinction: None,
    })
}

/// Sampled radii of one or more tracked balls.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusTrace {
    pub times: Vec<f64>,
    /// `radii[k][i]` is the radius of ball `k` at `times[i]`.
    pub radii: Vec<Vec<f64>>,
}

/// Two-ball solution sampled at increasing `times`.
pub fn two_ball_trace(r10: f64, r20: f64, times: &[f64], d: usize) -> Result<RadiusTrace> {
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("sample times must be non-decreasing".into()));
    }
    let mut radii = vec![Vec::with_capacity(times.len()), Vec::with_capacity(times.len())];
    for &t in times {
        let s = two_ball_vp(r10, r20, t, d)?;
        radii[0].push(s.r1);
        radii[1].push(s.r2);
    }
    Ok(RadiusTrace {
        times: times.to_vec(),
        radii,
    })
}

/// Sphere under `V = H + f` with constant `f`, `R' = −(d−1)/R + f`.
pub fn forced_ball(r0: f64, f: f64, t: f64, d: usize) -> Result<f64> {
    forced_ball_with_step(r0, f, t, d, DEFAULT_STEP)
}

pub fn forced_ball_with_step(r0: f64, f: f64, t: f64, d: usize, dt: f64) -> Result<f64> {
    check_radius(r0)?;
    check_dim(d)?;
    check_time(t)?;
    let df = d as f64;
    if r0 == (df - 1.0) / f {
        return Ok(r0);
    }
    // V = R^d keeps the right-hand side bounded as R → 0
    let rhs = move |v: &[f64; 1]| {
        let r = v[0].max(0.0).powf(1.0 / df);
        [df * (-(df - 1.0) * r.powi(d as i32 - 2) + f * r.powi(d as i32 - 1))]
    };
    let mut v = [r0.powi(d as i32)];
    let mut time = 0.0;
    while time < t {
        let step = dt.min(t - time);
        let next = rk4(v, step, rhs);
        if next[0] <= 0.0 {
            let (mut lo, mut hi) = (0.0, step);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if rk4(v, mid, rhs)[0] > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Err(Error::PastExtinction {
                t,
                extinction: time + 0.5 * (lo + hi),
            });
        }
        v = next;
        time += step;
    }
    Ok(v[0].powf(1.0 / df))
}

/// Opening angles at a triple junction.
#[derive(Debug, Clone, PartialEq)]
pub struct JunctionAngles {
    pub point: [f64; 2],
    pub labels: [u8; 3],
    /// `angles[k]` is the opening angle (degrees) of the sector of `labels[k]`.
    pub angles: [f64; 3],
}

impl JunctionAngles {
    pub fn sum(&self) -> f64 {
        self.angles.iter().sum()
    }
}

/// Measures the angles at the single triple junction inside the periodic box
/// `|x − center|_∞ ≤ half_width` of a 2-d state.
///
/// Interfaces are sampled at the midpoints of faces between differently
/// labelled cells. The junction is the mean of the cell corners whose four
/// cells carry three distinct labels. Each interface direction is a total
/// least-squares line fit to its points outside a disk of radius `3 dx`
/// around the junction, oriented away from it.
pub fn junction_angles(state: &MultiPhaseState, center: &[f64], half_width: f64) -> Result<JunctionAngles> {
    let grid = *state.grid();
    if grid.dim() != 2 {
        return Err(Error::InvalidInput("junction angles need a 2-d state".into()));
    }
    grid.check_point(center)?;
    let [nx, ny] = [grid.cells_along(0), grid.cells_along(1)];
    let (dx, dy) = (grid.dx(0), grid.dx(1));
    let offset = |idx: usize| {
        let c = grid.cell_center(idx);
        let z = grid.periodic_delta(center, &c[..2]);
        [z[0], z[1]]
    };
    let inside = |z: [f64; 2]| z[0].abs() <= half_width && z[1].abs() <= half_width;
    let at = |i: usize, j: usize| grid.index(&[i % nx, j % ny]);

    let mut faces: Vec<([u8; 2], [f64; 2])> = Vec::new();
    let mut corners: Vec<([f64; 2], [u8; 4])> = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let a = at(i, j);
            let za = offset(a);
            if !inside(za) {
                continue;
            }
            let la = state.label(a);
            for (b, shift) in [(at(i + 1, j), [dx / 2.0, 0.0]), (at(i, j + 1), [0.0, dy / 2.0])] {
                let lb = state.label(b);
                if lb != la && inside(offset(b)) {
                    let key = if la < lb { [la, lb] } else { [lb, la] };
                    faces.push((key, [za[0] + shift[0], za[1] + shift[1]]));
                }
            }
            let block = [a, at(i + 1, j), at(i, j + 1), at(i + 1, j + 1)];
            if block.iter().all(|&c| inside(offset(c))) {
                let labels = block.map(|c| state.label(c));
                let mut distinct = labels.to_vec();
                distinct.sort_unstable();
                distinct.dedup();
                if distinct.len() >= 3 {
                    corners.push(([za[0] + dx / 2.0, za[1] + dy / 2.0], labels));
                }
            }
        }
    }
    if corners.is_empty() {
        return Err(Error::JunctionNotFound);
    }
    let clusters = cluster(&corners.iter().map(|c| c.0).collect::<Vec<_>>(), 3.0 * dx.max(dy));
    if clusters.len() > 1 {
        return Err(Error::MultipleJunctions(clusters.len()));
    }
    let members = &clusters[0];
    let mut p = [0.0; 2];
    let mut labels: Vec<u8> = Vec::new();
    for &m in members {
        p[0] += corners[m].0[0] / members.len() as f64;
        p[1] += corners[m].0[1] / members.len() as f64;
        labels.extend_from_slice(&corners[m].1);
    }
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != 3 {
        return Err(Error::InvalidInput(format!(
            "junction involves {} labels, expected 3",
            labels.len()
        )));
    }
    let exclusion = 3.0 * dx.max(dy);
    let pairs = [[labels[0], labels[1]], [labels[0], labels[2]], [labels[1], labels[2]]];
    let mut rays = Vec::with_capacity(3);
    for pair in pairs {
        let pts: Vec<[f64; 2]> = faces
            .iter()
            .filter(|(k, _)| *k == pair)
            .map(|(_, z)| [z[0] - p[0], z[1] - p[1]])
            .filter(|z| z[0].hypot(z[1]) > exclusion)
            .collect();
        if pts.len() < 2 {
            return Err(Error::NotEnoughSamples {
                needed: 2,
                got: pts.len(),
            });
        }
        rays.push((fit_ray(&pts), pair));
    }
    rays.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut angles = [0.0; 3];
    for k in 0..3 {
        let (t0, pa) = rays[k];
        let (t1, pb) = rays[(k + 1) % 3];
        let mut gap = t1 - t0;
        if gap <= 0.0 {
            gap += 2.0 * std::f64::consts::PI;
        }
        let shared = if pa.contains(&pb[0]) { pb[0] } else { pb[1] };
        let slot = labels.iter().position(|&l| l == shared).expect("label of the junction");
        angles[slot] = gap.to_degrees();
    }
    let point = [
        (center[0] + p[0]).rem_euclid(grid.side()),
        (center[1] + p[1]).rem_euclid(grid.side()),
    ];
    Ok(JunctionAngles {
        point,
        labels: [labels[0], labels[1], labels[2]],
        angles,
    })
}

/// Single-link clusters of points closer than `radius`.
fn cluster(points: &[[f64; 2]], radius: f64) -> Vec<Vec<usize>> {
    let mut assigned = vec![false; points.len()];
    let mut out = Vec::new();
    for start in 0..points.len() {
        if assigned[start] {
            continue;
        }
        assigned[start] = true;
        let mut members = vec![start];
        let mut k = 0;
        while k < members.len() {
            let a = points[members[k]];
            for (b, pb) in points.iter().enumerate() {
                if !assigned[b] && (a[0] - pb[0]).hypot(a[1] - pb[1]) <= radius {
                    assigned[b] = true;
                    members.push(b);
                }
            }
            k += 1;
        }
        out.push(members);
    }
    out
}

/// Direction angle of the least-squares line through the points, oriented
/// away from the origin.
fn fit_ray(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|z| z[0]).sum::<f64>() / n;
    let my = pts.iter().map(|z| z[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for z in pts {
        let (u, v) = (z[0] - mx, z[1] - my);
        sxx += u * u;
        sxy += u * v;
        syy += v * v;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (c, s) = (theta.cos(), theta.sin());
    if c * mx + s * my < 0.0 {
        theta + std::f64::consts::PI
    } else {
        theta
    }
    .rem_euclid(2.0 * std::f64::consts::PI)
}

//! Periodic uniform grids and the fields that live on them.
//!
//! Cells are stored row-major with the x axis fastest:
//! `index = i0 + n0 * (i1 + n1 * i2)`. Every integral over the torus is a
//! cell sum multiplied by [`Grid::cell_volume`].

use crate::error::{Error, Result};

/// Smallest admissible number of cells per axis.
pub const MIN_CELLS_PER_AXIS: usize = 8;

/// A uniform periodic grid on the torus `[0, side)^dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dim: usize,
    n: [usize; 3],
    side: f64,
}

impl Grid {
    pub fn new(dim: usize, n: &[usize], side: f64) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension must be 2 or 3, got {dim}")));
        }
        if n.len() != dim {
            return Err(Error::InvalidGrid(format!(
                "expected {dim} cell counts, got {}",
                n.len()
            )));
        }
        if let Some(&bad) = n.iter().find(|&&k| k < MIN_CELLS_PER_AXIS) {
            return Err(Error::InvalidGrid(format!(
                "at least {MIN_CELLS_PER_AXIS} cells per axis required, got {bad}"
            )));
        }
        if !(side.is_finite() && side > 0.0) {
            return Err(Error::InvalidGrid(format!("side length must be positive, got {side}")));
        }
        let mut cells = [1; 3];
        cells[..dim].copy_from_slice(n);
        Ok(Self { dim, n: cells, side })
    }

    /// `n x n` cells on the square torus of the given side length.
    pub fn square(n: usize, side: f64) -> Result<Self> {
        Self::new(2, &[n, n], side)
    }

    pub fn cube(n: usize, side: f64) -> Result<Self> {
        Self::new(3, &[n, n, n], side)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    /// Cell counts per axis (length `dim`).
    pub fn shape(&self) -> &[usize] {
        &self.n[..self.dim]
    }

    pub fn cells_along(&self, axis: usize) -> usize {
        self.n[axis]
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self, axis: usize) -> f64 {
        self.side / self.n[axis] as f64
    }

    /// Largest spacing over all axes.
    pub fn max_dx(&self) -> f64 {
        (0..self.dim).map(|a| self.dx(a)).fold(0.0, f64::max)
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.dx(a)).product()
    }

    pub fn total_volume(&self) -> f64 {
        self.side.powi(self.dim as i32)
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        let mut idx = 0;
        for a in (0..self.dim).rev() {
            idx = idx * self.n[a] + coords[a];
        }
        idx
    }

    pub fn coords(&self, mut idx: usize) -> [usize; 3] {
        let mut c = [0; 3];
        for (a, slot) in c.iter_mut().enumerate().take(self.dim) {
            *slot = idx % self.n[a];
            idx /= self.n[a];
        }
        c
    }

    pub fn cell_center(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = (c[a] as f64 + 0.5) * self.dx(a);
        }
        x
    }

    /// Shortest periodic displacement `to - from`, each component in
    /// `[-side/2, side/2)`.
    pub fn periodic_delta(&self, from: &[f64], to: &[f64]) -> [f64; 3] {
        let mut d = [0.0; 3];
        for a in 0..self.dim {
            d[a] = wrap_centered(to[a] - from[a], self.side);
        }
        d
    }

    pub fn periodic_distance(&self, from: &[f64], to: &[f64]) -> f64 {
        self.periodic_delta(from, to).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "point has {} coordinates, grid is {}-d",
                p.len(),
                self.dim
            )));
        }
        if p.iter().any(|&x| !(x.is_finite() && (0.0..self.side).contains(&x))) {
            return Err(Error::OutsideTorus(format!("{p:?}")));
        }
        Ok(())
    }

    pub(crate) fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.dim {
            return Err(Error::InvalidAxis { axis, dim: self.dim });
        }
        Ok(())
    }

    /// Index of the cell reached from `idx` by moving `offset` cells along each axis.
    pub fn shifted_index(&self, idx: usize, offset: &[isize]) -> usize {
        let c = self.coords(idx);
        let mut out = [0usize; 3];
        for a in 0..self.dim {
            let n = self.n[a] as isize;
            out[a] = (c[a] as isize + offset[a]).rem_euclid(n) as usize;
        }
        self.index(&out[..self.dim])
    }
}

pub(crate) fn wrap_centered(v: f64, side: f64) -> f64 {
    let w = v - side * (v / side).round();
    if w >= 0.5 * side {
        w - side
    } else if w < -0.5 * side {
        w + side
    } else {
        w
    }
}

fn shift_vec<T: Copy>(grid: &Grid, data: &[T], offset: &[isize]) -> Vec<T> {
    let mut out = data.to_vec();
    for (idx, &v) in data.iter().enumerate() {
        out[grid.shifted_index(idx, offset)] = v;
    }
    out
}

/// Indicator of a single phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseField {
    grid: Grid,
    mask: Vec<bool>,
}

impl PhaseField {
    pub fn empty(grid: Grid) -> Self {
        Self {
            grid,
            mask: vec![false; grid.len()],
        }
    }

    pub fn full(grid: Grid) -> Self {
        Self {
            grid,
            mask: vec![true; grid.len()],
        }
    }

    pub fn from_mask(grid: Grid, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "mask has {} cells, grid has {}",
                mask.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, mask })
    }

    /// Sets each cell from a predicate on its center.
    pub fn from_fn(grid: Grid, mut inside: impl FnMut(&[f64]) -> bool) -> Self {
        let mask = (0..grid.len())
            .map(|i| inside(&grid.cell_center(i)[..grid.dim()]))
            .collect();
        Self { grid, mask }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    pub fn set(&mut self, idx: usize, value: bool) {
        self.mask[idx] = value;
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self {
            grid: self.grid,
            mask: self.mask.iter().map(|&b| !b).collect(),
        }
    }

    pub fn shifted(&self, offset: &[isize]) -> Self {
        Self {
            grid: self.grid,
            mask: shift_vec(&self.grid, &self.mask, offset),
        }
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Number of cells where the two fields differ.
    pub fn symmetric_difference(&self, other: &Self) -> usize {
        self.mask.iter().zip(&other.mask).filter(|(a, b)| a != b).count()
    }

    /// Periodic centroid: circular mean per axis, refined by averaging the
    /// shortest displacements from it.
    pub fn centroid(&self) -> Result<[f64; 3]> {
        if self.is_empty() {
            return Err(Error::EmptyPhase);
        }
        let g = &self.grid;
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut sums = [(0.0f64, 0.0f64); 3];
        for (i, _) in self.mask.iter().enumerate().filter(|(_, &b)| b) {
            let x = g.cell_center(i);
            for a in 0..g.dim() {
                let th = two_pi * x[a] / g.side();
                sums[a].0 += th.cos();
                sums[a].1 += th.sin();
            }
        }
        let mut c = [0.0; 3];
        for a in 0..g.dim() {
            let th = sums[a].1.atan2(sums[a].0);
            c[a] = (th / two_pi * g.side()).rem_euclid(g.side());
        }
        let mut acc = [0.0; 3];
        let count = self.count() as f64;
        for (i, _) in self.mask.iter().enumerate().filter(|(_, &b)| b) {
            let d = g.periodic_delta(&c, &g.cell_center(i));
            for a in 0..g.dim() {
                acc[a] += d[a];
            }
        }
        for a in 0..g.dim() {
            c[a] = (c[a] + acc[a] / count).rem_euclid(g.side());
        }
        Ok(c)
    }
}

/// Real-valued grid function with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RealField {
    grid: Grid,
    values: Vec<f64>,
}

impl RealField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "field has {} values, grid has {}",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite field value".into()));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_values_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(&grid.cell_center(i)[..grid.dim()])).collect();
        Self::from_values(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn shifted(&self, offset: &[isize]) -> Self {
        Self {
            grid: self.grid,
            values: shift_vec(&self.grid, &self.values, offset),
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| -v).collect(),
        }
    }

    /// Cell sum times cell volume.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Polycrystal state: label 0 is vapor, labels `1..=grains` are grains.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPhaseState {
    grid: Grid,
    labels: Vec<u8>,
    grains: usize,
}

impl MultiPhaseState {
    pub fn new(grid: Grid, labels: Vec<u8>, grains: usize) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "label field has {} cells, grid has {}",
                labels.len(),
                grid.len()
            )));
        }
        if grains == 0 || grains > u8::MAX as usize {
            return Err(Error::InvalidInput(format!(
                "grain count must be in 1..=255, got {grains}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > grains) {
            return Err(Error::InvalidInput(format!("label {bad} exceeds grain count {grains}")));
        }
        Ok(Self { grid, labels, grains })
    }

    /// Single grain occupying the set of `field`, vapor elsewhere.
    pub fn from_phase(field: &PhaseField) -> Self {
        Self {
            grid: *field.grid(),
            labels: field.mask().iter().map(|&b| b as u8).collect(),
            grains: 1,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn grains(&self) -> usize {
        self.grains
    }

    pub fn label(&self, idx: usize) -> u8 {
        self.labels[idx]
    }

    /// Indicator of phase `label` (0 = vapor).
    pub fn phase(&self, label: usize) -> PhaseField {
        PhaseField {
            grid: self.grid,
            mask: self.labels.iter().map(|&l| l as usize == label).collect(),
        }
    }

    pub fn solid(&self) -> PhaseField {
        PhaseField {
            grid: self.grid,
            mask: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }

    pub fn solid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn solid_volume(&self) -> f64 {
        self.solid_count() as f64 * self.grid.cell_volume()
    }

    pub fn phase_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.grains + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn shifted(&self, offset: &[isize]) -> Self {
        Self {
            grid: self.grid,
            labels: shift_vec(&self.grid, &self.labels, offset),
            grains: self.grains,
        }
    }
}

/// Indicator of the periodic ball `{x : |x - center| < radius}` sampled at cell centers.
pub fn rasterize_ball(grid: &Grid, center: &[f64], radius: f64) -> Result<PhaseField> {
    grid.check_point(center)?;
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "radius must be non-negative, got {radius}"
        )));
    }
    let half_side = 0.5 * grid.side();
    if radius >= half_side {
        return Err(Error::RadiusTooLarge { radius, half_side });
    }
    Ok(PhaseField::from_fn(*grid, |x| {
        grid.periodic_distance(center, x) < radius
    }))
}

/// Slab `{x : (x[axis] - offset) mod side < thickness}`.
///
/// Its two interfaces sit at `offset` and `offset + thickness` (mod side).
pub fn rasterize_slab(grid: &Grid, axis: usize, offset: f64, thickness: f64) -> Result<PhaseField> {
    grid.check_axis(axis)?;
    let side = grid.side();
    if !(offset.is_finite() && (0.0..side).contains(&offset)) {
        return Err(Error::InvalidInput(format!("offset {offset} outside [0, {side})")));
    }
    if !(thickness.is_finite() && (0.0..=side).contains(&thickness)) {
        return Err(Error::InvalidInput(format!(
            "thickness {thickness} outside [0, {side}]"
        )));
    }
    Ok(PhaseField::from_fn(*grid, |x| {
        (x[axis] - offset).rem_euclid(side) < thickness
    }))
}

/// Periodic stand-in for the half space `{sign * (x[axis] - offset) > 0}`.
///
/// On the torus this is the half-torus slab bounded by the interfaces at
/// `offset` and `offset + side/2` (mod side). For `sign = +1` the slab is
/// `[offset, offset + side/2)`, for `sign = -1` it is `[offset - side/2, offset)`.
pub fn rasterize_half_space(grid: &Grid, axis: usize, offset: f64, sign: i32) -> Result<PhaseField> {
    let side = grid.side();
    match sign {
        1 => rasterize_slab(grid, axis, offset, 0.5 * side),
        -1 => {
            grid.check_axis(axis)?;
            if !(offset.is_finite() && (0.0..side).contains(&offset)) {
                return Err(Error::InvalidInput(format!("offset {offset} outside [0, {side})")));
            }
            rasterize_slab(grid, axis, (offset - 0.5 * side).rem_euclid(side), 0.5 * side)
        }
        _ => Err(Error::InvalidInput(format!("sign must be +1 or -1, got {sign}"))),
    }
}

/// Where the polycrystal lives; everything else is vapor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolidRegion {
    /// Cells within `margin` of the torus seam (any coordinate near 0 or side) are vapor.
    SeamBand { margin: f64 },
    /// Only cells inside the periodic ball are solid.
    Ball { center: [f64; 3], radius: f64 },
}

/// Voronoi polycrystal: solid cells take the label of the nearest seed
/// (periodic distance, ties to the lowest seed index), with a vapor band of
/// width `vapor_margin` around the torus seam.
pub fn voronoi_labels(grid: &Grid, seeds: &[Vec<f64>], vapor_margin: f64) -> Result<MultiPhaseState> {
    voronoi_labels_in(grid, seeds, SolidRegion::SeamBand { margin: vapor_margin })
}

pub fn voronoi_labels_in(grid: &Grid, seeds: &[Vec<f64>], region: SolidRegion) -> Result<MultiPhaseState> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("at least one seed required".into()));
    }
    if seeds.len() > u8::MAX as usize {
        return Err(Error::InvalidInput(format!(
            "at most 255 seeds supported, got {}",
            seeds.len()
        )));
    }
    for s in seeds {
        grid.check_point(s)?;
    }
    for (i, a) in seeds.iter().enumerate() {
        if seeds[..i].iter().any(|b| b == a) {
            return Err(Error::InvalidInput(format!("duplicate seed {a:?}")));
        }
    }
    match region {
        SolidRegion::SeamBand { margin } if !(margin.is_finite() && margin >= 0.0) => {
            return Err(Error::InvalidInput(format!(
                "vapor margin must be non-negative, got {margin}"
            )));
        }
        SolidRegion::Ball { center, radius } => {
            grid.check_point(&center[..grid.dim()])?;
            if radius >= 0.5 * grid.side() {
                return Err(Error::RadiusTooLarge {
                    radius,
                    half_side: 0.5 * grid.side(),
                });
            }
        }
        _ => {}
    }
    let dim = grid.dim();
    let side = grid.side();
    let labels = (0..grid.len())
        .map(|idx| {
            let x = grid.cell_center(idx);
            let solid = match region {
                SolidRegion::SeamBand { margin } => x[..dim].iter().all(|&c| c >= margin && side - c >= margin),
                SolidRegion::Ball { center, radius } => grid.periodic_distance(&center[..dim], &x[..dim]) < radius,
            };
            if !solid {
                return 0;
            }
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, s) in seeds.iter().enumerate() {
                let d = grid.periodic_distance(s, &x[..dim]);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            (best + 1) as u8
        })
        .collect();
    MultiPhaseState::new(*grid, labels, seeds.len())
}

/// `(#ones) * cell volume`.
pub fn volume(field: &PhaseField) -> f64 {
    field.count() as f64 * field.grid().cell_volume()
}

/// Largest periodic distance from `center` to an occupied cell center.
pub fn bounding_radius(field: &PhaseField, center: &[f64]) -> Result<f64> {
    let g = field.grid();
    if center.len() != g.dim() {
        return Err(Error::InvalidInput("center dimension mismatch".into()));
    }
    field
        .mask()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| g.periodic_distance(center, &g.cell_center(i)[..g.dim()]))
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.max(d))))
        .ok_or(Error::EmptyPhase)
}

/// Radius of the ball with the same volume as `field`.
pub fn equivalent_radius(field: &PhaseField) -> f64 {
    let v = volume(field);
    match field.grid().dim() {
        2 => (v / std::f64::consts::PI).sqrt(),
        _ => (3.0 * v / (4.0 * std::f64::consts::PI)).cbrt(),
    }
}

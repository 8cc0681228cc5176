//! Discrete heat semigroup on the periodic grid.
//!
//! The operator is defined by its Fourier multipliers `exp(-h |k|^2)` on the
//! discrete torus frequencies `k = 2π m / side`. Because the multiplier
//! factorises over axes, the same operator is a product of one-dimensional
//! circulant convolutions whose taps are the inverse transforms of the
//! per-axis multipliers. Convolutions are evaluated in that real-space form
//! with a fixed summation order per cell, so results are deterministic,
//! commute bit-exactly with integer-cell shifts and preserve exact mirror
//! ties along each axis.
//!
//! Taps are truncated only when the multiplier at the Nyquist frequency is
//! below `1e-16`; the dropped taps are then smaller than `1e-21` relative to
//! the central one. Under-resolved time steps use the full circulant.

use std::borrow::Cow;
use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, PhaseField, RealField};

/// Ratio `sqrt(h) / dx` below which the diffuse layer is under-resolved.
pub const RESOLUTION_GUIDANCE: f64 = 4.0;

const NYQUIST_NEGLIGIBLE: f64 = 1e-16;
const TRUNCATION_WIDTH: f64 = 14.0;

/// Anything sampled cell-by-cell on a grid.
pub trait GridSamples {
    fn grid(&self) -> &Grid;
    fn samples(&self) -> Cow<'_, [f64]>;
    /// Indicator inputs have their convolution clamped to `[0, 1]`.
    fn is_indicator(&self) -> bool {
        false
    }
}

impl GridSamples for PhaseField {
    fn grid(&self) -> &Grid {
        PhaseField::grid(self)
    }
    fn samples(&self) -> Cow<'_, [f64]> {
        Cow::Owned(self.as_f64())
    }
    fn is_indicator(&self) -> bool {
        true
    }
}

impl GridSamples for RealField {
    fn grid(&self) -> &Grid {
        RealField::grid(self)
    }
    fn samples(&self) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.values())
    }
}

#[derive(Debug, Clone)]
struct AxisKernel {
    n: usize,
    /// `exp(-h k^2)` indexed by DFT frequency index `0..n`.
    multipliers: Vec<f64>,
    /// Symmetric heat taps `K[0..=reach]`.
    heat: Vec<f64>,
    /// Antisymmetric derivative taps `D[0..=reach]` (`D[0] = 0`).
    deriv: Vec<f64>,
    /// Largest tap offset used; equals `n / 2` for the full circulant.
    reach: usize,
}

fn signed_frequency(f: usize, n: usize) -> i64 {
    if f <= n / 2 {
        f as i64
    } else {
        f as i64 - n as i64
    }
}

impl AxisKernel {
    fn new(n: usize, side: f64, h: f64) -> Self {
        let wave = |f: i64| 2.0 * PI * f as f64 / side;
        let multipliers: Vec<f64> = (0..n)
            .map(|f| {
                let k = wave(signed_frequency(f, n));
                (-h * k * k).exp()
            })
            .collect();
        let nyquist = n / 2;
        let k_nyq = wave(nyquist as i64);
        let dx = side / n as f64;
        let reach = if (-h * k_nyq * k_nyq).exp() < NYQUIST_NEGLIGIBLE {
            ((TRUNCATION_WIDTH * h.sqrt() / dx).ceil() as usize).min(nyquist)
        } else {
            nyquist
        };
        let even = n.is_multiple_of(2);
        // highest frequency paired with its negative
        let top_pair = if even { nyquist - 1 } else { nyquist };
        let phase = |f: usize, m: usize| 2.0 * PI * ((f * m) % n) as f64 / n as f64;
        let mut heat = Vec::with_capacity(reach + 1);
        let mut deriv = Vec::with_capacity(reach + 1);
        for m in 0..=reach {
            let mut s = 0.0;
            let mut d = 0.0;
            if even {
                // Nyquist term: real cosine, derivative multiplier zeroed
                s += multipliers[nyquist] * if m % 2 == 0 { 1.0 } else { -1.0 };
            }
            for f in (1..=top_pair).rev() {
                let k = wave(f as i64);
                let (sin, cos) = phase(f, m).sin_cos();
                s += 2.0 * multipliers[f] * cos;
                d += 2.0 * k * multipliers[f] * sin;
            }
            s += 1.0;
            heat.push(s / n as f64);
            deriv.push(-d / n as f64);
        }
        deriv[0] = 0.0;
        if even && reach == nyquist {
            deriv[nyquist] = 0.0;
        }
        Self {
            n,
            multipliers,
            heat,
            deriv,
            reach,
        }
    }

    /// Number of symmetric tap pairs and whether the lone `n/2` tap applies.
    fn pairs(&self) -> (usize, bool) {
        if self.n.is_multiple_of(2) && self.reach == self.n / 2 {
            (self.reach - 1, true)
        } else {
            (self.reach, false)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Taps {
    Heat,
    Derivative,
}

/// Immutable convolution plan for one grid and one time step `h`.
#[derive(Debug, Clone)]
pub struct HeatKernelPlan {
    grid: Grid,
    h: f64,
    axes: Vec<AxisKernel>,
}

/// Convolution of an indicator together with how far it strayed from `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Convolution {
    pub field: RealField,
    /// Largest excursion outside `[0, 1]` before clamping.
    pub clamp_excess: f64,
}

impl HeatKernelPlan {
    pub fn new(grid: Grid, h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {h}")));
        }
        let axes: Vec<AxisKernel> = (0..grid.dim())
            .map(|a| AxisKernel::new(grid.cells_along(a), grid.side(), h))
            .collect();
        let plan = Self { grid, h, axes };
        if !plan.is_resolved() {
            log::warn!(
                "sqrt(h) = {:.3e} is below {RESOLUTION_GUIDANCE} dx = {:.3e}; thresholding may pin",
                h.sqrt(),
                RESOLUTION_GUIDANCE * grid.max_dx()
            );
        }
        Ok(plan)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// `sqrt(h) >= 4 dx` on every axis.
    pub fn is_resolved(&self) -> bool {
        self.h.sqrt() >= RESOLUTION_GUIDANCE * self.grid.max_dx()
    }

    /// Multiplier `exp(-h |k|^2)` at DFT frequency indices `freq` (each in `0..n_axis`).
    pub fn multiplier(&self, freq: &[usize]) -> f64 {
        self.axes.iter().zip(freq).map(|(ax, &f)| ax.multipliers[f]).product()
    }

    /// One-dimensional heat taps along `axis`, offsets `0..=reach`.
    pub fn taps(&self, axis: usize) -> &[f64] {
        &self.axes[axis].heat
    }

    fn check<F: GridSamples + ?Sized>(&self, field: &F) -> Result<()> {
        if field.grid() != &self.grid {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    /// `G_h * field`. Indicator inputs are clamped to `[0, 1]`.
    pub fn convolve<F: GridSamples + ?Sized>(&self, field: &F) -> Result<RealField> {
        self.check(field)?;
        let mut out = self.apply(&field.samples(), None);
        if field.is_indicator() {
            out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        Ok(RealField::from_values_unchecked(self.grid, out))
    }

    /// Clamped convolution of an indicator along with its pre-clamp excursion.
    pub fn convolve_indicator(&self, field: &PhaseField) -> Result<Convolution> {
        self.check(field)?;
        let mut out = self.apply(&field.samples(), None);
        let mut excess = 0.0f64;
        for v in out.iter_mut() {
            excess = excess.max(-*v).max(*v - 1.0);
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Convolution {
            field: RealField::from_values_unchecked(self.grid, out),
            clamp_excess: excess,
        })
    }

    /// Unclamped convolution of raw cell values. Used for bilinear forms,
    /// where clamping would break symmetry.
    pub fn convolve_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.grid.len() {
            return Err(Error::GridMismatch);
        }
        Ok(self.apply(values, None))
    }

    /// Components of `∇G_h * field`.
    pub fn grad_convolve<F: GridSamples + ?Sized>(&self, field: &F) -> Result<Vec<RealField>> {
        self.check(field)?;
        let samples = field.samples();
        Ok((0..self.grid.dim())
            .map(|j| RealField::from_values_unchecked(self.grid, self.apply(&samples, Some(j))))
            .collect())
    }

    /// Unclamped `∂_j G_h * values`.
    pub fn grad_component_values(&self, values: &[f64], axis: usize) -> Result<Vec<f64>> {
        if values.len() != self.grid.len() {
            return Err(Error::GridMismatch);
        }
        self.grid.check_axis(axis)?;
        Ok(self.apply(values, Some(axis)))
    }

    fn apply(&self, input: &[f64], derivative_axis: Option<usize>) -> Vec<f64> {
        let mut current = input.to_vec();
        let mut scratch = vec![0.0; current.len()];
        let shape = self.grid.shape();
        for axis in 0..self.grid.dim() {
            let taps = if derivative_axis == Some(axis) {
                Taps::Derivative
            } else {
                Taps::Heat
            };
            let inner: usize = shape[..axis].iter().product();
            axis_pass(&self.axes[axis], taps, inner, &current, &mut scratch);
            std::mem::swap(&mut current, &mut scratch);
        }
        current
    }
}

/// Circulant convolution along one axis of data laid out as `[outer][len][inner]`.
fn axis_pass(kernel: &AxisKernel, taps: Taps, inner: usize, input: &[f64], out: &mut [f64]) {
    let len = kernel.n;
    let (pairs, lone) = kernel.pairs();
    let (coef, sign) = match taps {
        Taps::Heat => (&kernel.heat, 1.0),
        Taps::Derivative => (&kernel.deriv, -1.0),
    };
    if inner == 1 {
        out.par_chunks_mut(len)
            .zip(input.par_chunks(len))
            .for_each(|(row_out, row)| {
                // periodic padding so that every offset is a plain slice index
                let pad = pairs.max(usize::from(lone) * len / 2);
                let mut ext = Vec::with_capacity(len + 2 * pad);
                for t in 0..len + 2 * pad {
                    ext.push(row[(t + len * (pad / len + 1) - pad) % len]);
                }
                for (i, slot) in row_out.iter_mut().enumerate() {
                    let c = i + pad;
                    let mut acc = coef[0] * ext[c];
                    for m in 1..=pairs {
                        acc += coef[m] * (ext[c - m] + sign * ext[c + m]);
                    }
                    if lone {
                        acc += coef[len / 2] * ext[c + len / 2];
                    }
                    *slot = acc;
                }
            });
    } else {
        let block = len * inner;
        out.par_chunks_mut(inner).enumerate().for_each(|(row_idx, row_out)| {
            let o = row_idx / len;
            let i = row_idx % len;
            let base = o * block;
            let line = |k: usize| &input[base + k * inner..base + (k + 1) * inner];
            let center = line(i);
            for (slot, &v) in row_out.iter_mut().zip(center) {
                *slot = coef[0] * v;
            }
            for (m, &c) in coef.iter().enumerate().take(pairs + 1).skip(1) {
                let a = line((i + len - m) % len);
                let b = line((i + m) % len);
                for ((slot, &x), &y) in row_out.iter_mut().zip(a).zip(b) {
                    *slot += c * (x + sign * y);
                }
            }
            if lone {
                let a = line((i + len / 2) % len);
                let c = coef[len / 2];
                for (slot, &x) in row_out.iter_mut().zip(a) {
                    *slot += c * x;
                }
            }
        });
    }
}

/// One-dimensional heat kernel at time 1, `G^1(z) = (4π)^{-1/2} exp(-z^2/4)`.
pub fn heat_kernel_1d(z: f64) -> f64 {
    (-(z * z) / 4.0).exp() / (4.0 * PI).sqrt()
}

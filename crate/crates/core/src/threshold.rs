//! Exact-count threshold selection.
//!
//! The threshold of the volume-constrained schemes is realised as an order
//! statistic: the selected set has exactly the requested number of cells, and
//! cells whose score equals the cut value are admitted in ascending row-major
//! index order. This realises `{φ > λ} ⊂ Ω' ⊂ {φ ≥ λ}` with `|Ω'|` fixed.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::grid::{PhaseField, RealField};

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// The cut value; `None` when nothing is selected.
    pub lambda: Option<f64>,
    pub mask: PhaseField,
    pub target_cells: usize,
}

/// Selects the `target_cells` cells with the largest scores.
pub fn select_top_cells(scores: &RealField, target_cells: usize) -> Result<SelectionResult> {
    select(scores, target_cells, |a, b| {
        b.partial_cmp(&a).unwrap_or(Ordering::Equal)
    })
}

/// Selects the `target_cells` cells with the smallest scores.
pub fn select_bottom_cells(scores: &RealField, target_cells: usize) -> Result<SelectionResult> {
    select(scores, target_cells, |a, b| {
        a.partial_cmp(&b).unwrap_or(Ordering::Equal)
    })
}

fn select(scores: &RealField, target: usize, by_score: impl Fn(f64, f64) -> Ordering) -> Result<SelectionResult> {
    let grid = *scores.grid();
    let total = grid.len();
    if target > total {
        return Err(Error::TargetOutOfRange { target, total });
    }
    let values = scores.values();
    let mut mask = PhaseField::empty(grid);
    if target == 0 {
        return Ok(SelectionResult {
            lambda: None,
            mask,
            target_cells: 0,
        });
    }
    // strict total order: score first, then index; the selected set is unique
    let order = |a: &u32, b: &u32| by_score(values[*a as usize], values[*b as usize]).then(a.cmp(b));
    let mut idx: Vec<u32> = (0..total as u32).collect();
    let (chosen, pivot) = if target < total {
        let (head, pivot, _) = idx.select_nth_unstable_by(target - 1, order);
        (head.to_vec(), *pivot)
    } else {
        let last = *idx.iter().max_by(|a, b| order(a, b)).expect("non-empty grid");
        (idx.clone(), last)
    };
    for &i in &chosen {
        mask.set(i as usize, true);
    }
    mask.set(pivot as usize, true);
    Ok(SelectionResult {
        lambda: Some(values[pivot as usize]),
        mask,
        target_cells: target,
    })
}

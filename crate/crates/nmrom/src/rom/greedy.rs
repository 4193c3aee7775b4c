//! Greedy selection of collocation cells from state-snapshot modes.
//!
//! Modes come from the SVD of the training snapshots. The greedy loop
//! distributes the modes (and the points to add) uniformly over its
//! iterations; after the first iteration each new working vector is the
//! least-squares residual of its mode against the previously used modes,
//! fitted on the rows already selected. A cell's score sums the squared
//! working-vector entries over all channels; ties break toward the lowest
//! cell index.

use nalgebra::{DMatrix, DVector};

use crate::grid::Grid;
use crate::linalg::{pod, pseudo_inverse};
use crate::snapshots::SnapshotSet;
use crate::{Error, Result};

/// Selects `r_h` collocation cells for a training set. `forced` cells (for
/// example domain corners) are always included and count toward `r_h`.
pub fn select_magic_points(
    train: &SnapshotSet,
    n_modes: usize,
    forced: &[usize],
    r_h: usize,
) -> Result<Vec<usize>> {
    let grid = Grid::unit(train.nx(), train.ny())?;
    let n_cells = grid.n_cells();
    let channels = train.channels();
    if r_h > n_cells {
        return Err(Error::Argument(format!(
            "cannot select {r_h} cells on a grid of {n_cells}"
        )));
    }
    let mut selected: Vec<usize> = forced.to_vec();
    selected.sort_unstable();
    selected.dedup();
    if let Some(&bad) = selected.iter().find(|&&c| c >= n_cells) {
        return Err(Error::Index(format!("forced cell {bad} out of range")));
    }
    if selected.len() >= r_h {
        return Err(Error::Argument(format!(
            "{} forced cells leave no room in r_h = {r_h}",
            selected.len()
        )));
    }
    if n_modes == 0 {
        return Err(Error::Argument("need at least one mode".into()));
    }

    let basis = pod(&train.matrix(), n_modes.min(train.n_columns()))?;
    let modes = basis.modes;
    let n_modes = modes.ncols();

    let n_add = r_h - selected.len();
    let n_iters = n_modes.min(n_add);
    // distribute modes and points over the iterations, remainders first
    let modes_per_iter = split_evenly(n_modes, n_iters);
    let adds_per_iter = split_evenly(n_add, n_iters);

    let mut used_modes = 0usize;
    let mut is_selected = vec![false; n_cells];
    for &c in &selected {
        is_selected[c] = true;
    }

    for it in 0..n_iters {
        let n_ci = modes_per_iter[it];
        // working vectors for this iteration
        let mut working: Vec<DVector<f64>> = Vec::with_capacity(n_ci);
        if it == 0 {
            for q in 0..n_ci {
                working.push(modes.column(q).clone_owned());
            }
        } else {
            // least-squares fit of each new mode on the sampled rows of the
            // previously used modes
            let rows = sampled_rows(&selected, channels, n_cells);
            let sampled_basis = gather_rows(&modes.columns(0, used_modes).clone_owned(), &rows);
            let pinv = pseudo_inverse(&sampled_basis);
            for q in 0..n_ci {
                let mode = modes.column(used_modes + q).clone_owned();
                let sampled_mode = DVector::from_iterator(
                    rows.len(),
                    rows.iter().map(|&r| mode[r]),
                );
                let coeffs = &pinv * sampled_mode;
                let fit = modes.columns(0, used_modes) * coeffs;
                working.push(mode - fit);
            }
        }
        // score = squared entries summed over channels and working vectors
        for _ in 0..adds_per_iter[it] {
            let mut best_cell = usize::MAX;
            let mut best_score = f64::NEG_INFINITY;
            for cell in 0..n_cells {
                if is_selected[cell] {
                    continue;
                }
                let mut score = 0.0;
                for w in &working {
                    for ch in 0..channels {
                        let v = w[ch * n_cells + cell];
                        score += v * v;
                    }
                }
                if score > best_score {
                    best_score = score;
                    best_cell = cell;
                }
            }
            if best_cell == usize::MAX {
                break;
            }
            is_selected[best_cell] = true;
            selected.push(best_cell);
        }
        selected.sort_unstable();
        used_modes += n_ci;
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Splits `total` into `parts` nearly equal chunks, larger ones first.
fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts)
        .map(|i| base + usize::from(i < extra))
        .collect()
}

/// Row indices of all channels at the selected cells.
fn sampled_rows(cells: &[usize], channels: usize, n_cells: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(channels * cells.len());
    for ch in 0..channels {
        for &c in cells {
            rows.push(ch * n_cells + c);
        }
    }
    rows
}

fn gather_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (i, &r) in rows.iter().enumerate() {
        for c in 0..m.ncols() {
            out[(i, c)] = m[(r, c)];
        }
    }
    out
}

//! Structured orthogonal 2D grid, multi-channel cell fields, stencil
//! enumeration and the restriction operators used by hyper-reduction.
//!
//! Cells are indexed row-major (`iy * nx + ix`); fields store one contiguous
//! block per channel in that cell order. Every solver and network reshape in
//! the crate shares this layout.

use crate::{Error, Result};

/// Uniform structured grid on `[0, lx] x [0, ly]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::Argument(format!(
                "grid must be at least 3x3, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0 && ly > 0.0) {
            return Err(Error::Argument("domain extents must be positive".into()));
        }
        Ok(Self { nx, ny, lx, ly })
    }

    /// Unit square helper, the domain used by both benchmark problems.
    pub fn unit(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, 1.0, 1.0)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn lx(&self) -> f64 {
        self.lx
    }

    pub fn ly(&self) -> f64 {
        self.ly
    }

    /// Cell size along x.
    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    /// Cell size along y.
    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Cell volume (area in 2D).
    pub fn cell_volume(&self) -> f64 {
        self.hx() * self.hy()
    }

    #[inline]
    pub fn cell_index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny);
        iy * self.nx + ix
    }

    #[inline]
    pub fn cell_coords(&self, cell: usize) -> (usize, usize) {
        debug_assert!(cell < self.n_cells());
        (cell % self.nx, cell / self.nx)
    }

    /// Center of a cell in physical coordinates.
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (ix, iy) = self.cell_coords(cell);
        (
            (ix as f64 + 0.5) * self.hx(),
            (iy as f64 + 0.5) * self.hy(),
        )
    }
}

/// Multi-channel cell-centered state vector, channel-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    channels: usize,
    n_cells: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(channels: usize, n_cells: usize) -> Self {
        Self {
            channels,
            n_cells,
            values: vec![0.0; channels * n_cells],
        }
    }

    pub fn from_values(channels: usize, n_cells: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * n_cells {
            return Err(Error::Shape(format!(
                "field expects {} values ({} channels x {} cells), got {}",
                channels * n_cells,
                channels,
                n_cells,
                values.len()
            )));
        }
        Ok(Self {
            channels,
            n_cells,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, channel: usize, cell: usize) -> f64 {
        self.values[channel * self.n_cells + cell]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, cell: usize, value: f64) {
        self.values[channel * self.n_cells + cell] = value;
    }

    /// Contiguous slice of one channel, in cell order.
    pub fn channel(&self, channel: usize) -> &[f64] {
        &self.values[channel * self.n_cells..(channel + 1) * self.n_cells]
    }

    pub fn channel_mut(&mut self, channel: usize) -> &mut [f64] {
        &mut self.values[channel * self.n_cells..(channel + 1) * self.n_cells]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Which cell set a restriction gathers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestrictTarget {
    /// Collocation cells only (residual rows).
    Magic,
    /// Collocation cells plus the stencil cells needed to assemble them.
    Halo,
}

/// Restriction onto a submesh of collocation ("magic") cells and their
/// stencil halo.
///
/// `magic_points` and `halo` are sorted, unique cell indices with
/// `magic_points` a subset of `halo`.
#[derive(Debug, Clone)]
pub struct SubmeshProjector {
    magic_points: Vec<usize>,
    halo: Vec<usize>,
    layers: usize,
    n_cells: usize,
    /// For each grid cell, its position inside `halo`, or `usize::MAX`.
    halo_slot: Vec<usize>,
}

impl SubmeshProjector {
    pub fn magic_points(&self) -> &[usize] {
        &self.magic_points
    }

    pub fn halo(&self) -> &[usize] {
        &self.halo
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn n_magic(&self) -> usize {
        self.magic_points.len()
    }

    pub fn n_halo(&self) -> usize {
        self.halo.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Position of `cell` inside the halo ordering, if present.
    #[inline]
    pub fn halo_slot(&self, cell: usize) -> Option<usize> {
        let s = self.halo_slot[cell];
        (s != usize::MAX).then_some(s)
    }

    /// Zero-extension of a halo-restricted vector back to the full grid.
    pub fn embed(&self, restricted: &[f64], channels: usize) -> Result<Vec<f64>> {
        if restricted.len() != channels * self.halo.len() {
            return Err(Error::Shape(format!(
                "expected {} halo values, got {}",
                channels * self.halo.len(),
                restricted.len()
            )));
        }
        let mut full = vec![0.0; channels * self.n_cells];
        for ch in 0..channels {
            for (slot, &cell) in self.halo.iter().enumerate() {
                full[ch * self.n_cells + cell] = restricted[ch * self.halo.len() + slot];
            }
        }
        Ok(full)
    }

    /// Checks that every magic point's stencil of the given depth stays
    /// inside the halo.
    pub fn covers_stencils(&self, grid: &Grid, layers: usize) -> Result<()> {
        for &mp in &self.magic_points {
            for n in cell_neighbors(grid, mp, layers)? {
                if self.halo_slot(n).is_none() {
                    return Err(Error::Config(format!(
                        "halo does not cover the depth-{layers} stencil of cell {mp} (missing {n})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Face-adjacency neighborhood of a cell up to the given depth, clipped at
/// the boundary, sorted, without the cell itself.
///
/// Depth 1 gives the face neighbors (4 interior, 3 edge, 2 corner); depth 2
/// adds their face neighbors, the Manhattan-radius-2 diamond (12 interior).
pub fn cell_neighbors(grid: &Grid, cell: usize, layers: usize) -> Result<Vec<usize>> {
    if cell >= grid.n_cells() {
        return Err(Error::Index(format!(
            "cell {cell} out of range for {}x{} grid",
            grid.nx(),
            grid.ny()
        )));
    }
    if !(1..=2).contains(&layers) {
        return Err(Error::Argument(format!(
            "stencil depth must be 1 or 2, got {layers}"
        )));
    }
    let (cx, cy) = grid.cell_coords(cell);
    let (cx, cy) = (cx as i64, cy as i64);
    let (nx, ny) = (grid.nx() as i64, grid.ny() as i64);
    let radius = layers as i64;
    let mut out = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let manhattan = dx.abs() + dy.abs();
            if manhattan == 0 || manhattan > radius {
                continue;
            }
            let (x, y) = (cx + dx, cy + dy);
            if x >= 0 && x < nx && y >= 0 && y < ny {
                out.push((y * nx + x) as usize);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Builds the submesh projector for a set of magic points: the halo is the
/// union of the points and all their neighbors up to `layers`.
pub fn build_submesh(grid: &Grid, magic_points: &[usize], layers: usize) -> Result<SubmeshProjector> {
    if magic_points.is_empty() {
        return Err(Error::Argument("magic point list is empty".into()));
    }
    let mut magic: Vec<usize> = magic_points.to_vec();
    magic.sort_unstable();
    magic.dedup();
    if let Some(&bad) = magic.iter().find(|&&c| c >= grid.n_cells()) {
        return Err(Error::Index(format!(
            "magic point {bad} out of range for {}x{} grid",
            grid.nx(),
            grid.ny()
        )));
    }
    let mut halo = magic.clone();
    for &mp in &magic {
        halo.extend(cell_neighbors(grid, mp, layers)?);
    }
    halo.sort_unstable();
    halo.dedup();
    let mut halo_slot = vec![usize::MAX; grid.n_cells()];
    for (slot, &cell) in halo.iter().enumerate() {
        halo_slot[cell] = slot;
    }
    Ok(SubmeshProjector {
        magic_points: magic,
        halo,
        layers,
        n_cells: grid.n_cells(),
        halo_slot,
    })
}

/// Gathers the field values at the projector's magic or halo cells,
/// channel-major.
pub fn restrict(field: &Field, proj: &SubmeshProjector, target: RestrictTarget) -> Result<Vec<f64>> {
    if field.n_cells() != proj.n_cells {
        return Err(Error::Shape(format!(
            "field has {} cells, projector was built for {}",
            field.n_cells(),
            proj.n_cells
        )));
    }
    let cells = match target {
        RestrictTarget::Magic => &proj.magic_points,
        RestrictTarget::Halo => &proj.halo,
    };
    let mut out = Vec::with_capacity(field.channels() * cells.len());
    for ch in 0..field.channels() {
        let block = field.channel(ch);
        out.extend(cells.iter().map(|&c| block[c]));
    }
    Ok(out)
}

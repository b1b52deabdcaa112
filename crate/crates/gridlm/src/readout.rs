//! Simulated fMRI readout: Gaussian FWHM smoothing of unit responses on
//! their grid, applied to activations before any selectivity statistics.
//!
//! The kernel is a truncated 2D Gaussian re-normalized at every output site,
//! so boundary cells average only over in-bounds neighbors instead of
//! darkening toward the edge.

use crate::grid::GridLayout;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingKernel {
    /// Full width at half maximum, in millimeters.
    pub fwhm_mm: f64,
    /// Grid step, in millimeters per cell.
    pub unit_spacing_mm: f64,
    /// Window half-width in cells.
    pub truncation_radius: usize,
}

impl SmoothingKernel {
    /// Kernel with the default truncation at ceil(3 sigma / spacing) cells.
    pub fn new(fwhm_mm: f64, unit_spacing_mm: f64) -> Self {
        assert!(fwhm_mm > 0.0 && unit_spacing_mm > 0.0, "kernel lengths must be positive");
        let sigma = fwhm_to_sigma(fwhm_mm);
        let truncation_radius = (3.0 * sigma / unit_spacing_mm).ceil() as usize;
        SmoothingKernel { fwhm_mm, unit_spacing_mm, truncation_radius }
    }

    pub fn default_fmri() -> Self {
        Self::new(2.0, 1.0)
    }

    pub fn sigma_mm(&self) -> f64 {
        fwhm_to_sigma(self.fwhm_mm)
    }

    /// Unnormalized weight for a neighbor offset of (dr, dc) cells.
    fn weight(&self, dr: isize, dc: isize) -> f64 {
        let sigma = self.sigma_mm();
        let dist_sq = ((dr * dr + dc * dc) as f64) * self.unit_spacing_mm * self.unit_spacing_mm;
        (-dist_sq / (2.0 * sigma * sigma)).exp()
    }
}

/// sigma = FWHM / (2 * sqrt(2 ln 2))
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Smooth a grid-shaped scalar field. Each output cell is the
/// truncated-Gaussian weighted average of input cells, with weights
/// re-normalized over the in-bounds window. Linear in the input.
pub fn smooth_map(values: ArrayView2<'_, f64>, kernel: &SmoothingKernel) -> Array2<f64> {
    let (h, w) = values.dim();
    assert!(h >= 1 && w >= 1, "grid must be non-empty");
    let r = kernel.truncation_radius as isize;
    let mut out = Array2::zeros((h, w));
    for row in 0..h as isize {
        for col in 0..w as isize {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for dr in -r..=r {
                let rr = row + dr;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for dc in -r..=r {
                    let cc = col + dc;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let wgt = kernel.weight(dr, dc);
                    acc += wgt * values[[rr as usize, cc as usize]];
                    norm += wgt;
                }
            }
            out[[row as usize, col as usize]] = acc / norm;
        }
    }
    out
}

/// Smooth each sample row of a `[samples, units]` matrix: arrange the row on
/// the grid via the layout, smooth, and read back in unit order.
pub fn smooth_activations(
    acts: ArrayView2<'_, f64>,
    layout: &GridLayout,
    kernel: &SmoothingKernel,
) -> Array2<f64> {
    let (s, n) = acts.dim();
    assert_eq!(n, layout.n_units(), "columns must match layout units");
    let (h, w) = (layout.height(), layout.width());
    let mut out = Array2::zeros((s, n));
    let mut grid = Array2::zeros((h, w));
    for row in 0..s {
        for unit in 0..n {
            let c = layout.cell_of_unit(unit);
            grid[[c.row, c.col]] = acts[[row, unit]];
        }
        let smoothed = smooth_map(grid.view(), kernel);
        for unit in 0..n {
            let c = layout.cell_of_unit(unit);
            out[[row, unit]] = smoothed[[c.row, c.col]];
        }
    }
    out
}

/// Arrange one per-unit vector on its grid (row-major cells).
pub fn to_grid(values: &[f64], layout: &GridLayout) -> Array2<f64> {
    assert_eq!(values.len(), layout.n_units());
    let mut grid = Array2::zeros((layout.height(), layout.width()));
    for (unit, &v) in values.iter().enumerate() {
        let c = layout.cell_of_unit(unit);
        grid[[c.row, c.col]] = v;
    }
    grid
}

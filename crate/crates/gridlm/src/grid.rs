//! Spatial encoding of a layer: unit-to-cell bijections on a 2D grid,
//! ℓ∞ distances, random neighborhoods, and pairwise inverse distances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("insufficient units: neighborhood has {0} member(s), need at least 2")]
    InsufficientUnits(usize),
}

/// A cell position on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub fn new(row: usize, col: usize) -> Self {
        Coord { row, col }
    }
}

/// ℓ∞ (Chebyshev) distance between two cells: max(|Δrow|, |Δcol|).
pub fn linf_distance(a: Coord, b: Coord) -> usize {
    let dr = a.row.abs_diff(b.row);
    let dc = a.col.abs_diff(b.col);
    dr.max(dc)
}

/// The (width, height, seed, permute) tuple a layout is rebuilt from.
/// This is what checkpoints store; raw permutation arrays are never serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub permuted: bool,
}

/// Bijective assignment of layer units to grid cells.
///
/// Unit `i` lives at cell index `unit_to_cell[i]`; cell indices are row-major
/// (`cell = row * width + col`). With permutation off the map is the identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLayout {
    width: usize,
    height: usize,
    seed: u64,
    permuted: bool,
    unit_to_cell: Vec<u32>,
    cell_to_unit: Vec<u32>,
}

impl GridLayout {
    /// Build a layout. With `permute` on, the bijection is a uniform random
    /// permutation drawn from a generator seeded with `seed`; reconstruction
    /// from the same inputs reproduces it exactly.
    pub fn build(width: usize, height: usize, seed: u64, permute: bool) -> Self {
        assert!(width >= 1 && height >= 1, "grid dimensions must be positive");
        let n = width * height;
        let mut unit_to_cell: Vec<u32> = (0..n as u32).collect();
        if permute {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            unit_to_cell.shuffle(&mut rng);
        }
        let mut cell_to_unit = vec![0u32; n];
        for (unit, &cell) in unit_to_cell.iter().enumerate() {
            cell_to_unit[cell as usize] = unit as u32;
        }
        GridLayout {
            width,
            height,
            seed,
            permuted: permute,
            unit_to_cell,
            cell_to_unit,
        }
    }

    pub fn from_descriptor(d: &LayoutDescriptor) -> Self {
        Self::build(d.width, d.height, d.seed, d.permuted)
    }

    pub fn descriptor(&self) -> LayoutDescriptor {
        LayoutDescriptor {
            width: self.width,
            height: self.height,
            seed: self.seed,
            permuted: self.permuted,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_units(&self) -> usize {
        self.unit_to_cell.len()
    }

    pub fn permuted(&self) -> bool {
        self.permuted
    }

    pub fn cell_index_of_unit(&self, unit: usize) -> usize {
        self.unit_to_cell[unit] as usize
    }

    pub fn cell_of_unit(&self, unit: usize) -> Coord {
        let cell = self.cell_index_of_unit(unit);
        Coord::new(cell / self.width, cell % self.width)
    }

    pub fn unit_at(&self, c: Coord) -> usize {
        debug_assert!(c.row < self.height && c.col < self.width);
        self.cell_to_unit[c.row * self.width + c.col] as usize
    }
}

/// Units within ℓ∞ `radius` of a center cell, clipped at the grid boundary.
/// Members are unit indices sorted ascending, which fixes the lexicographic
/// pair order used by [`inverse_distances`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    pub center: Coord,
    pub radius: usize,
    pub members: Vec<usize>,
}

impl Neighborhood {
    /// Collect all units whose cells satisfy d∞(cell, center) ≤ radius.
    pub fn around(layout: &GridLayout, center: Coord, radius: usize) -> Self {
        let r0 = center.row.saturating_sub(radius);
        let r1 = (center.row + radius).min(layout.height - 1);
        let c0 = center.col.saturating_sub(radius);
        let c1 = (center.col + radius).min(layout.width - 1);
        let mut members = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
        for row in r0..=r1 {
            for col in c0..=c1 {
                members.push(layout.unit_at(Coord::new(row, col)));
            }
        }
        members.sort_unstable();
        Neighborhood {
            center,
            radius,
            members,
        }
    }
}

/// Draw `count` neighborhoods with centers uniform over all grid cells,
/// independently (centers may repeat). The caller owns the generator state.
pub fn sample_neighborhoods<R: Rng>(
    layout: &GridLayout,
    count: usize,
    radius: usize,
    rng: &mut R,
) -> Vec<Neighborhood> {
    assert!(count >= 1, "need at least one neighborhood");
    (0..count)
        .map(|_| {
            let cell = rng.random_range(0..layout.n_units());
            let center = Coord::new(cell / layout.width, cell % layout.width);
            Neighborhood::around(layout, center, radius)
        })
        .collect()
}

/// Pairwise inverse ℓ∞ distances for a neighborhood's member units, in
/// lexicographic (i, j) order with i < j. Distinct units never share a cell,
/// so every value lies in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDistances {
    pub pairs: Vec<(usize, usize)>,
    pub values: Vec<f64>,
}

pub fn inverse_distances(
    layout: &GridLayout,
    neighborhood: &Neighborhood,
) -> Result<InverseDistances, GridError> {
    let m = neighborhood.members.len();
    if m < 2 {
        return Err(GridError::InsufficientUnits(m));
    }
    let cells: Vec<Coord> = neighborhood
        .members
        .iter()
        .map(|&u| layout.cell_of_unit(u))
        .collect();
    let n_pairs = m * (m - 1) / 2;
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut values = Vec::with_capacity(n_pairs);
    for a in 0..m {
        for b in (a + 1)..m {
            pairs.push((neighborhood.members[a], neighborhood.members[b]));
            values.push(1.0 / linf_distance(cells[a], cells[b]) as f64);
        }
    }
    Ok(InverseDistances { pairs, values })
}

//! Spatial autocorrelation: Moran's I under Queen, Rook, or generic
//! adjacency, with an optional permutation test, plus the islands variant
//! that scores each connected component of significant units separately.

use crate::grid::Coord;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpatStatsError {
    #[error("zero variance, I undefined")]
    ZeroVariance,
    #[error("need at least 3 sites, got {0}")]
    TooFewSites(usize),
    #[error("value count {values} does not match site count {sites}")]
    LengthMismatch { values: usize, sites: usize },
    #[error("adjacency must be symmetric without self-loops: {0}")]
    BadAdjacency(String),
    #[error("no significant islands")]
    NoIslands,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contiguity {
    Queen,
    Rook,
}

/// Binary spatial weights as per-site neighbor lists.
/// `total_weight` is the number of ordered neighbor pairs (sum of degrees).
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyWeights {
    neighbors: Vec<Vec<u32>>,
    total_weight: f64,
}

impl AdjacencyWeights {
    /// Build from explicit neighbor lists (e.g. a surface-mesh adjacency);
    /// validates symmetry and the absence of self-loops.
    pub fn from_neighbor_lists(lists: Vec<Vec<u32>>) -> Result<Self, SpatStatsError> {
        let n = lists.len();
        for (i, ns) in lists.iter().enumerate() {
            for &j in ns {
                if j as usize == i {
                    return Err(SpatStatsError::BadAdjacency(format!("site {i} lists itself")));
                }
                if j as usize >= n {
                    return Err(SpatStatsError::BadAdjacency(format!(
                        "site {i} lists out-of-range neighbor {j}"
                    )));
                }
                if !lists[j as usize].contains(&(i as u32)) {
                    return Err(SpatStatsError::BadAdjacency(format!(
                        "edge {i} -> {j} lacks its reverse"
                    )));
                }
            }
        }
        let total_weight = lists.iter().map(|l| l.len() as f64).sum();
        Ok(AdjacencyWeights { neighbors: lists, total_weight })
    }

    pub fn n_sites(&self) -> usize {
        self.neighbors.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn neighbors(&self, site: usize) -> &[u32] {
        &self.neighbors[site]
    }
}

fn grid_weights(width: usize, height: usize, contiguity: Contiguity) -> AdjacencyWeights {
    assert!(width >= 1 && height >= 1, "grid must be non-empty");
    let offsets: &[(isize, isize)] = match contiguity {
        Contiguity::Queen => &[
            (-1, -1), (-1, 0), (-1, 1),
            (0, -1), (0, 1),
            (1, -1), (1, 0), (1, 1),
        ],
        Contiguity::Rook => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
    };
    let mut lists = Vec::with_capacity(width * height);
    for r in 0..height as isize {
        for c in 0..width as isize {
            let mut ns = Vec::new();
            for (dr, dc) in offsets {
                let (rr, cc) = (r + dr, c + dc);
                if rr >= 0 && rr < height as isize && cc >= 0 && cc < width as isize {
                    ns.push((rr * width as isize + cc) as u32);
                }
            }
            lists.push(ns);
        }
    }
    let total_weight = lists.iter().map(|l| l.len() as f64).sum();
    AdjacencyWeights { neighbors: lists, total_weight }
}

/// 8-neighborhood (edges and corners) grid adjacency; sites are row-major cells.
pub fn queen_weights(width: usize, height: usize) -> AdjacencyWeights {
    grid_weights(width, height, Contiguity::Queen)
}

/// 4-neighborhood (edge-sharing only) grid adjacency.
pub fn rook_weights(width: usize, height: usize) -> AdjacencyWeights {
    grid_weights(width, height, Contiguity::Rook)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoranResult {
    pub i: f64,
    /// One-sided permutation p-value (fraction of permutations with
    /// I >= observed, with +1 smoothing); absent when n_permutations = 0.
    pub permutation_p: Option<f64>,
    pub n_permutations: usize,
}

fn moran_statistic(x: &[f64], weights: &AdjacencyWeights) -> Result<f64, SpatStatsError> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let denom: f64 = x.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 {
        return Err(SpatStatsError::ZeroVariance);
    }
    let mut num = 0.0;
    for (i, ns) in weights.neighbors.iter().enumerate() {
        let di = x[i] - mean;
        for &j in ns {
            num += di * (x[j as usize] - mean);
        }
    }
    Ok((n as f64 / weights.total_weight) * (num / denom))
}

/// Global Moran's I of per-site values under the given weights, with an
/// optional label-permutation test. Constant inputs are an error rather
/// than a silent zero.
pub fn morans_i(
    x: &[f64],
    weights: &AdjacencyWeights,
    n_permutations: usize,
    seed: u64,
) -> Result<MoranResult, SpatStatsError> {
    if x.len() != weights.n_sites() {
        return Err(SpatStatsError::LengthMismatch { values: x.len(), sites: weights.n_sites() });
    }
    if x.len() < 3 {
        return Err(SpatStatsError::TooFewSites(x.len()));
    }
    let observed = moran_statistic(x, weights)?;
    let permutation_p = if n_permutations > 0 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut shuffled = x.to_vec();
        let mut at_least = 0usize;
        for _ in 0..n_permutations {
            shuffled.shuffle(&mut rng);
            if moran_statistic(&shuffled, weights)? >= observed {
                at_least += 1;
            }
        }
        Some((at_least + 1) as f64 / (n_permutations + 1) as f64)
    } else {
        None
    };
    Ok(MoranResult { i: observed, permutation_p, n_permutations })
}

/// Queen-connected components of the `true` sites on a grid of cells.
pub fn connected_components(
    mask: &[bool],
    cells: &[Coord],
    width: usize,
    height: usize,
    contiguity: Contiguity,
) -> Vec<Vec<usize>> {
    assert_eq!(mask.len(), cells.len());
    let mut cell_to_site = vec![usize::MAX; width * height];
    for (site, c) in cells.iter().enumerate() {
        cell_to_site[c.row * width + c.col] = site;
    }
    let weights = grid_weights(width, height, contiguity);
    let mut visited = vec![false; mask.len()];
    let mut components = Vec::new();
    for start in 0..mask.len() {
        if visited[start] || !mask[start] {
            continue;
        }
        let mut stack = vec![start];
        visited[start] = true;
        let mut comp = Vec::new();
        while let Some(site) = stack.pop() {
            comp.push(site);
            let cell = cells[site].row * width + cells[site].col;
            for &nc in weights.neighbors(cell) {
                let ns = cell_to_site[nc as usize];
                if ns != usize::MAX && mask[ns] && !visited[ns] {
                    visited[ns] = true;
                    stack.push(ns);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslandStat {
    /// Site indices (unit indices) of the island.
    pub units: Vec<usize>,
    pub i: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslandsMoran {
    /// Unweighted mean of island I values, ignoring island size.
    pub mean_i: f64,
    pub islands: Vec<IslandStat>,
    /// Islands skipped for having < 3 units or zero internal variance.
    pub skipped: usize,
}

/// Moran's I restricted to each connected component ("island") of
/// significant sites, averaged unweighted across islands. Islands with
/// fewer than 3 units or no internal variance are skipped and counted.
pub fn islands_morans_i(
    values: &[f64],
    significant: &[bool],
    cells: &[Coord],
    width: usize,
    height: usize,
    contiguity: Contiguity,
) -> Result<IslandsMoran, SpatStatsError> {
    assert_eq!(values.len(), significant.len());
    assert_eq!(values.len(), cells.len());
    let components = connected_components(significant, cells, width, height, contiguity);
    let full = grid_weights(width, height, contiguity);
    let mut cell_to_site = vec![usize::MAX; width * height];
    for (site, c) in cells.iter().enumerate() {
        cell_to_site[c.row * width + c.col] = site;
    }
    let mut islands = Vec::new();
    let mut skipped = 0usize;
    for comp in components {
        if comp.len() < 3 {
            skipped += 1;
            continue;
        }
        // adjacency restricted to the island, re-indexed 0..len
        let mut island_index = vec![u32::MAX; cells.len()];
        for (k, &site) in comp.iter().enumerate() {
            island_index[site] = k as u32;
        }
        let mut lists = vec![Vec::new(); comp.len()];
        for (k, &site) in comp.iter().enumerate() {
            let cell = cells[site].row * width + cells[site].col;
            for &nc in full.neighbors(cell) {
                let neighbor_site = cell_to_site[nc as usize];
                if neighbor_site != usize::MAX && island_index[neighbor_site] != u32::MAX {
                    lists[k].push(island_index[neighbor_site]);
                }
            }
        }
        let weights = AdjacencyWeights::from_neighbor_lists(lists)?;
        let x: Vec<f64> = comp.iter().map(|&s| values[s]).collect();
        match moran_statistic(&x, &weights) {
            Ok(i) => islands.push(IslandStat { units: comp, i }),
            Err(SpatStatsError::ZeroVariance) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if islands.is_empty() {
        return Err(SpatStatsError::NoIslands);
    }
    let mean_i = islands.iter().map(|s| s.i).sum::<f64>() / islands.len() as f64;
    Ok(IslandsMoran { mean_i, islands, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn queen_degrees_on_3x3() {
        let w = queen_weights(3, 3);
        assert_eq!(w.neighbors(4).len(), 8); // center
        assert_eq!(w.neighbors(0).len(), 3); // corner
        assert_eq!(w.neighbors(1).len(), 5); // edge
        assert_abs_diff_eq!(w.total_weight(), 40.0); // 4*3 + 4*5 + 8
    }

    #[test]
    fn rook_degrees() {
        let w = rook_weights(3, 3);
        assert_eq!(w.neighbors(4).len(), 4);
        let w2 = rook_weights(2, 2);
        assert!(w2.neighbors.iter().all(|l| l.len() == 2));
        assert_abs_diff_eq!(w2.total_weight(), 8.0);
        let line = rook_weights(5, 1);
        assert_eq!(line.neighbors(2).len(), 2);
        assert_eq!(line.neighbors(0).len(), 1);
    }

    #[test]
    fn checkerboard_rook_is_exactly_minus_one() {
        let n = 6;
        let x: Vec<f64> = (0..n * n)
            .map(|i| if (i / n + i % n) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let w = rook_weights(n, n);
        let r = morans_i(&x, &w, 0, 0).unwrap();
        assert_eq!(r.i, -1.0);
    }

    /// Brute-force double-sum over all (i, j) pairs, straight from the
    /// definition; the oracle the fast neighbor-list path must match.
    fn moran_brute_force(x: &[f64], w: &AdjacencyWeights) -> f64 {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let mut num = 0.0;
        let mut total_w = 0.0;
        for i in 0..n {
            for j in 0..n {
                let wij = if w.neighbors(i).contains(&(j as u32)) { 1.0 } else { 0.0 };
                num += wij * (x[i] - mean) * (x[j] - mean);
                total_w += wij;
            }
        }
        let denom: f64 = x.iter().map(|&v| (v - mean) * (v - mean)).sum();
        (n as f64 / total_w) * (num / denom)
    }

    #[test]
    fn half_split_map_matches_brute_force() {
        let x: Vec<f64> = (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
        let w = queen_weights(4, 4);
        let got = morans_i(&x, &w, 0, 0).unwrap().i;
        assert_abs_diff_eq!(got, moran_brute_force(&x, &w), epsilon = 1e-12);
    }

    #[test]
    fn random_maps_and_adjacencies_match_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for trial in 0..100 {
            let n = rng.random_range(5..30);
            // random symmetric adjacency
            let mut lists = vec![Vec::new(); n];
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.random_range(0.0..1.0) < 0.3 {
                        lists[i].push(j as u32);
                        lists[j].push(i as u32);
                    }
                }
            }
            if lists.iter().all(|l| l.is_empty()) {
                continue;
            }
            let w = AdjacencyWeights::from_neighbor_lists(lists).unwrap();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = morans_i(&x, &w, 0, 0).unwrap().i;
            assert_abs_diff_eq!(got, moran_brute_force(&x, &w), epsilon = 1e-12);
            let _ = trial;
        }
    }

    #[test]
    fn constant_map_is_an_error() {
        let x = vec![2.0; 9];
        let w = queen_weights(3, 3);
        assert_eq!(morans_i(&x, &w, 0, 0), Err(SpatStatsError::ZeroVariance));
    }

    #[test]
    fn affine_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = queen_weights(8, 8);
        let a = morans_i(&x, &w, 0, 0).unwrap().i;
        let y: Vec<f64> = x.iter().map(|&v| -4.0 * v + 7.5).collect();
        let b = morans_i(&y, &w, 0, 0).unwrap().i;
        assert_abs_diff_eq!(a, b, epsilon = 1e-10);
    }

    #[test]
    fn null_expectation_matches_theory() {
        // under label shuffling, E[I] = -1/(N-1)
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 64;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = queen_weights(8, 8);
        let shuffles = 10_000;
        let mut vals = Vec::with_capacity(shuffles);
        let mut shuffled = x.clone();
        for _ in 0..shuffles {
            shuffled.shuffle(&mut rng);
            vals.push(moran_statistic(&shuffled, &w).unwrap());
        }
        let mean = vals.iter().sum::<f64>() / shuffles as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / shuffles as f64).sqrt();
        let expected = -1.0 / (n as f64 - 1.0);
        let tol = 4.0 * sd / (shuffles as f64).sqrt();
        assert!(
            (mean - expected).abs() < tol,
            "null mean {mean:.5} vs theory {expected:.5} (tol {tol:.5})"
        );
    }

    #[test]
    fn permutation_test_detects_strong_clustering() {
        // left-high right-low split: strongly clustered
        let x: Vec<f64> = (0..64).map(|i| if i % 8 < 4 { 1.0 } else { 0.0 }).collect();
        let w = queen_weights(8, 8);
        let r = morans_i(&x, &w, 999, 3).unwrap();
        assert!(r.i > 0.5);
        assert!(r.permutation_p.unwrap() < 0.01);
    }

    #[test]
    fn rejects_asymmetric_or_self_looping_adjacency() {
        assert!(matches!(
            AdjacencyWeights::from_neighbor_lists(vec![vec![1], vec![]]),
            Err(SpatStatsError::BadAdjacency(_))
        ));
        assert!(matches!(
            AdjacencyWeights::from_neighbor_lists(vec![vec![0]]),
            Err(SpatStatsError::BadAdjacency(_))
        ));
    }

    fn full_grid_cells(width: usize, height: usize) -> Vec<Coord> {
        (0..width * height).map(|i| Coord::new(i / width, i % width)).collect()
    }

    #[test]
    fn single_island_reduces_to_plain_moran() {
        // 3x3 block of significant units in a 6x6 grid
        let cells = full_grid_cells(6, 6);
        let mut sig = vec![false; 36];
        let mut vals = vec![0.0; 36];
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut block_sites = Vec::new();
        for r in 1..4 {
            for c in 1..4 {
                let site = r * 6 + c;
                sig[site] = true;
                vals[site] = rng.random_range(-1.0..1.0);
                block_sites.push(site);
            }
        }
        let islands = islands_morans_i(&vals, &sig, &cells, 6, 6, Contiguity::Queen).unwrap();
        assert_eq!(islands.islands.len(), 1);
        assert_eq!(islands.islands[0].units, block_sites);
        // equals Moran's I on the 3x3 island alone
        let island_vals: Vec<f64> = block_sites.iter().map(|&s| vals[s]).collect();
        let direct = morans_i(&island_vals, &queen_weights(3, 3), 0, 0).unwrap().i;
        assert_abs_diff_eq!(islands.mean_i, direct, epsilon = 1e-12);
    }

    #[test]
    fn two_islands_average_unweighted() {
        // islands of different sizes in opposite corners of an 8x8 grid
        let cells = full_grid_cells(8, 8);
        let mut sig = vec![false; 64];
        let mut vals = vec![0.0; 64];
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut islands_sites: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for r in 0..2 {
            for c in 0..3 {
                islands_sites[0].push(r * 8 + c);
            }
        }
        for r in 5..8 {
            for c in 5..8 {
                islands_sites[1].push(r * 8 + c);
            }
        }
        for sites in &islands_sites {
            for &s in sites {
                sig[s] = true;
                vals[s] = rng.random_range(-1.0..1.0);
            }
        }
        let out = islands_morans_i(&vals, &sig, &cells, 8, 8, Contiguity::Queen).unwrap();
        assert_eq!(out.islands.len(), 2);
        let a = out.islands[0].i;
        let b = out.islands[1].i;
        assert_abs_diff_eq!(out.mean_i, (a + b) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn no_valid_islands_is_an_error() {
        let cells = full_grid_cells(4, 4);
        let mut sig = vec![false; 16];
        sig[0] = true; // single unit: too small
        sig[15] = true;
        let vals = vec![1.0; 16];
        assert_eq!(
            islands_morans_i(&vals, &sig, &cells, 4, 4, Contiguity::Queen),
            Err(SpatStatsError::NoIslands)
        );
    }
}

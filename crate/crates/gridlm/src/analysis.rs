//! Functional contrasts on model activations: per-unit Welch t-tests with
//! BH-FDR correction, localizer runs pooled across layers, greedy cluster
//! growing over significant units, and per-cluster response profiles.

use crate::autodiff::Tape;
use crate::grid::{Coord, GridLayout};
use crate::model::{HookId, ModelError, TopoTransformer};
use crate::readout::{smooth_activations, SmoothingKernel};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("stimulus file line {line}: {msg}")]
    Tsv { line: usize, msg: String },
    #[error("condition {missing:?} not found; available: {available:?}")]
    MissingCondition { missing: String, available: Vec<String> },
    #[error("condition {condition:?} has {n} stimulus item(s), need at least 2")]
    TooFewStimuli { condition: String, n: usize },
    #[error("stimulus {index} ({condition:?}) is {len} tokens, over the block size {block_size}")]
    StimulusTooLong { index: usize, condition: String, len: usize, block_size: usize },
    #[error("contrast groups need at least 2 rows each, got {0}")]
    GroupTooSmall(usize),
    #[error("cluster has no member units")]
    EmptyCluster,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stimulus {
    pub condition: String,
    pub text: String,
}

/// Labeled stimulus texts, as parsed from a `condition<TAB>text` TSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StimulusSet {
    pub items: Vec<Stimulus>,
}

impl StimulusSet {
    pub fn from_items(items: Vec<(String, String)>) -> Self {
        StimulusSet {
            items: items.into_iter().map(|(condition, text)| Stimulus { condition, text }).collect(),
        }
    }

    /// Parse a UTF-8 TSV with header `condition<TAB>text`.
    pub fn from_tsv_reader(r: impl BufRead) -> Result<Self, AnalysisError> {
        let mut items = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            if i == 0 {
                if line.trim_end() != "condition\ttext" {
                    return Err(AnalysisError::Tsv {
                        line: line_no,
                        msg: "expected header 'condition<TAB>text'".into(),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (condition, text) = line.split_once('\t').ok_or(AnalysisError::Tsv {
                line: line_no,
                msg: "expected two tab-separated fields".into(),
            })?;
            if condition.is_empty() || text.is_empty() {
                return Err(AnalysisError::Tsv {
                    line: line_no,
                    msg: "condition and text must be nonempty".into(),
                });
            }
            items.push(Stimulus { condition: condition.to_string(), text: text.to_string() });
        }
        Ok(StimulusSet { items })
    }

    pub fn from_tsv_path(path: &Path) -> Result<Self, AnalysisError> {
        Self::from_tsv_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_tsv_string(&self) -> String {
        let mut s = String::from("condition\ttext\n");
        for item in &self.items {
            s.push_str(&format!("{}\t{}\n", item.condition, item.text));
        }
        s
    }

    pub fn conditions(&self) -> BTreeSet<String> {
        self.items.iter().map(|s| s.condition.clone()).collect()
    }

    /// Row indices of one condition, in file order.
    pub fn rows_of(&self, condition: &str) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, s)| s.condition == condition)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn require_condition(&self, condition: &str) -> Result<Vec<usize>, AnalysisError> {
        let rows = self.rows_of(condition);
        if rows.is_empty() {
            return Err(AnalysisError::MissingCondition {
                missing: condition.to_string(),
                available: self.conditions().into_iter().collect(),
            });
        }
        if rows.len() < 2 {
            return Err(AnalysisError::TooFewStimuli {
                condition: condition.to_string(),
                n: rows.len(),
            });
        }
        Ok(rows)
    }
}

/// Mean over token positions of a single-stimulus `[1, T, N]` capture.
pub fn pool_mean(acts: ArrayView2<'_, f32>) -> Vec<f64> {
    let n = acts.shape()[1];
    let t = acts.shape()[0] as f64;
    let mut out = vec![0.0f64; n];
    for row in acts.outer_iter() {
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o += v as f64;
        }
    }
    out.iter_mut().for_each(|v| *v /= t);
    out
}

/// Per-stimulus pooled unit responses for every hook: one forward pass per
/// stimulus with capture on, mean-pooled over token positions, then
/// optionally smoothed on each hook's grid (the simulated fMRI readout).
pub fn stimulus_responses(
    model: &TopoTransformer,
    stimuli: &StimulusSet,
    smoothing: Option<&SmoothingKernel>,
) -> Result<BTreeMap<HookId, Array2<f64>>, AnalysisError> {
    let block_size = model.config().block_size;
    let n_units = model.config().d_model;
    let mut out: BTreeMap<HookId, Array2<f64>> = model
        .hooks()
        .into_iter()
        .map(|h| (h, Array2::zeros((stimuli.items.len(), n_units))))
        .collect();

    for (index, stim) in stimuli.items.iter().enumerate() {
        let tokens: Vec<usize> = stim.text.bytes().map(|b| b as usize).collect();
        if tokens.len() > block_size {
            return Err(AnalysisError::StimulusTooLong {
                index,
                condition: stim.condition.clone(),
                len: tokens.len(),
                block_size,
            });
        }
        let token_matrix = Array2::from_shape_vec((1, tokens.len()), tokens).expect("row shape");
        let tape = Tape::new();
        let pass = model.forward(&tape, &token_matrix, true)?;
        let hooks = pass.hooks.expect("capture requested");
        for (hook, tensor) in hooks.iter() {
            tensor.with_value(|v| {
                let flat = v
                    .view()
                    .into_shape_with_order((token_matrix.len(), n_units))
                    .expect("hook shape");
                let pooled = pool_mean(flat);
                out.get_mut(&hook)
                    .expect("hook preallocated")
                    .row_mut(index)
                    .assign(&ndarray::Array1::from_vec(pooled));
            });
        }
    }

    if let Some(kernel) = smoothing {
        for (hook, matrix) in out.iter_mut() {
            let layout = model.layout(*hook)?;
            *matrix = smooth_activations(matrix.view(), layout, kernel);
        }
    }
    Ok(out)
}

/// Single-hook convenience wrapper around [`stimulus_responses`].
pub fn stimulus_response(
    model: &TopoTransformer,
    stimuli: &StimulusSet,
    hook: HookId,
    smoothing: Option<&SmoothingKernel>,
) -> Result<Array2<f64>, AnalysisError> {
    let mut all = stimulus_responses(model, stimuli, smoothing)?;
    all.remove(&hook).ok_or_else(|| AnalysisError::Model(ModelError::UnknownHook(hook.to_string())))
}

/// Welch's two-sample t statistic (a minus b) and the Welch-Satterthwaite
/// degrees of freedom. When both groups have zero variance the statistic is
/// 0 by convention (the two-sided p then comes out as 1).
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64), AnalysisError> {
    let (na, nb) = (a.len(), b.len());
    if na < 2 || nb < 2 {
        return Err(AnalysisError::GroupTooSmall(na.min(nb)));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a, ma), var(b, mb));
    let (sa, sb) = (va / na as f64, vb / nb as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok((0.0, (na + nb - 2) as f64));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na as f64 - 1.0) + sb * sb / (nb as f64 - 1.0));
    Ok((t, df))
}

/// Two-sided p-value of a t statistic via the regularized incomplete beta
/// function: p = I_{df/(df+t^2)}(df/2, 1/2).
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    statrs::function::beta::beta_reg(df / 2.0, 0.5, x)
}

/// Benjamini-Hochberg step-up adjustment. Returns monotone adjusted
/// p-values clamped to 1; significance is `adjusted < q`.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p[i].partial_cmp(&p[j]).expect("p-values must not be NaN"));
    let mut adjusted = vec![0.0; m];
    let mut running_min = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        let candidate = (p[idx] * m as f64 / (rank + 1) as f64).min(1.0);
        running_min = running_min.min(candidate);
        adjusted[idx] = running_min;
    }
    adjusted
}

/// Per-unit t/p/q-significance field over one hook's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StatMap {
    pub hook: HookId,
    pub width: usize,
    pub height: usize,
    /// Unit index -> grid cell.
    pub cells: Vec<Coord>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub p_adj: Vec<f64>,
    pub q: f64,
    pub significant: Vec<bool>,
}

impl StatMap {
    pub fn n_units(&self) -> usize {
        self.t.len()
    }
}

/// Per-unit Welch contrast of two response matrices ([stimuli, units] each,
/// columns aligned), BH-adjusted within this map. For the pooled-across-
/// hooks correction use [`pool_fdr`] afterwards.
pub fn contrast_map(
    responses_a: &Array2<f64>,
    responses_b: &Array2<f64>,
    layout: &GridLayout,
    hook: HookId,
    q: f64,
) -> Result<StatMap, AnalysisError> {
    assert_eq!(responses_a.ncols(), responses_b.ncols(), "unit columns must align");
    assert_eq!(responses_a.ncols(), layout.n_units(), "columns must match layout");
    if responses_a.nrows() < 2 || responses_b.nrows() < 2 {
        return Err(AnalysisError::GroupTooSmall(responses_a.nrows().min(responses_b.nrows())));
    }
    let n = layout.n_units();
    let mut t = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for unit in 0..n {
        let col_a: Vec<f64> = responses_a.column(unit).to_vec();
        let col_b: Vec<f64> = responses_b.column(unit).to_vec();
        let (tv, df) = welch_t(&col_a, &col_b)?;
        t.push(tv);
        p.push(t_two_sided_p(tv, df));
    }
    let p_adj = bh_adjust(&p);
    let significant = p_adj.iter().map(|&pa| pa < q).collect();
    Ok(StatMap {
        hook,
        width: layout.width(),
        height: layout.height(),
        cells: (0..n).map(|u| layout.cell_of_unit(u)).collect(),
        t,
        p,
        p_adj,
        q,
        significant,
    })
}

/// Re-run the BH adjustment over the pooled p-values of several maps
/// (the "across all layers" correction) and refresh their significance.
pub fn pool_fdr(maps: &mut [StatMap], q: f64) {
    let pooled: Vec<f64> = maps.iter().flat_map(|m| m.p.iter().copied()).collect();
    let adjusted = bh_adjust(&pooled);
    let mut offset = 0;
    for map in maps.iter_mut() {
        let n = map.n_units();
        map.p_adj = adjusted[offset..offset + n].to_vec();
        map.q = q;
        map.significant = map.p_adj.iter().map(|&pa| pa < q).collect();
        offset += n;
    }
}

/// Standard localizer contrast (`sentences` vs `nonwords`) for every hook,
/// FDR-pooled across all hooks.
pub fn localize_language_system(
    model: &TopoTransformer,
    localizer: &StimulusSet,
    q: f64,
    smoothing: Option<&SmoothingKernel>,
) -> Result<BTreeMap<HookId, StatMap>, AnalysisError> {
    let rows_a = localizer.require_condition("sentences")?;
    let rows_b = localizer.require_condition("nonwords")?;
    let responses = stimulus_responses(model, localizer, smoothing)?;
    let mut maps = Vec::new();
    for (hook, matrix) in &responses {
        let a = matrix.select(Axis(0), &rows_a);
        let b = matrix.select(Axis(0), &rows_b);
        maps.push(contrast_map(&a, &b, model.layout(*hook)?, *hook, q)?);
    }
    pool_fdr(&mut maps, q);
    Ok(maps.into_iter().map(|m| (m.hook, m)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    fn admits(&self, t: f64) -> bool {
        match self {
            Sign::Positive => t > 0.0,
            Sign::Negative => t < 0.0,
        }
    }

    /// True when `a` is more extreme than `b` for this sign.
    fn more_extreme(&self, a: f64, b: f64) -> bool {
        match self {
            Sign::Positive => a > b,
            Sign::Negative => a < b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub hook: HookId,
    pub members: Vec<usize>,
    pub seed_unit: usize,
    pub sign: Sign,
    pub size: usize,
}

/// Greedy cluster growing: seed at the most extreme significant unit of the
/// requested sign, then repeatedly absorb the most extreme significant
/// same-sign Queen neighbor (ties to the lowest unit index); repeat with new
/// seeds until no eligible unit remains, then drop clusters smaller than
/// `min_size`. The union of grown clusters before the size filter equals
/// the Queen connected components of the eligible units.
pub fn grow_clusters(map: &StatMap, q: f64, min_size: usize, sign: Sign) -> Vec<Cluster> {
    let n = map.n_units();
    let eligible: Vec<bool> = (0..n)
        .map(|u| map.p_adj[u] < q && sign.admits(map.t[u]))
        .collect();
    let mut unit_at_cell = vec![usize::MAX; map.width * map.height];
    for (u, c) in map.cells.iter().enumerate() {
        unit_at_cell[c.row * map.width + c.col] = u;
    }
    let queen_neighbors = |u: usize| -> Vec<usize> {
        let c = map.cells[u];
        let mut out = Vec::with_capacity(8);
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (r, col) = (c.row as isize + dr, c.col as isize + dc);
                if r < 0 || col < 0 || r >= map.height as isize || col >= map.width as isize {
                    continue;
                }
                let v = unit_at_cell[r as usize * map.width + col as usize];
                if v != usize::MAX {
                    out.push(v);
                }
            }
        }
        out
    };

    let mut visited = vec![false; n];
    let mut clusters = Vec::new();
    loop {
        // next seed: most extreme unvisited eligible unit
        let mut seed: Option<usize> = None;
        for u in 0..n {
            if visited[u] || !eligible[u] {
                continue;
            }
            seed = match seed {
                None => Some(u),
                Some(s) if sign.more_extreme(map.t[u], map.t[s]) => Some(u),
                keep => keep,
            };
        }
        let Some(seed) = seed else { break };
        visited[seed] = true;
        let mut members = vec![seed];
        loop {
            let mut best: Option<usize> = None;
            for &m in &members {
                for v in queen_neighbors(m) {
                    if visited[v] || !eligible[v] {
                        continue;
                    }
                    best = match best {
                        None => Some(v),
                        Some(b) if sign.more_extreme(map.t[v], map.t[b]) => Some(v),
                        Some(b) if map.t[v] == map.t[b] && v < b => Some(v),
                        keep => keep,
                    };
                }
            }
            let Some(next) = best else { break };
            visited[next] = true;
            members.push(next);
        }
        members.sort_unstable();
        clusters.push(Cluster { hook: map.hook, size: members.len(), seed_unit: seed, members, sign });
    }
    clusters.retain(|c| c.size >= min_size);
    clusters
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseProfile {
    pub hook: HookId,
    pub seed_unit: usize,
    /// Condition label -> mean absolute pooled activation across cluster units.
    pub per_condition: BTreeMap<String, f64>,
}

/// Profile from a precomputed `[stimuli, units]` response matrix.
pub fn profile_from_responses(
    responses: &Array2<f64>,
    members: &[usize],
    stimuli: &StimulusSet,
) -> Result<BTreeMap<String, f64>, AnalysisError> {
    if members.is_empty() {
        return Err(AnalysisError::EmptyCluster);
    }
    let mut per_condition = BTreeMap::new();
    for condition in stimuli.conditions() {
        let rows = stimuli.rows_of(&condition);
        let mut acc = 0.0;
        for &row in &rows {
            let mean_abs: f64 =
                members.iter().map(|&u| responses[[row, u]].abs()).sum::<f64>() / members.len() as f64;
            acc += mean_abs;
        }
        per_condition.insert(condition, acc / rows.len() as f64);
    }
    Ok(per_condition)
}

/// Mean absolute pooled activation of a cluster's units per condition.
pub fn response_profile(
    model: &TopoTransformer,
    cluster: &Cluster,
    stimuli: &StimulusSet,
    smoothing: Option<&SmoothingKernel>,
) -> Result<ResponseProfile, AnalysisError> {
    let responses = stimulus_response(model, stimuli, cluster.hook, smoothing)?;
    let per_condition = profile_from_responses(&responses, &cluster.members, stimuli)?;
    Ok(ResponseProfile { hook: cluster.hook, seed_unit: cluster.seed_unit, per_condition })
}

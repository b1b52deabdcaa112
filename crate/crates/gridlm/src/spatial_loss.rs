//! Spatial smoothness loss on grid neighborhoods and the combined objective.
//!
//! Per neighborhood: correlate the vector of pairwise unit-activation
//! correlations `r` with the matching vector of pairwise inverse distances
//! `d`, and score `SL = 0.5 * (1 - corr(r, d))`, which lands in [0, 1].
//! Per layer: average over a few randomly sampled neighborhoods. The
//! combined objective adds `alpha`-weighted layer losses to the task loss.

use crate::autodiff::{pearson, Scalar, Tensor, CORR_EPS};
use crate::grid::{inverse_distances, sample_neighborhoods, GridLayout, InverseDistances, Neighborhood};
use crate::model::HookId;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Variance guard for the r-vs-d correlation. This one must stay far below
/// the d-vector's variance (bounded by 0.25) or perfectly affine
/// correlation structure could no longer reach the exact 0/1 endpoints;
/// it amounts to a 1e-8 floor on the standard deviation.
const RD_CORR_EPS: f64 = 1e-16;

#[derive(Debug, Error, PartialEq)]
pub enum SpatialLossError {
    #[error("degenerate neighborhood: {pairs} pair(s) from {members} member unit(s), need at least 2 pairs")]
    DegenerateNeighborhood { members: usize, pairs: usize },
    #[error("activation matrix has {0} sample row(s), need at least 2")]
    TooFewSamples(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialLossConfig {
    /// Weight of every hook's spatial loss in the combined objective.
    pub alpha: f64,
    /// Optional per-hook overrides (key: hook name, e.g. "L2.mlp").
    pub per_hook_alpha: BTreeMap<String, f64>,
    pub neighborhoods_per_layer: usize,
    pub radius: usize,
}

impl Default for SpatialLossConfig {
    fn default() -> Self {
        SpatialLossConfig {
            alpha: 2.5,
            per_hook_alpha: BTreeMap::new(),
            neighborhoods_per_layer: 5,
            radius: 5,
        }
    }
}

impl SpatialLossConfig {
    pub fn alpha_for(&self, hook: HookId) -> f64 {
        self.per_hook_alpha.get(&hook.to_string()).copied().unwrap_or(self.alpha)
    }

    /// True when no hook carries any spatial weight, i.e. the run reduces to
    /// the plain next-token baseline.
    pub fn is_inert(&self, hooks: &[HookId]) -> bool {
        hooks.iter().all(|&h| self.alpha_for(h) == 0.0)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.alpha < 0.0 || self.per_hook_alpha.values().any(|&a| a < 0.0) {
            return Err("alpha must be non-negative".into());
        }
        if self.neighborhoods_per_layer == 0 {
            return Err("neighborhoods_per_layer must be at least 1".into());
        }
        Ok(())
    }
}

/// Spatial loss of one neighborhood: pairwise unit correlations over the
/// sample axis, correlated against inverse distances in the same pair order.
/// Differentiable through to `acts`.
pub fn neighborhood_spatial_loss<'t, T: Scalar>(
    acts: Tensor<'t, T>,
    neighborhood: &Neighborhood,
    inv_dists: &InverseDistances,
) -> Result<Tensor<'t, T>, SpatialLossError> {
    let shape = acts.shape();
    assert_eq!(shape.len(), 2, "activations must be [samples, units]");
    if shape[0] < 2 {
        return Err(SpatialLossError::TooFewSamples(shape[0]));
    }
    let members = &neighborhood.members;
    let n_pairs = members.len() * members.len().saturating_sub(1) / 2;
    if n_pairs < 2 {
        return Err(SpatialLossError::DegenerateNeighborhood {
            members: members.len(),
            pairs: n_pairs,
        });
    }
    assert_eq!(inv_dists.values.len(), n_pairs, "inverse distances do not match the neighborhood");

    let selected = acts.index_select(1, members);
    let r = selected.pairwise_row_corr(T::cast(CORR_EPS));
    let tape = r.tape();
    let d_arr = ArrayD::from_shape_vec(
        IxDyn(&[n_pairs]),
        inv_dists.values.iter().map(|&v| T::cast(v)).collect(),
    )
    .unwrap();
    let d = tape.leaf(d_arr);
    // clamp cancels at most 1 ulp of rounding; |corr| <= 1 holds analytically
    let corr = pearson(r, d, T::cast(RD_CORR_EPS)).clamp_unit();
    Ok(corr.neg().add_scalar(T::one()).scale(T::cast(0.5)))
}

/// Mean neighborhood loss over freshly sampled neighborhoods of one layer.
pub fn layer_spatial_loss<'t, T: Scalar, R: Rng>(
    acts: Tensor<'t, T>,
    layout: &GridLayout,
    config: &SpatialLossConfig,
    rng: &mut R,
) -> Result<Tensor<'t, T>, SpatialLossError> {
    assert_eq!(
        acts.shape()[1],
        layout.n_units(),
        "activation columns must match layout units"
    );
    let neighborhoods = sample_neighborhoods(layout, config.neighborhoods_per_layer, config.radius, rng);
    let mut total: Option<Tensor<'t, T>> = None;
    for n in &neighborhoods {
        let inv = inverse_distances(layout, n)
            .map_err(|_| SpatialLossError::DegenerateNeighborhood { members: n.members.len(), pairs: 0 })?;
        let loss = neighborhood_spatial_loss(acts, n, &inv)?;
        total = Some(match total {
            Some(t) => t.add(loss),
            None => loss,
        });
    }
    Ok(total.unwrap().scale(T::cast(1.0 / neighborhoods.len() as f64)))
}

/// Scalar record of one step's losses, for logging and CSV output.
/// `spatial_sum` is the unweighted sum of per-hook losses; the weighted sum
/// is logged alongside it since reports often quote either convention.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub per_hook: Vec<(HookId, f64)>,
    pub spatial_sum: f64,
    pub weighted_spatial_sum: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn task_only(task_loss: f64) -> Self {
        LossBreakdown {
            task_loss,
            per_hook: Vec::new(),
            spatial_sum: 0.0,
            weighted_spatial_sum: 0.0,
            total: task_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Combine task and per-hook spatial losses: `total = task + sum_k alpha_k * SL_k`.
/// Hooks with zero alpha contribute nothing to the differentiable total but
/// still appear in the breakdown.
pub fn combined_loss<'t, T: Scalar>(
    task: Tensor<'t, T>,
    spatial: &[(HookId, Tensor<'t, T>)],
    config: &SpatialLossConfig,
) -> (Tensor<'t, T>, LossBreakdown) {
    let mut total = task;
    let mut per_hook = Vec::with_capacity(spatial.len());
    let mut spatial_sum = 0.0;
    let mut weighted_sum = 0.0;
    for &(hook, sl) in spatial {
        let value = sl.scalar_value().to_f64();
        debug_assert!(
            (-1e-6..=1.0 + 1e-6).contains(&value),
            "spatial loss {value} for {hook} outside [0, 1]"
        );
        let alpha = config.alpha_for(hook);
        per_hook.push((hook, value));
        spatial_sum += value;
        weighted_sum += alpha * value;
        if alpha != 0.0 {
            total = total.add(sl.scale(T::cast(alpha)));
        }
    }
    let breakdown = LossBreakdown {
        task_loss: task.scalar_value().to_f64(),
        per_hook,
        spatial_sum,
        weighted_spatial_sum: weighted_sum,
        total: total.scalar_value().to_f64(),
    };
    (total, breakdown)
}

//! Multi-view consistency check: primitives that stay out of the rendering
//! for a run of consecutive views while sitting inside those views' frusta
//! are deleted.

use crate::error::{Error, Result};
use crate::viewgen::ViewSet;

use super::{ContributionRecord, GaussianScene};

/// Total per-view blending weight below which a primitive counts as not
/// involved in rendering that view.
pub const CONTRIBUTION_EPSILON: f64 = 1e-3;

/// Drop primitives whose total blending weight stays below
/// [`CONTRIBUTION_EPSILON`] for at least `run_length` consecutive views while
/// their means project inside each of those views' frusta. Feature rows are
/// compacted accordingly. Idempotent for fixed records.
pub fn consistency_filter(
    scene: GaussianScene,
    views: &ViewSet,
    records: &[ContributionRecord],
    run_length: usize,
) -> Result<GaussianScene> {
    if records.len() != views.len() {
        return Err(Error::invalid(format!(
            "{} records for {} views",
            records.len(),
            views.len()
        )));
    }
    for (r, v) in records.iter().zip(&views.views) {
        if r.view_index != v.trajectory_index {
            return Err(Error::invalid(
                "records are not in trajectory order".to_string(),
            ));
        }
    }
    let n = scene.primitives.len();
    let weights: Vec<Vec<f64>> = records
        .iter()
        .map(|r| r.gaussian_weight_sums(n))
        .collect();
    consistency_filter_from_weights(scene, views, &weights, run_length)
}

/// Same check, fed with precomputed per-view per-primitive weight totals
/// (the reduction the streaming pipeline produces while rendering).
pub fn consistency_filter_from_weights(
    mut scene: GaussianScene,
    views: &ViewSet,
    weights: &[Vec<f64>],
    run_length: usize,
) -> Result<GaussianScene> {
    if weights.len() != views.len() {
        return Err(Error::invalid(format!(
            "{} weight vectors for {} views",
            weights.len(),
            views.len()
        )));
    }
    if run_length == 0 {
        return Err(Error::invalid("run_length must be at least 1"));
    }
    let n = scene.primitives.len();
    let mut dead = vec![false; n];
    for (i, prim) in scene.primitives.iter().enumerate() {
        if !prim.alive {
            continue;
        }
        let mut run = 0usize;
        for (v, view) in views.views.iter().enumerate() {
            let uninvolved =
                weights[v][i] < CONTRIBUTION_EPSILON && view.in_frustum(&prim.mean);
            if uninvolved {
                run += 1;
                if run >= run_length {
                    dead[i] = true;
                    break;
                }
            } else {
                run = 0;
            }
        }
    }
    scene.kill_primitives(&dead);
    Ok(scene)
}

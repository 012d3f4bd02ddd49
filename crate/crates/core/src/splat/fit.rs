//! Photometric fit of per-primitive opacity and color against projection
//! targets. Geometry stays frozen; each iteration descends the mean
//! per-written-pixel L1 error of one view (round-robin over the trajectory),
//! with per-primitive step normalization so small and large footprints move
//! at comparable rates.

use crate::error::{Error, Result};
use crate::viewgen::{CameraView, RasterImage, ViewSet};

use super::render::{bin_tiles, project_splats};
use super::{clamp_opacity, GaussianScene, DEFAULT_BACKGROUND};

const TILE: usize = 32;
const TRANSMITTANCE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Maximum per-iteration color step.
    pub lr_color: f64,
    /// Maximum per-iteration opacity step.
    pub lr_opacity: f64,
    pub background: [f64; 3],
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lr_color: 0.2,
            lr_opacity: 0.1,
            background: DEFAULT_BACKGROUND,
        }
    }
}

/// Per-iteration photometric loss of the view visited at that iteration.
#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    pub losses: Vec<f64>,
}

impl FitTrace {
    /// Mean loss over a window of iterations, clamped to the trace length.
    pub fn window_mean(&self, start: usize, len: usize) -> f64 {
        let end = (start + len).min(self.losses.len());
        if start >= end {
            return f64::NAN;
        }
        self.losses[start..end].iter().sum::<f64>() / (end - start) as f64
    }
}

/// Fit opacity and color against the projection targets of the same views.
pub fn fit_appearance(
    scene: GaussianScene,
    views: &ViewSet,
    targets: &[RasterImage],
    iters: usize,
) -> Result<GaussianScene> {
    if targets.len() != views.len() {
        return Err(Error::invalid(format!(
            "{} targets for {} views",
            targets.len(),
            views.len()
        )));
    }
    let (scene, _) = fit_appearance_with_provider(
        scene,
        views,
        |v| Ok(targets[v].clone()),
        iters,
        FitOptions::default(),
    )?;
    Ok(scene)
}

/// Same as [`fit_appearance`] but targets are produced on demand, so callers
/// can re-project instead of holding every view in memory.
pub fn fit_appearance_with_provider(
    mut scene: GaussianScene,
    views: &ViewSet,
    mut target_of: impl FnMut(usize) -> Result<RasterImage>,
    iters: usize,
    opts: FitOptions,
) -> Result<(GaussianScene, FitTrace)> {
    let mut trace = FitTrace::default();
    if iters == 0 {
        return Ok((scene, trace));
    }
    if views.is_empty() {
        return Err(Error::invalid("cannot fit appearance without views"));
    }
    let num_views = views.len();
    let n = scene.primitives.len();
    let mut grad_color = vec![[0.0f64; 3]; n];
    let mut grad_opacity = vec![0.0f64; n];
    let mut mass_color = vec![0.0f64; n];
    let mut mass_opacity = vec![0.0f64; n];

    for it in 0..iters {
        let v = it % num_views;
        let target = target_of(v)?;
        let view = &views.views[v];
        if target.width != view.width || target.height != view.height {
            return Err(Error::invalid(format!(
                "target {v} dimensions do not match its view"
            )));
        }
        grad_color.fill([0.0; 3]);
        grad_opacity.fill(0.0);
        mass_color.fill(0.0);
        mass_opacity.fill(0.0);
        let loss = accumulate_view_gradients(
            &scene,
            view,
            &target,
            &opts,
            &mut grad_color,
            &mut grad_opacity,
            &mut mass_color,
            &mut mass_opacity,
        );
        trace.losses.push(loss);
        for (i, p) in scene.primitives.iter_mut().enumerate() {
            if !p.alive {
                continue;
            }
            if mass_color[i] > 1e-12 {
                for ch in 0..3 {
                    let step = opts.lr_color * grad_color[i][ch] / mass_color[i];
                    p.color[ch] = (p.color[ch] - step).clamp(0.0, 1.0);
                }
            }
            if mass_opacity[i] > 1e-12 {
                let step = opts.lr_opacity * grad_opacity[i] / mass_opacity[i];
                p.opacity = clamp_opacity(p.opacity - step);
            }
        }
    }
    Ok((scene, trace))
}

/// Forward render of one view with per-pixel contributor stacks, backward
/// accumulation of dL/dcolor and dL/dopacity. Returns the view loss.
#[allow(clippy::too_many_arguments)]
fn accumulate_view_gradients(
    scene: &GaussianScene,
    view: &CameraView,
    target: &RasterImage,
    opts: &FitOptions,
    grad_color: &mut [[f64; 3]],
    grad_opacity: &mut [f64],
    mass_color: &mut [f64],
    mass_opacity: &mut [f64],
) -> f64 {
    let width = view.width as usize;
    let n_written = target.written_count();
    if n_written == 0 {
        return 0.0;
    }
    let norm = 1.0 / (3.0 * n_written as f64);
    let splats = project_splats(scene, view);
    let grid = bin_tiles(&splats, view.width, view.height);
    let bg = opts.background;

    let mut loss = 0.0f64;
    // (splat index, alpha, transmittance before this contributor)
    let mut stack: Vec<(u32, f64, f64)> = Vec::with_capacity(64);

    for ty in 0..grid.tiles_y {
        for tx in 0..grid.tiles_x {
            let list = &grid.lists[ty * grid.tiles_x + tx];
            if list.is_empty() {
                continue;
            }
            let px0 = tx * TILE;
            let py0 = ty * TILE;
            let px1 = (px0 + TILE).min(width);
            let py1 = (py0 + TILE).min(view.height as usize);
            for row in py0..py1 {
                for col in px0..px1 {
                    let pix = row * width + col;
                    if !target.written(pix) {
                        continue;
                    }
                    let cx = col as f64 + 0.5;
                    let cy = row as f64 + 0.5;
                    stack.clear();
                    let mut t = 1.0f64;
                    let mut color = [0.0f64; 3];
                    for &si in list {
                        if t < TRANSMITTANCE_EPS {
                            break;
                        }
                        let s = &splats[si as usize];
                        if cx < s.aabb[0] || cx > s.aabb[1] || cy < s.aabb[2] || cy > s.aabb[3]
                        {
                            continue;
                        }
                        let alpha = s.alpha_at(cx, cy);
                        if alpha <= 0.0 {
                            continue;
                        }
                        stack.push((si, alpha, t));
                        let w = t * alpha;
                        for ch in 0..3 {
                            color[ch] += w * s.color[ch];
                        }
                        t *= 1.0 - alpha;
                    }
                    let t_final = t;
                    for ch in 0..3 {
                        color[ch] += t_final * bg[ch];
                    }
                    let tgt = target.color[pix];
                    let mut g = [0.0f64; 3];
                    for ch in 0..3 {
                        let diff = color[ch] - tgt[ch] as f64;
                        loss += diff.abs() * norm;
                        g[ch] = diff.signum() * norm;
                    }
                    // Backward: S holds sum_{k>i} c_k alpha_k T_k + bg*T_final.
                    let mut s_acc = [bg[0] * t_final, bg[1] * t_final, bg[2] * t_final];
                    for &(si, alpha, t_i) in stack.iter().rev() {
                        let s = &splats[si as usize];
                        let prim = s.prim as usize;
                        let w = t_i * alpha;
                        let mut dop = 0.0f64;
                        let mut dop_mass = 0.0f64;
                        for ch in 0..3 {
                            grad_color[prim][ch] += g[ch] * w;
                            let dc_dalpha = s.color[ch] * t_i - s_acc[ch] / (1.0 - alpha);
                            dop += g[ch] * dc_dalpha;
                            dop_mass += dc_dalpha.abs() * norm;
                            s_acc[ch] += s.color[ch] * w;
                        }
                        let dalpha_dop = alpha / s.opacity;
                        grad_opacity[prim] += dop * dalpha_dop;
                        mass_opacity[prim] += dop_mass * dalpha_dop;
                        mass_color[prim] += w * norm;
                    }
                }
            }
        }
    }
    loss
}

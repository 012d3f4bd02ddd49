//! Simplified Gaussian-splat scene: construction from a point cloud,
//! alpha-composited rendering, photometric fitting of opacity/color, and the
//! multi-view consistency filter.
//!
//! Geometry (means, scales, rotations) is frozen at initialization from the
//! input points; only opacity, color and the per-primitive affinity features
//! are ever optimized.

mod filter;
mod fit;
mod render;

pub use filter::{consistency_filter, consistency_filter_from_weights, CONTRIBUTION_EPSILON};
pub use fit::{fit_appearance, fit_appearance_with_provider, FitOptions, FitTrace};
pub use render::{
    feature_gradient, feature_gradient_grouped, render_color, render_feature,
    render_with_options, FeatureImage, GroupedRecord, PixelSet, RecordMode, RenderOptions,
    RenderOutput, DEFAULT_BACKGROUND,
};

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::spatial::SpatialIndex;

/// Opacity assigned to every primitive at initialization.
pub const INIT_OPACITY: f64 = 0.7;

/// Neighbors averaged for the initial isotropic scale.
pub const INIT_SCALE_NEIGHBORS: usize = 8;

const OPACITY_MIN: f64 = 0.01;
const OPACITY_MAX: f64 = 0.99;

/// One anisotropic Gaussian primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Point3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub alive: bool,
}

impl GaussianPrimitive {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.x > 0.0 && self.scale.y > 0.0 && self.scale.z > 0.0) {
            return Err(Error::invalid("gaussian scale components must be positive"));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::invalid("gaussian opacity must lie strictly in (0,1)"));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("gaussian rotation quaternion not unit norm"));
        }
        Ok(())
    }
}

/// A set of Gaussian primitives plus the per-primitive affinity feature
/// matrix. Feature rows exist only for alive primitives and are compacted
/// whenever primitives are filtered out.
#[derive(Debug, Clone)]
pub struct GaussianScene {
    pub primitives: Vec<GaussianPrimitive>,
    feature_dim: usize,
    /// Row-major (alive_count x feature_dim).
    features: Vec<f64>,
    /// primitive index -> feature row, -1 when dead.
    row_of: Vec<i64>,
    /// feature row -> primitive index.
    prim_of_row: Vec<u32>,
}

impl GaussianScene {
    pub fn from_primitives(
        primitives: Vec<GaussianPrimitive>,
        feature_dim: usize,
        features: Vec<f64>,
    ) -> Result<Self> {
        let alive = primitives.iter().filter(|p| p.alive).count();
        if features.len() != alive * feature_dim {
            return Err(Error::invalid(format!(
                "feature matrix has {} values, expected {} x {}",
                features.len(),
                alive,
                feature_dim
            )));
        }
        for p in &primitives {
            p.validate()?;
        }
        let mut row_of = vec![-1i64; primitives.len()];
        let mut prim_of_row = Vec::with_capacity(alive);
        let mut row = 0usize;
        for (i, p) in primitives.iter().enumerate() {
            if p.alive {
                row_of[i] = row as i64;
                prim_of_row.push(i as u32);
                row += 1;
            }
        }
        Ok(GaussianScene {
            primitives,
            feature_dim,
            features,
            row_of,
            prim_of_row,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn alive_count(&self) -> usize {
        self.prim_of_row.len()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn feature_row(&self, row: usize) -> &[f64] {
        &self.features[row * self.feature_dim..(row + 1) * self.feature_dim]
    }

    pub fn row_of_primitive(&self, prim: usize) -> Option<usize> {
        let r = self.row_of[prim];
        (r >= 0).then_some(r as usize)
    }

    pub fn primitive_of_row(&self, row: usize) -> usize {
        self.prim_of_row[row] as usize
    }

    /// Mark the given primitives dead and compact the feature matrix.
    pub fn kill_primitives(&mut self, dead: &[bool]) {
        assert_eq!(dead.len(), self.primitives.len());
        let dim = self.feature_dim;
        let mut new_features =
            Vec::with_capacity(self.features.len());
        let mut new_prim_of_row = Vec::new();
        for (i, p) in self.primitives.iter_mut().enumerate() {
            let was_alive = p.alive;
            if dead[i] {
                p.alive = false;
            }
            if was_alive {
                let old_row = self.row_of[i];
                debug_assert!(old_row >= 0);
                if p.alive {
                    let start = old_row as usize * dim;
                    new_features.extend_from_slice(&self.features[start..start + dim]);
                    new_prim_of_row.push(i as u32);
                }
            }
        }
        self.features = new_features;
        self.prim_of_row = new_prim_of_row;
        self.row_of = vec![-1; self.primitives.len()];
        for (row, &prim) in self.prim_of_row.iter().enumerate() {
            self.row_of[prim as usize] = row as i64;
        }
    }

    /// Renormalize every feature row to unit norm (rows of norm ~0 are left
    /// untouched).
    pub fn normalize_features(&mut self) {
        let dim = self.feature_dim;
        for row in self.features.chunks_exact_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
    }
}

fn sample_standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 kept away from 0.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Build one isotropic Gaussian per point. The scale is the mean distance to
/// the point's 8 nearest neighbors, opacity starts at [`INIT_OPACITY`], the
/// color is the point color and features are random unit vectors drawn from
/// the seeded generator.
pub fn init_scene(cloud: &PointCloud, feature_dim: usize, seed: u64) -> Result<GaussianScene> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot build a scene from an empty cloud"));
    }
    if feature_dim < 2 {
        return Err(Error::invalid("feature dimension must be at least 2"));
    }
    let positions = cloud.positions();
    let scales: Vec<f64> = if positions.len() == 1 {
        vec![0.01]
    } else {
        let index = SpatialIndex::build(positions)?;
        positions
            .iter()
            .map(|p| {
                // k+1 nearest includes the point itself at distance 0.
                let k = INIT_SCALE_NEIGHBORS.min(positions.len() - 1);
                let nn = index.k_nearest(p, k + 1);
                let sum: f64 = nn.iter().skip(1).map(|e| e.1).sum();
                sum / k as f64
            })
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(positions.len() * feature_dim);
    for _ in 0..positions.len() {
        let mut row: Vec<f64> = (0..feature_dim)
            .map(|_| sample_standard_normal(&mut rng))
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut row {
            *v /= norm;
        }
        features.extend_from_slice(&row);
    }
    let primitives = positions
        .iter()
        .zip(cloud.colors())
        .zip(&scales)
        .map(|((p, c), &s)| GaussianPrimitive {
            mean: *p,
            scale: Vector3::new(s, s, s),
            rotation: UnitQuaternion::identity(),
            opacity: INIT_OPACITY,
            color: *c,
            alive: true,
        })
        .collect();
    GaussianScene::from_primitives(primitives, feature_dim, features)
}

pub(crate) fn clamp_opacity(o: f64) -> f64 {
    o.clamp(OPACITY_MIN, OPACITY_MAX)
}

/// One (gaussian, pixel, blending weight) triple of a rendered view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContributionEntry {
    pub gaussian: u32,
    pub pixel: u32,
    pub weight: f32,
}

/// Sparse record of which Gaussians contributed where in one rendered view.
/// Entries appear in rasterization order; within a pixel that is front-to-back
/// depth order.
#[derive(Debug, Clone)]
pub struct ContributionRecord {
    pub view_index: usize,
    pub width: u32,
    pub height: u32,
    pub entries: Vec<ContributionEntry>,
}

impl ContributionRecord {
    /// Per-pixel total blending weight; bounded by 1 for valid records.
    pub fn pixel_weight_sums(&self) -> Vec<f32> {
        let mut sums = vec![0.0f32; self.width as usize * self.height as usize];
        for e in &self.entries {
            sums[e.pixel as usize] += e.weight;
        }
        sums
    }

    /// Total blending weight per primitive over the whole view.
    pub fn gaussian_weight_sums(&self, num_primitives: usize) -> Vec<f64> {
        let mut sums = vec![0.0f64; num_primitives];
        for e in &self.entries {
            sums[e.gaussian as usize] += e.weight as f64;
        }
        sums
    }
}

const SCENE_MAGIC: &[u8; 4] = b"PGS1";

/// Serialize the alive primitives and their feature rows.
pub fn save_scene(scene: &GaussianScene, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(SCENE_MAGIC)?;
    let count = scene.alive_count() as u32;
    let dim = scene.feature_dim() as u32;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    let mut put = |v: f64| w.write_all(&(v as f32).to_le_bytes());
    for row in 0..scene.alive_count() {
        let p = &scene.primitives[scene.primitive_of_row(row)];
        for v in [p.mean.x, p.mean.y, p.mean.z, p.scale.x, p.scale.y, p.scale.z] {
            put(v)?;
        }
        let q = p.rotation.quaternion();
        for v in [q.w, q.i, q.j, q.k] {
            put(v)?;
        }
        put(p.opacity)?;
        for v in [p.color.x, p.color.y, p.color.z] {
            put(v)?;
        }
    }
    for v in scene.features() {
        put(*v)?;
    }
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<GaussianScene> {
    let mut file = std::fs::File::open(path).map_err(|_| Error::NotFound(path.into()))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    if data.len() < 12 || &data[..4] != SCENE_MAGIC {
        return Err(Error::format(path, "missing PGS1 magic"));
    }
    let count = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let expected = 12 + count * 14 * 4 + count * dim * 4;
    if data.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {}", data.len()),
        ));
    }
    let mut off = 12usize;
    let mut next = || {
        let v = f32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as f64;
        off += 4;
        v
    };
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let mean = Point3::new(next(), next(), next());
        let scale = Vector3::new(next(), next(), next());
        let (w, i, j, k) = (next(), next(), next(), next());
        let rotation =
            UnitQuaternion::new_normalize(nalgebra::Quaternion::new(w, i, j, k));
        let opacity = next();
        let color = Vector3::new(next(), next(), next());
        primitives.push(GaussianPrimitive {
            mean,
            scale,
            rotation,
            opacity,
            color,
            alive: true,
        });
    }
    let mut features = Vec::with_capacity(count * dim);
    for _ in 0..count * dim {
        features.push(next());
    }
    GaussianScene::from_primitives(primitives, dim, features)
}

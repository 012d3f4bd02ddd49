//! Tile-based alpha-compositing rasterizer for Gaussian scenes.
//!
//! Per view, alive primitives are projected to screen-space ellipses (EWA),
//! binned into tiles, depth-sorted per tile (ties by primitive id) and
//! composited front to back. A primitive contributes to a pixel only within
//! 3 sigma of its projected center.

use nalgebra::{Matrix2x3, Matrix3};

use crate::error::{Error, Result};
use crate::viewgen::{CameraView, RasterImage, NEAR_PLANE};

use super::{ContributionEntry, ContributionRecord, GaussianPrimitive, GaussianScene};

pub const DEFAULT_BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

const TILE: usize = 32;
/// Squared Mahalanobis cutoff (3 sigma).
const D2_MAX: f64 = 9.0;
/// Transmittance below which a pixel stops accepting contributions; keeps
/// truncation error well under the 1e-6 render tolerance.
const TRANSMITTANCE_EPS: f64 = 1e-9;

#[inline]
pub fn gaussian_falloff(d2: f64) -> f64 {
    (-0.5 * d2).exp()
}

/// Screen-space footprint of one projected Gaussian.
#[derive(Debug, Clone)]
pub struct ProjectedSplat {
    pub prim: u32,
    pub u0: f64,
    pub v0: f64,
    /// Inverse 2x2 projected covariance packed (a, b, c):
    /// d2 = a dx^2 + 2 b dx dy + c dy^2.
    pub inv: [f64; 3],
    pub depth: f64,
    /// 3-sigma bounds (umin, umax, vmin, vmax) in continuous image coords.
    pub aabb: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl ProjectedSplat {
    /// Opacity contributed at a pixel center, zero outside 3 sigma.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.u0;
        let dy = py - self.v0;
        let d2 = self.inv[0] * dx * dx + 2.0 * self.inv[1] * dx * dy + self.inv[2] * dy * dy;
        if d2 > D2_MAX {
            0.0
        } else {
            self.opacity * gaussian_falloff(d2)
        }
    }
}

/// Project one primitive into a view; None when culled (behind the camera,
/// off screen, or numerically degenerate).
pub fn project_gaussian(
    prim: &GaussianPrimitive,
    prim_id: u32,
    view: &CameraView,
) -> Option<ProjectedSplat> {
    let rot = view.rotation();
    let cam = rot * (prim.mean - view.position);
    let z = cam.z;
    if z <= NEAR_PLANE {
        return None;
    }
    let f = view.focal_px;
    let (cx, cy) = view.principal_point();
    let u0 = f * cam.x / z + cx;
    let v0 = f * cam.y / z + cy;

    let r = prim.rotation.to_rotation_matrix().into_inner();
    let m = r * Matrix3::from_diagonal(&prim.scale);
    let sigma_world = m * m.transpose();
    let sigma_cam = rot * sigma_world * rot.transpose();
    let z2 = z * z;
    let jac = Matrix2x3::new(f / z, 0.0, -f * cam.x / z2, 0.0, f / z, -f * cam.y / z2);
    let s2 = jac * sigma_cam * jac.transpose();
    let (a, b, c) = (s2[(0, 0)], s2[(0, 1)], s2[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 1e-18 && det.is_finite()) {
        return None;
    }
    let inv = [c / det, -b / det, a / det];
    let ru = 3.0 * a.max(0.0).sqrt();
    let rv = 3.0 * c.max(0.0).sqrt();
    let aabb = [u0 - ru, u0 + ru, v0 - rv, v0 + rv];
    if aabb[1] < 0.0
        || aabb[0] >= view.width as f64
        || aabb[3] < 0.0
        || aabb[2] >= view.height as f64
    {
        return None;
    }
    Some(ProjectedSplat {
        prim: prim_id,
        u0,
        v0,
        inv,
        depth: z,
        aabb,
        opacity: prim.opacity,
        color: [prim.color.x, prim.color.y, prim.color.z],
    })
}

pub(crate) fn project_splats(scene: &GaussianScene, view: &CameraView) -> Vec<ProjectedSplat> {
    scene
        .primitives
        .iter()
        .enumerate()
        .filter(|(_, p)| p.alive)
        .filter_map(|(i, p)| project_gaussian(p, i as u32, view))
        .collect()
}

/// Bin splats into TILE x TILE screen tiles and depth-sort each tile's list
/// by (depth, primitive id).
pub(crate) struct TileGrid {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

pub(crate) fn bin_tiles(splats: &[ProjectedSplat], width: u32, height: u32) -> TileGrid {
    let tiles_x = (width as usize).div_ceil(TILE);
    let tiles_y = (height as usize).div_ceil(TILE);
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let tx0 = ((s.aabb[0].max(0.0)) as usize / TILE).min(tiles_x - 1);
        let tx1 = ((s.aabb[1].max(0.0).min(width as f64 - 1.0)) as usize / TILE).min(tiles_x - 1);
        let ty0 = ((s.aabb[2].max(0.0)) as usize / TILE).min(tiles_y - 1);
        let ty1 = ((s.aabb[3].max(0.0).min(height as f64 - 1.0)) as usize / TILE).min(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    for list in &mut lists {
        list.sort_by(|&a, &b| {
            let sa = &splats[a as usize];
            let sb = &splats[b as usize];
            sa.depth
                .partial_cmp(&sb.depth)
                .unwrap()
                .then(sa.prim.cmp(&sb.prim))
        });
    }
    TileGrid {
        tiles_x,
        tiles_y,
        lists,
    }
}

/// Bitmap over pixel indices used to restrict contribution recording.
#[derive(Debug, Clone)]
pub struct PixelSet {
    words: Vec<u64>,
}

impl PixelSet {
    pub fn new(num_pixels: usize) -> Self {
        PixelSet {
            words: vec![0; num_pixels.div_ceil(64)],
        }
    }

    pub fn insert(&mut self, pixel: u32) {
        self.words[pixel as usize / 64] |= 1u64 << (pixel % 64);
    }

    #[inline]
    pub fn contains(&self, pixel: u32) -> bool {
        (self.words[pixel as usize / 64] >> (pixel % 64)) & 1 == 1
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub enum RecordMode<'a> {
    #[default]
    None,
    All,
    Pixels(&'a PixelSet),
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions<'a> {
    pub background: [f64; 3],
    pub record: RecordMode<'a>,
    /// Accumulate the total blending weight of each primitive.
    pub gaussian_weights: bool,
}

impl Default for RenderOptions<'_> {
    fn default() -> Self {
        RenderOptions {
            background: DEFAULT_BACKGROUND,
            record: RecordMode::None,
            gaussian_weights: false,
        }
    }
}

pub struct RenderOutput {
    pub image: RasterImage,
    pub record: Option<ContributionRecord>,
    pub gaussian_weights: Option<Vec<f64>>,
}

/// Alpha-composited color render of the scene; per-pixel depth is the
/// blending-weight-weighted mean of contributor depths.
pub fn render_with_options(
    scene: &GaussianScene,
    view: &CameraView,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    if scene.alive_count() == 0 {
        return Err(Error::invalid("render needs at least one alive primitive"));
    }
    let width = view.width;
    let height = view.height;
    let splats = project_splats(scene, view);
    let grid = bin_tiles(&splats, width, height);

    let bg = opts.background;
    let bg32 = [bg[0] as f32, bg[1] as f32, bg[2] as f32];
    let mut image = RasterImage::new(width, height, bg32, false);
    let mut entries: Vec<ContributionEntry> = Vec::new();
    let mut gw = opts
        .gaussian_weights
        .then(|| vec![0.0f64; scene.primitives.len()]);

    let mut trans = [0.0f64; TILE * TILE];
    let mut color_acc = [[0.0f64; 3]; TILE * TILE];
    let mut depth_acc = [0.0f64; TILE * TILE];
    let mut wsum = [0.0f64; TILE * TILE];

    for ty in 0..grid.tiles_y {
        for tx in 0..grid.tiles_x {
            let list = &grid.lists[ty * grid.tiles_x + tx];
            let px0 = tx * TILE;
            let py0 = ty * TILE;
            let px1 = (px0 + TILE).min(width as usize);
            let py1 = (py0 + TILE).min(height as usize);
            if list.is_empty() {
                continue;
            }
            trans.fill(1.0);
            color_acc.fill([0.0; 3]);
            depth_acc.fill(0.0);
            wsum.fill(0.0);

            for &si in list {
                let s = &splats[si as usize];
                let c0 = ((s.aabb[0] - 0.5).ceil().max(px0 as f64)) as usize;
                let c1 = ((s.aabb[1] - 0.5).floor().min(px1 as f64 - 1.0)) as i64;
                let r0 = ((s.aabb[2] - 0.5).ceil().max(py0 as f64)) as usize;
                let r1 = ((s.aabb[3] - 0.5).floor().min(py1 as f64 - 1.0)) as i64;
                if c1 < c0 as i64 || r1 < r0 as i64 {
                    continue;
                }
                for row in r0..=(r1 as usize) {
                    let ly = row - py0;
                    for col in c0..=(c1 as usize) {
                        let local = ly * TILE + (col - px0);
                        let t = trans[local];
                        if t < TRANSMITTANCE_EPS {
                            continue;
                        }
                        let alpha = s.alpha_at(col as f64 + 0.5, row as f64 + 0.5);
                        if alpha <= 0.0 {
                            continue;
                        }
                        let w = t * alpha;
                        let acc = &mut color_acc[local];
                        acc[0] += w * s.color[0];
                        acc[1] += w * s.color[1];
                        acc[2] += w * s.color[2];
                        depth_acc[local] += w * s.depth;
                        wsum[local] += w;
                        trans[local] = t * (1.0 - alpha);
                        let pixel = (row as u32) * width + col as u32;
                        match opts.record {
                            RecordMode::None => {}
                            RecordMode::All => entries.push(ContributionEntry {
                                gaussian: s.prim,
                                pixel,
                                weight: w as f32,
                            }),
                            RecordMode::Pixels(set) => {
                                if set.contains(pixel) {
                                    entries.push(ContributionEntry {
                                        gaussian: s.prim,
                                        pixel,
                                        weight: w as f32,
                                    });
                                }
                            }
                        }
                        if let Some(gw) = &mut gw {
                            gw[s.prim as usize] += w;
                        }
                    }
                }
            }

            for row in py0..py1 {
                let ly = row - py0;
                for col in px0..px1 {
                    let local = ly * TILE + (col - px0);
                    let pix = row * width as usize + col;
                    let t = trans[local];
                    let acc = &color_acc[local];
                    image.color[pix] = [
                        (acc[0] + t * bg[0]) as f32,
                        (acc[1] + t * bg[1]) as f32,
                        (acc[2] + t * bg[2]) as f32,
                    ];
                    image.depth[pix] = if wsum[local] > 0.0 {
                        (depth_acc[local] / wsum[local]) as f32
                    } else {
                        f32::INFINITY
                    };
                }
            }
        }
    }

    let record = match opts.record {
        RecordMode::None => None,
        _ => Some(ContributionRecord {
            view_index: view.trajectory_index,
            width,
            height,
            entries,
        }),
    };
    Ok(RenderOutput {
        image,
        record,
        gaussian_weights: gw,
    })
}

/// Color render with a full contribution record.
pub fn render_color(
    scene: &GaussianScene,
    view: &CameraView,
) -> Result<(RasterImage, ContributionRecord)> {
    let out = render_with_options(
        scene,
        view,
        &RenderOptions {
            record: RecordMode::All,
            ..Default::default()
        },
    )?;
    Ok((out.image, out.record.expect("record requested")))
}

/// Dense per-pixel feature map, row-major, `d` values per pixel.
#[derive(Debug, Clone)]
pub struct FeatureImage {
    pub width: u32,
    pub height: u32,
    pub d: usize,
    pub data: Vec<f32>,
}

impl FeatureImage {
    pub fn pixel(&self, pixel: usize) -> &[f32] {
        &self.data[pixel * self.d..(pixel + 1) * self.d]
    }
}

/// Composite per-Gaussian features with the same blending weights as
/// [`render_color`]; no background term.
pub fn render_feature(scene: &GaussianScene, view: &CameraView) -> Result<FeatureImage> {
    let (_, record) = render_color(scene, view)?;
    let d = scene.feature_dim();
    let n = view.pixel_count();
    let mut data = vec![0.0f32; n * d];
    for e in &record.entries {
        let row = scene
            .row_of_primitive(e.gaussian as usize)
            .expect("rendered primitive is alive");
        let feat = scene.feature_row(row);
        let out = &mut data[e.pixel as usize * d..(e.pixel as usize + 1) * d];
        for (o, f) in out.iter_mut().zip(feat) {
            *o += e.weight * *f as f32;
        }
    }
    Ok(FeatureImage {
        width: view.width,
        height: view.height,
        d,
        data,
    })
}

/// Contribution record regrouped per pixel (CSR layout); within a pixel the
/// contributors keep front-to-back order.
#[derive(Debug, Clone)]
pub struct GroupedRecord {
    pub view_index: usize,
    pub pixels: Vec<u32>,
    pub offsets: Vec<u32>,
    pub gaussians: Vec<u32>,
    pub weights: Vec<f32>,
}

impl GroupedRecord {
    pub fn from_record(record: &ContributionRecord) -> Self {
        let mut order: Vec<u32> = (0..record.entries.len() as u32).collect();
        order.sort_by_key(|&i| (record.entries[i as usize].pixel, i));
        let mut pixels = Vec::new();
        let mut offsets: Vec<u32> = Vec::new();
        let mut gaussians = Vec::with_capacity(order.len());
        let mut weights = Vec::with_capacity(order.len());
        for &i in &order {
            let e = &record.entries[i as usize];
            if pixels.last() != Some(&e.pixel) {
                pixels.push(e.pixel);
                offsets.push(gaussians.len() as u32);
            }
            gaussians.push(e.gaussian);
            weights.push(e.weight);
        }
        offsets.push(gaussians.len() as u32);
        GroupedRecord {
            view_index: record.view_index,
            pixels,
            offsets,
            gaussians,
            weights,
        }
    }

    /// Contributors of one pixel as parallel (gaussian, weight) slices.
    pub fn pixel_contribs(&self, pixel: u32) -> Option<(&[u32], &[f32])> {
        let i = self.pixels.binary_search(&pixel).ok()?;
        let lo = self.offsets[i] as usize;
        let hi = self.offsets[i + 1] as usize;
        Some((&self.gaussians[lo..hi], &self.weights[lo..hi]))
    }
}

/// Exact gradient of a rendered-feature loss with respect to the feature
/// rows: dL/df_g = sum over pixels of (blending weight of g) x upstream
/// gradient. `upstream` must be sorted by pixel index.
pub fn feature_gradient(
    scene: &GaussianScene,
    record: &ContributionRecord,
    upstream: &[(u32, Vec<f64>)],
) -> Result<Vec<f64>> {
    let grouped = GroupedRecord::from_record(record);
    feature_gradient_grouped(scene, &grouped, upstream)
}

pub fn feature_gradient_grouped(
    scene: &GaussianScene,
    grouped: &GroupedRecord,
    upstream: &[(u32, Vec<f64>)],
) -> Result<Vec<f64>> {
    let d = scene.feature_dim();
    let mut grad = vec![0.0f64; scene.alive_count() * d];
    accumulate_feature_gradient(scene, grouped, upstream, &mut grad)?;
    Ok(grad)
}

pub(crate) fn accumulate_feature_gradient(
    scene: &GaussianScene,
    grouped: &GroupedRecord,
    upstream: &[(u32, Vec<f64>)],
    grad: &mut [f64],
) -> Result<()> {
    let d = scene.feature_dim();
    for (pixel, g) in upstream {
        if g.len() != d {
            return Err(Error::invalid(format!(
                "upstream gradient has dimension {}, expected {d}",
                g.len()
            )));
        }
        let Some((gaussians, weights)) = grouped.pixel_contribs(*pixel) else {
            continue;
        };
        for (&prim, &w) in gaussians.iter().zip(weights) {
            let row = scene
                .row_of_primitive(prim as usize)
                .expect("recorded primitive is alive");
            let out = &mut grad[row * d..(row + 1) * d];
            let w = w as f64;
            for (o, gv) in out.iter_mut().zip(g) {
                *o += w * gv;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PointCloud;
    use crate::splat::init_scene;
    use approx::assert_relative_eq;
    use nalgebra::{Point3, UnitQuaternion, Vector3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_view(size: u32) -> CameraView {
        CameraView::new(
            Point3::new(0.0, 0.0, 3.0),
            Point3::origin(),
            Vector3::y(),
            size as f64,
            size,
            size,
            0,
        )
        .unwrap()
    }

    fn single_gaussian_scene(opacity: f64, color: [f64; 3], z: f64) -> GaussianScene {
        let prim = GaussianPrimitive {
            mean: Point3::new(0.0, 0.0, z),
            scale: Vector3::new(0.4, 0.4, 0.4),
            rotation: UnitQuaternion::identity(),
            opacity,
            color: Vector3::new(color[0], color[1], color[2]),
            alive: true,
        };
        GaussianScene::from_primitives(vec![prim], 2, vec![1.0, 0.0]).unwrap()
    }

    pub(crate) fn random_scene(rng: &mut impl Rng, n: usize, d: usize) -> GaussianScene {
        let positions: Vec<Point3<f64>> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                )
            })
            .collect();
        let colors = (0..n)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let cloud = PointCloud::new(positions, colors, None).unwrap();
        let mut scene = init_scene(&cloud, d, rng.gen()).unwrap();
        for p in &mut scene.primitives {
            p.opacity = 0.1 + 0.85 * rng.gen::<f64>();
            p.scale *= 0.5 + rng.gen::<f64>();
        }
        scene
    }

    /// Direct Eq.-style evaluation: for each pixel, gather every projected
    /// splat, sort explicitly by (depth, id) and fold the compositing sum.
    fn brute_force_pixel(
        splats: &[ProjectedSplat],
        px: f64,
        py: f64,
        bg: [f64; 3],
    ) -> ([f64; 3], f64) {
        let mut contributors: Vec<&ProjectedSplat> = splats
            .iter()
            .filter(|s| s.alpha_at(px, py) > 0.0)
            .collect();
        contributors.sort_by(|a, b| {
            a.depth
                .partial_cmp(&b.depth)
                .unwrap()
                .then(a.prim.cmp(&b.prim))
        });
        let mut color = [0.0f64; 3];
        let mut t = 1.0f64;
        let mut wsum = 0.0f64;
        for s in contributors {
            if t < 1e-9 {
                break;
            }
            let alpha = s.alpha_at(px, py);
            let w = t * alpha;
            for ch in 0..3 {
                color[ch] += w * s.color[ch];
            }
            wsum += w;
            t *= 1.0 - alpha;
        }
        for ch in 0..3 {
            color[ch] += t * bg[ch];
        }
        (color, wsum)
    }

    #[test]
    fn single_gaussian_pixel_is_alpha_times_color() {
        let view = test_view(64);
        let scene = single_gaussian_scene(0.6, [1.0, 0.5, 0.25], 0.0);
        let out = render_with_options(
            &scene,
            &view,
            &RenderOptions {
                background: [0.0; 3],
                record: RecordMode::All,
                gaussian_weights: false,
            },
        )
        .unwrap();
        // Pixel (32,32) center sits at distance 0.5px from the projected
        // center; evaluate the expected alpha directly.
        let splat = project_gaussian(&scene.primitives[0], 0, &view).unwrap();
        let alpha = splat.alpha_at(32.5, 32.5);
        let pix = 32 * 64 + 32;
        assert_relative_eq!(
            out.image.color[pix][0] as f64,
            alpha * 1.0,
            epsilon = 1e-6
        );
        assert_relative_eq!(
            out.image.color[pix][1] as f64,
            alpha * 0.5,
            epsilon = 1e-6
        );
    }

    #[test]
    fn two_layer_compositing_expands_correctly() {
        // front: alpha 0.5 color c1; back: alpha ~1 color c2 -> 0.5 c1 + 0.5 c2.
        let front = GaussianPrimitive {
            mean: Point3::new(0.0, 0.0, 1.0),
            scale: Vector3::new(50.0, 50.0, 0.01),
            rotation: UnitQuaternion::identity(),
            opacity: 0.5,
            color: Vector3::new(1.0, 0.0, 0.0),
            alive: true,
        };
        let back = GaussianPrimitive {
            mean: Point3::new(0.0, 0.0, 0.0),
            scale: Vector3::new(50.0, 50.0, 0.01),
            rotation: UnitQuaternion::identity(),
            opacity: 0.99,
            color: Vector3::new(0.0, 1.0, 0.0),
            alive: true,
        };
        let scene =
            GaussianScene::from_primitives(vec![front, back], 2, vec![1.0, 0.0, 1.0, 0.0])
                .unwrap();
        let view = test_view(32);
        let out = render_with_options(
            &scene,
            &view,
            &RenderOptions {
                background: [0.0; 3],
                ..Default::default()
            },
        )
        .unwrap();
        let pix = 16 * 32 + 16;
        // Huge flat splats: alpha at the principal pixel is essentially the
        // base opacity.
        assert_relative_eq!(out.image.color[pix][0] as f64, 0.5, epsilon = 1e-3);
        assert_relative_eq!(out.image.color[pix][1] as f64, 0.5 * 0.99, epsilon = 1e-3);
    }

    #[test]
    fn matches_bruteforce_compositing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..5 {
            let scene = random_scene(&mut rng, 20, 2);
            let view = test_view(48);
            let out = render_with_options(
                &scene,
                &view,
                &RenderOptions {
                    record: RecordMode::All,
                    ..Default::default()
                },
            )
            .unwrap();
            let splats = project_splats(&scene, &view);
            for row in 0..48u32 {
                for col in 0..48u32 {
                    let (want, _) = brute_force_pixel(
                        &splats,
                        col as f64 + 0.5,
                        row as f64 + 0.5,
                        DEFAULT_BACKGROUND,
                    );
                    let got = out.image.color[(row * 48 + col) as usize];
                    for ch in 0..3 {
                        assert!(
                            (got[ch] as f64 - want[ch]).abs() < 1e-6,
                            "trial {trial} pixel ({row},{col}) ch {ch}: {} vs {want:?}",
                            got[ch]
                        );
                    }
                }
            }
            // Per-pixel blending weights never exceed 1.
            let sums = out.record.unwrap().pixel_weight_sums();
            assert!(sums.iter().all(|&s| s <= 1.0 + 1e-6));
        }
    }

    #[test]
    fn feature_render_single_contributor_is_weight_times_feature() {
        let view = test_view(64);
        let scene = single_gaussian_scene(0.6, [1.0, 1.0, 1.0], 0.0);
        let feat = render_feature(&scene, &view).unwrap();
        let (_, record) = render_color(&scene, &view).unwrap();
        let pix = 32u32 * 64 + 32;
        let w = record
            .entries
            .iter()
            .find(|e| e.pixel == pix)
            .unwrap()
            .weight;
        assert_relative_eq!(feat.pixel(pix as usize)[0] as f64, w as f64, epsilon = 1e-6);
        assert_relative_eq!(feat.pixel(pix as usize)[1] as f64, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn feature_render_is_linear_in_shared_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scene = random_scene(&mut rng, 15, 3);
        // All rows share one feature f: F(u) must equal (sum of weights) * f.
        let f = [0.3f64, -0.4, 0.85];
        let d = scene.feature_dim();
        for row in 0..scene.alive_count() {
            scene.features_mut()[row * d..row * d + 3].copy_from_slice(&f);
        }
        let view = test_view(32);
        let feat = render_feature(&scene, &view).unwrap();
        let (_, record) = render_color(&scene, &view).unwrap();
        let sums = record.pixel_weight_sums();
        for pix in 0..(32 * 32) {
            for k in 0..3 {
                assert_relative_eq!(
                    feat.pixel(pix)[k] as f64,
                    sums[pix] as f64 * f[k],
                    epsilon = 2e-6
                );
            }
        }
    }

    #[test]
    fn feature_render_matches_bruteforce_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let scene = random_scene(&mut rng, 25, 4);
        let view = test_view(40);
        let feat = render_feature(&scene, &view).unwrap();
        let (_, record) = render_color(&scene, &view).unwrap();
        let mut want = vec![0.0f64; 40 * 40 * 4];
        for e in &record.entries {
            let row = scene.row_of_primitive(e.gaussian as usize).unwrap();
            for k in 0..4 {
                want[e.pixel as usize * 4 + k] += e.weight as f64 * scene.feature_row(row)[k];
            }
        }
        for (got, want) in feat.data.iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn color_equals_feature_path_with_d3() {
        // Re-derive the color image through the feature path with D = 3.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut scene = random_scene(&mut rng, 20, 3);
        let d = scene.feature_dim();
        for row in 0..scene.alive_count() {
            let prim = scene.primitive_of_row(row);
            let c = scene.primitives[prim].color;
            scene.features_mut()[row * d..(row + 1) * d]
                .copy_from_slice(&[c.x, c.y, c.z]);
        }
        let view = test_view(40);
        let out = render_with_options(
            &scene,
            &view,
            &RenderOptions {
                record: RecordMode::All,
                ..Default::default()
            },
        )
        .unwrap();
        let feat = render_feature(&scene, &view).unwrap();
        let sums = out.record.unwrap().pixel_weight_sums();
        for pix in 0..(40 * 40) {
            let t_bg = 1.0 - sums[pix] as f64;
            for ch in 0..3 {
                let via_feature = feat.pixel(pix)[ch] as f64 + t_bg * DEFAULT_BACKGROUND[ch];
                assert!(
                    (via_feature - out.image.color[pix][ch] as f64).abs() < 5e-6,
                    "pixel {pix} channel {ch}"
                );
            }
        }
    }

    #[test]
    fn feature_gradient_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = random_scene(&mut rng, 10, 4);
        let view = test_view(24);
        let (_, record) = render_color(&scene, &view).unwrap();
        let upstream: Vec<(u32, Vec<f64>)> =
            (0..24 * 24).map(|p| (p as u32, vec![0.0; 4])).collect();
        let grad = feature_gradient(&scene, &record, &upstream).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn feature_gradient_single_term() {
        let view = test_view(64);
        let scene = single_gaussian_scene(0.6, [1.0, 1.0, 1.0], 0.0);
        let (_, record) = render_color(&scene, &view).unwrap();
        let pix = 32u32 * 64 + 32;
        let w = record
            .entries
            .iter()
            .find(|e| e.pixel == pix)
            .unwrap()
            .weight as f64;
        let upstream = vec![(pix, vec![2.0, -1.0])];
        let grad = feature_gradient(&scene, &record, &upstream).unwrap();
        // Other pixels also reference this gaussian, but upstream is nonzero
        // at a single pixel, so the gradient is exactly w * g there.
        assert_relative_eq!(grad[0], w * 2.0, epsilon = 1e-9);
        assert_relative_eq!(grad[1], w * -1.0, epsilon = 1e-9);
    }

    #[test]
    fn feature_gradient_matches_finite_differences_linear_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut scene = random_scene(&mut rng, 10, 4);
        let view = test_view(24);
        let (_, record) = render_color(&scene, &view).unwrap();
        // Loss = sum_u g_u . F(u) with random g.
        let upstream: Vec<(u32, Vec<f64>)> = (0..24 * 24)
            .map(|p| {
                (
                    p as u32,
                    (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
                )
            })
            .collect();
        let grouped = GroupedRecord::from_record(&record);
        let loss = |sc: &GaussianScene| -> f64 {
            let mut total = 0.0;
            for (pixel, g) in &upstream {
                if let Some((gs, ws)) = grouped.pixel_contribs(*pixel) {
                    for (&prim, &w) in gs.iter().zip(ws) {
                        let row = sc.row_of_primitive(prim as usize).unwrap();
                        let f = sc.feature_row(row);
                        total += w as f64 * f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            total
        };
        let grad = feature_gradient(&scene, &record, &upstream).unwrap();
        let h = 1e-4;
        let mut max_rel: f64 = 0.0;
        for idx in 0..grad.len() {
            let orig = scene.features()[idx];
            scene.features_mut()[idx] = orig + h;
            let lp = loss(&scene);
            scene.features_mut()[idx] = orig - h;
            let lm = loss(&scene);
            scene.features_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[idx].abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max((grad[idx] - fd).abs() / denom);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn feature_gradient_rejects_dim_mismatch() {
        let view = test_view(16);
        let scene = single_gaussian_scene(0.5, [1.0; 3], 0.0);
        let (_, record) = render_color(&scene, &view).unwrap();
        let upstream = vec![(0u32, vec![1.0; 5])];
        assert!(feature_gradient(&scene, &record, &upstream).is_err());
    }
}

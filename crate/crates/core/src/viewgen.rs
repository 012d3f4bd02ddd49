//! Camera trajectory generation and sparse point projection.
//!
//! Produces the multi-view observations used both to fit the splat scene and
//! as the projection-only baseline path. Cameras are simple pinholes; camera
//! space is x-right, y-down, z-forward.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};
use crate::geom::PointCloud;

/// Points closer than this to the camera plane are not projected.
pub const NEAR_PLANE: f64 = 1e-4;

/// Screen radius (pixels) of the disk painted for each projected point.
pub const POINT_SPLAT_RADIUS: f64 = 2.0;

pub const DEFAULT_IMAGE_SIZE: u32 = 770;
pub const DEFAULT_VFOV_DEG: f64 = 60.0;
/// Default elevation band (degrees above horizontal) for surround paths.
pub const DEFAULT_ELEV_BAND: (f64, f64) = (10.0, 60.0);

/// One pinhole camera on the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub position: Point3<f64>,
    pub look_at: Point3<f64>,
    pub up: Vector3<f64>,
    pub focal_px: f64,
    pub width: u32,
    pub height: u32,
    pub trajectory_index: usize,
}

impl CameraView {
    pub fn new(
        position: Point3<f64>,
        look_at: Point3<f64>,
        up: Vector3<f64>,
        focal_px: f64,
        width: u32,
        height: u32,
        trajectory_index: usize,
    ) -> Result<Self> {
        if focal_px <= 0.0 {
            return Err(Error::invalid("focal length must be positive"));
        }
        if (look_at - position).norm() == 0.0 {
            return Err(Error::invalid("camera position equals look_at"));
        }
        let forward = (look_at - position).normalize();
        if forward.cross(&up).norm() < 1e-9 {
            return Err(Error::invalid(
                "camera up vector is parallel to the viewing direction",
            ));
        }
        Ok(CameraView {
            position,
            look_at,
            up,
            focal_px,
            width,
            height,
            trajectory_index,
        })
    }

    /// World-to-camera rotation; rows are (right, down, forward).
    pub fn rotation(&self) -> Matrix3<f64> {
        let forward = (self.look_at - self.position).normalize();
        let right = forward.cross(&self.up).normalize();
        let down = forward.cross(&right);
        Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation() * (p - self.position)
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    /// Continuous image coordinates and depth, or None behind the near plane.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= NEAR_PLANE {
            return None;
        }
        let (cx, cy) = self.principal_point();
        Some((
            self.focal_px * c.x / c.z + cx,
            self.focal_px * c.y / c.z + cy,
            c.z,
        ))
    }

    /// World position of the point observed at continuous image
    /// coordinates (u, v) with the given depth.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        let (cx, cy) = self.principal_point();
        let cam = Vector3::new(
            (u - cx) * depth / self.focal_px,
            (v - cy) * depth / self.focal_px,
            depth,
        );
        self.position + self.rotation().transpose() * cam
    }

    /// Whether a world point falls inside the view frustum in front of the
    /// camera.
    pub fn in_frustum(&self, p: &Point3<f64>) -> bool {
        match self.project(p) {
            Some((u, v, _)) => {
                u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
            }
            None => false,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    Surround,
    Tiled,
}

/// Ordered camera trajectory.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub views: Vec<CameraView>,
    pub distribution: Distribution,
    pub delta_elev_deg: f64,
    pub delta_azim_deg: f64,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Optional knobs shared by the trajectory generators.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryOptions {
    pub image_size: u32,
    pub vfov_deg: f64,
    /// Elevation band (degrees) the surround spiral wraps within.
    pub elev_band_deg: (f64, f64),
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        TrajectoryOptions {
            image_size: DEFAULT_IMAGE_SIZE,
            vfov_deg: DEFAULT_VFOV_DEG,
            elev_band_deg: DEFAULT_ELEV_BAND,
        }
    }
}

impl TrajectoryOptions {
    pub fn focal_px(&self) -> f64 {
        (self.image_size as f64 / 2.0) / (self.vfov_deg.to_radians() / 2.0).tan()
    }
}

/// Spiral of V cameras around `center` at fixed `radius`, all looking at the
/// center. Azimuth advances by `delta_azim_deg` per view, elevation by
/// `delta_elev_deg` wrapping within the configured band.
pub fn surround_trajectory(
    center: Point3<f64>,
    radius: f64,
    num_views: usize,
    delta_elev_deg: f64,
    delta_azim_deg: f64,
) -> Result<ViewSet> {
    surround_trajectory_with_options(
        center,
        radius,
        num_views,
        delta_elev_deg,
        delta_azim_deg,
        TrajectoryOptions::default(),
    )
}

pub fn surround_trajectory_with_options(
    center: Point3<f64>,
    radius: f64,
    num_views: usize,
    delta_elev_deg: f64,
    delta_azim_deg: f64,
    opts: TrajectoryOptions,
) -> Result<ViewSet> {
    if radius <= 0.0 {
        return Err(Error::invalid("surround radius must be positive"));
    }
    if num_views == 0 {
        return Err(Error::invalid("surround trajectory needs V >= 1"));
    }
    let (lo, hi) = opts.elev_band_deg;
    if hi < lo {
        return Err(Error::invalid("elevation band upper bound below lower"));
    }
    let span = hi - lo;
    let focal = opts.focal_px();
    let mut views = Vec::with_capacity(num_views);
    for i in 0..num_views {
        let azim = (i as f64 * delta_azim_deg).to_radians();
        let elev_deg = if span > 0.0 {
            lo + (i as f64 * delta_elev_deg).rem_euclid(span)
        } else {
            lo
        };
        let elev = elev_deg.to_radians();
        let offset = Vector3::new(
            radius * elev.cos() * azim.cos(),
            radius * elev.cos() * azim.sin(),
            radius * elev.sin(),
        );
        views.push(CameraView::new(
            center + offset,
            center,
            Vector3::z(),
            focal,
            opts.image_size,
            opts.image_size,
            i,
        )?);
    }
    Ok(ViewSet {
        views,
        distribution: Distribution::Surround,
        delta_elev_deg,
        delta_azim_deg,
    })
}

/// Regular grid of downward-looking cameras covering the bbox footprint.
pub fn tiled_trajectory(bbox: (Point3<f64>, Point3<f64>), num_views: usize) -> Result<ViewSet> {
    tiled_trajectory_with_options(bbox, num_views, TrajectoryOptions::default())
}

pub fn tiled_trajectory_with_options(
    bbox: (Point3<f64>, Point3<f64>),
    num_views: usize,
    opts: TrajectoryOptions,
) -> Result<ViewSet> {
    let (lo, hi) = bbox;
    let extent = hi - lo;
    if extent.x <= 0.0 || extent.y <= 0.0 || extent.z < 0.0 {
        return Err(Error::invalid("degenerate bounding box for tiled trajectory"));
    }
    if num_views == 0 {
        return Err(Error::invalid("tiled trajectory needs V >= 1"));
    }
    let cols = (num_views as f64).sqrt().ceil() as usize;
    let rows = num_views.div_ceil(cols);
    let cell_w = extent.x / cols as f64;
    let cell_d = extent.y / rows as f64;
    // Height chosen so each cell fits comfortably inside its own frustum.
    let half_fov = (opts.vfov_deg.to_radians() / 2.0).tan();
    let clearance = (cell_w.max(cell_d) / half_fov).max(0.25 * extent.norm());
    let cam_z = hi.z + clearance;
    let center_floor = Point3::new(
        (lo.x + hi.x) / 2.0,
        (lo.y + hi.y) / 2.0,
        lo.z,
    );
    let focal = opts.focal_px();
    let mut views = Vec::with_capacity(num_views);
    for i in 0..num_views {
        let gx = i % cols;
        let gy = i / cols;
        let cx = lo.x + (gx as f64 + 0.5) * cell_w;
        let cy = lo.y + (gy as f64 + 0.5) * cell_d;
        let cell_floor = Point3::new(cx, cy, lo.z);
        // Downward with a slight inward lean.
        let look_at = cell_floor + (center_floor - cell_floor) * 0.2;
        views.push(CameraView::new(
            Point3::new(cx, cy, cam_z),
            look_at,
            Vector3::y(),
            focal,
            opts.image_size,
            opts.image_size,
            i,
        )?);
    }
    Ok(ViewSet {
        views,
        distribution: Distribution::Tiled,
        delta_elev_deg: 0.0,
        delta_azim_deg: 0.0,
    })
}

/// Raster output of a projection or render: per-pixel color, depth
/// (+inf where nothing was written), and optionally the id of the source
/// point that won the z-buffer.
#[derive(Debug, Clone)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    /// RGB per pixel, row-major.
    pub color: Vec<[f32; 3]>,
    /// Depth in meters, `f32::INFINITY` where empty.
    pub depth: Vec<f32>,
    pub point_id: Option<Vec<i32>>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, background: [f32; 3], with_ids: bool) -> Self {
        let n = width as usize * height as usize;
        RasterImage {
            width,
            height,
            color: vec![background; n],
            depth: vec![f32::INFINITY; n],
            point_id: with_ids.then(|| vec![-1; n]),
        }
    }

    pub fn pixel_index(&self, row: u32, col: u32) -> usize {
        row as usize * self.width as usize + col as usize
    }

    pub fn written(&self, pixel: usize) -> bool {
        self.depth[pixel].is_finite()
    }

    pub fn written_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }

    /// 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width, self.height);
        for (i, px) in self.color.iter().enumerate() {
            let x = (i % self.width as usize) as u32;
            let y = (i / self.width as usize) as u32;
            let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x, y, image::Rgb([q(px[0]), q(px[1]), q(px[2])]));
        }
        buf.save(path)?;
        Ok(())
    }

    /// Raw little-endian f32 depth sidecar with a one-line text header.
    pub fn save_depth(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "DEPTH {} {}", self.width, self.height)?;
        for d in &self.depth {
            w.write_all(&d.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Load a depth sidecar written by [`RasterImage::save_depth`].
pub fn load_depth(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let mut file = std::fs::File::open(path).map_err(|_| Error::NotFound(path.into()))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    let newline = data
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header = std::str::from_utf8(&data[..newline])
        .map_err(|_| Error::format(path, "header is not utf-8"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("DEPTH") {
        return Err(Error::format(path, "header does not start with DEPTH"));
    }
    let width: u32 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, "bad width"))?;
    let height: u32 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, "bad height"))?;
    let body = &data[newline + 1..];
    let expected = width as usize * height as usize * 4;
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} payload bytes, found {}", body.len()),
        ));
    }
    let depth = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((width, height, depth))
}

/// Pinhole projection of a colored cloud with z-buffering. Each covered pixel
/// keeps the color, depth and id of its nearest point; points paint a disk of
/// [`POINT_SPLAT_RADIUS`] pixels.
pub fn project_points(cloud: &PointCloud, view: &CameraView) -> Result<RasterImage> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot project an empty cloud"));
    }
    let mut img = RasterImage::new(view.width, view.height, [0.5, 0.5, 0.5], true);
    let r = POINT_SPLAT_RADIUS;
    let r2 = r * r;
    for (idx, (p, color)) in cloud
        .positions()
        .iter()
        .zip(cloud.colors())
        .enumerate()
    {
        let Some((u, v, z)) = view.project(p) else {
            continue;
        };
        let z = z as f32;
        let col = [color.x as f32, color.y as f32, color.z as f32];
        let c0 = ((u - r - 0.5).floor().max(0.0)) as u32;
        let c1 = ((u + r - 0.5).ceil()).min(view.width as f64 - 1.0) as u32;
        let r0 = ((v - r - 0.5).floor().max(0.0)) as u32;
        let r1 = ((v + r - 0.5).ceil()).min(view.height as f64 - 1.0) as u32;
        if u + r < 0.0 || v + r < 0.0 || u - r >= view.width as f64 || v - r >= view.height as f64
        {
            continue;
        }
        for row in r0..=r1 {
            for cc in c0..=c1 {
                let dx = cc as f64 + 0.5 - u;
                let dy = row as f64 + 0.5 - v;
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                let pix = img.pixel_index(row, cc);
                if z < img.depth[pix] {
                    img.depth[pix] = z;
                    img.color[pix] = col;
                    if let Some(ids) = &mut img.point_id {
                        ids[pix] = idx as i32;
                    }
                }
            }
        }
    }
    Ok(img)
}

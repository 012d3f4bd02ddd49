//! Shared geometric primitives: colored point clouds, rigid transforms and
//! scale measures used throughout the pipeline.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};

/// A colored 3D point cloud with optional per-point integer labels.
///
/// Positions are meters, colors are RGB in `[0, 1]`. Labels, when present,
/// run parallel to the positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point3<f64>>,
    colors: Vec<Vector3<f64>>,
    labels: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<Point3<f64>>,
        colors: Vec<Vector3<f64>>,
        labels: Option<Vec<i32>>,
    ) -> Result<Self> {
        if positions.len() != colors.len() {
            return Err(Error::invalid(format!(
                "position/color length mismatch: {} vs {}",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(Error::invalid(format!(
                    "label length {} does not match point count {}",
                    l.len(),
                    positions.len()
                )));
            }
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.coords.iter().all(|c| c.is_finite()) {
                return Err(Error::invalid(format!("non-finite position at index {i}")));
            }
        }
        for (i, c) in colors.iter().enumerate() {
            if !c.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!(
                    "color out of [0,1] at index {i}: {c:?}"
                )));
            }
        }
        Ok(PointCloud {
            positions,
            colors,
            labels,
        })
    }

    /// Cloud with a uniform mid-gray color, for positional-only data.
    pub fn from_positions(positions: Vec<Point3<f64>>) -> Result<Self> {
        let colors = vec![Vector3::new(0.5, 0.5, 0.5); positions.len()];
        Self::new(positions, colors, None)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3<f64>] {
        &self.positions
    }

    pub fn colors(&self) -> &[Vector3<f64>] {
        &self.colors
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn with_labels(&self, labels: Vec<i32>) -> Result<Self> {
        Self::new(self.positions.clone(), self.colors.clone(), Some(labels))
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        bounding_box(&self.positions)
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        centroid(&self.positions)
    }
}

/// Proper rigid transform: rotation, translation, and the RMSE of the
/// registration that produced it (when applicable).
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub rmse: Option<f64>,
}

const ORTHONORMALITY_TOL: f64 = 1e-9;

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            rmse: None,
        }
    }

    /// Build a transform, checking the rotation is orthonormal with
    /// determinant +1 (within 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation * rotation.transpose();
        let max_dev = (gram - Matrix3::identity()).abs().max();
        if max_dev > ORTHONORMALITY_TOL {
            return Err(Error::invalid(format!(
                "rotation not orthonormal (max deviation {max_dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(Error::invalid(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(RigidTransform {
            rotation,
            translation,
            rmse: None,
        })
    }

    pub fn with_rmse(mut self, rmse: f64) -> Self {
        self.rmse = Some(rmse);
        self
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rot_inv = self.rotation.transpose();
        RigidTransform {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
            rmse: None,
        }
    }

    /// Composition: `self` applied after `other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            rmse: None,
        }
    }
}

/// Apply a rigid transform to every position of a cloud; colors and labels
/// pass through unchanged.
pub fn apply_rigid(cloud: &PointCloud, transform: &RigidTransform) -> PointCloud {
    let positions = cloud
        .positions
        .iter()
        .map(|p| transform.apply_point(p))
        .collect();
    PointCloud {
        positions,
        colors: cloud.colors.clone(),
        labels: cloud.labels.clone(),
    }
}

pub fn bounding_box(points: &[Point3<f64>]) -> Option<(Point3<f64>, Point3<f64>)> {
    let first = points.first()?;
    let mut lo = *first;
    let mut hi = *first;
    for p in &points[1..] {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    Some((lo, hi))
}

pub fn centroid(points: &[Point3<f64>]) -> Option<Point3<f64>> {
    if points.is_empty() {
        return None;
    }
    let sum = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Some(Point3::from(sum / points.len() as f64))
}

/// How the scale of a point set is measured when computing rescale ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiameterMode {
    /// Axis-aligned bounding-box diagonal. O(n) and the default.
    BboxDiagonal,
    /// Exact maximum pairwise distance. O(n^2), for comparison runs.
    MaxPairwise,
}

/// Diameter of a point set: the axis-aligned bounding-box diagonal.
pub fn diameter(points: &[Point3<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid(format!(
            "diameter requires at least 2 points, got {}",
            points.len()
        )));
    }
    let (lo, hi) = bounding_box(points).expect("nonempty");
    Ok((hi - lo).norm())
}

/// Exact maximum pairwise distance, available behind a config flag.
pub fn diameter_max_pairwise(points: &[Point3<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid(format!(
            "diameter requires at least 2 points, got {}",
            points.len()
        )));
    }
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d = (points[i] - points[j]).norm_squared();
            if d > best {
                best = d;
            }
        }
    }
    Ok(best.sqrt())
}

pub fn diameter_with_mode(points: &[Point3<f64>], mode: DiameterMode) -> Result<f64> {
    match mode {
        DiameterMode::BboxDiagonal => diameter(points),
        DiameterMode::MaxPairwise => diameter_max_pairwise(points),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        )
        .normalize();
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            .into_inner()
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        let positions = (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 - 2.0,
                )
            })
            .collect();
        PointCloud::from_positions(positions).unwrap()
    }

    #[test]
    fn identity_transform_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 50);
        let out = apply_rigid(&cloud, &RigidTransform::identity());
        assert_eq!(out, cloud);
    }

    #[test]
    fn rotation_about_z_maps_x_to_y() {
        let rot = nalgebra::Rotation3::from_axis_angle(
            &Vector3::z_axis(),
            std::f64::consts::FRAC_PI_2,
        )
        .into_inner();
        let t = RigidTransform::new(rot, Vector3::zeros()).unwrap();
        let cloud =
            PointCloud::from_positions(vec![Point3::new(1.0, 0.0, 0.0)]).unwrap();
        let out = apply_rigid(&cloud, &t);
        assert_relative_eq!(out.positions()[0].x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(out.positions()[0].y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.positions()[0].z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn apply_then_inverse_recovers_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cloud = random_cloud(&mut rng, 100);
        let t = RigidTransform::new(
            random_rotation(&mut rng),
            Vector3::new(0.3, -1.2, 2.4),
        )
        .unwrap();
        let back = apply_rigid(&apply_rigid(&cloud, &t), &t.inverse());
        for (a, b) in back.positions().iter().zip(cloud.positions()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn unit_cube_diameter_is_sqrt3() {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push(Point3::new(x, y, z));
                }
            }
        }
        assert_relative_eq!(diameter(&pts).unwrap(), 3f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn axis_pair_diameter_is_distance() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 2.5, 0.0)];
        assert_relative_eq!(diameter(&pts).unwrap(), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn diameter_matches_bruteforce_bbox() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3<f64>> = (0..100)
            .map(|_| {
                Point3::new(
                    rng.gen::<f64>() * 10.0,
                    rng.gen::<f64>() * 3.0,
                    rng.gen::<f64>() * 7.0,
                )
            })
            .collect();
        // Exhaustive per-axis min/max oracle.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &pts {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let expected = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)
            + (hi[2] - lo[2]).powi(2))
        .sqrt();
        assert_relative_eq!(diameter(&pts).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn diameter_rejects_single_point() {
        assert!(diameter(&[Point3::origin()]).is_err());
    }

    #[test]
    fn rejects_bad_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn cloud_invariants_enforced() {
        let p = vec![Point3::new(0.0, 0.0, f64::NAN)];
        let c = vec![Vector3::new(0.5, 0.5, 0.5)];
        assert!(PointCloud::new(p, c, None).is_err());

        let p = vec![Point3::origin()];
        let c = vec![Vector3::new(1.5, 0.5, 0.5)];
        assert!(PointCloud::new(p, c, None).is_err());

        let p = vec![Point3::origin()];
        let c = vec![Vector3::new(0.5, 0.5, 0.5)];
        assert!(PointCloud::new(p, c, Some(vec![1, 2])).is_err());
    }
}

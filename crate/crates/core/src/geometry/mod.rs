//! Geometric primitives: clouds, sampling, neighborhoods, normals and
//! SPFH descriptors.

mod normals;
mod sampling;
mod spfh;

pub use normals::{estimate_normals, NormalEstimate, DEFAULT_NORMAL_K};
pub use sampling::{build_patches, farthest_point_sample, farthest_point_sample_from, knn, PatchSet};
pub use spfh::{pair_features, spfh_descriptor, PairFeature, PairFeatureVariant, SpfhDescriptor, DEFAULT_BINS};

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Ordered 3D points with optional unit normals.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud { points, normals: None }
    }

    /// Normals must be unit length (to 1e-6) and match the point count.
    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != points.len() {
            return Err(Error::Shape(format!(
                "{} normals for {} points",
                normals.len(),
                points.len()
            )));
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::Shape(format!("normal {i} is not unit length")));
        }
        Ok(PointCloud {
            points,
            normals: Some(normals),
        })
    }

    pub fn from_xyz(points: &[[f64; 3]]) -> Self {
        Self::new(points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Result<Vec3> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Ok(self.points.iter().sum::<Vec3>() / self.points.len() as f64)
    }

    /// Points (and normals) at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| indices.iter().map(|&i| ns[i]).collect()),
        }
    }

    /// Apply `p -> scale * p + shift`; normals are kept (valid for positive scale).
    pub fn scaled_shifted(&self, scale: f64, shift: Vec3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p * scale + shift).collect(),
            normals: self.normals.clone(),
        }
    }

    /// Rotate points and normals.
    pub fn rotated(&self, rotation: &nalgebra::Rotation3<f64>) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| rotation * p).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| rotation * n).collect()),
        }
    }

    pub fn without_normals(&self) -> PointCloud {
        PointCloud::new(self.points.clone())
    }
}

/// Center on the centroid and scale so the farthest point has unit norm.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    let centroid = cloud.centroid()?;
    let centered: Vec<Vec3> = cloud.points.iter().map(|p| p - centroid).collect();
    let radius = centered.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let points = if radius > 0.0 {
        centered.iter().map(|p| p / radius).collect()
    } else {
        vec![Vec3::zeros(); centered.len()]
    };
    Ok(PointCloud {
        points,
        normals: cloud.normals.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_normalization() {
        let c = PointCloud::from_xyz(&[[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        let n = normalize_cloud(&c).unwrap();
        assert_eq!(n.points(), &[Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)]);
    }

    #[test]
    fn random_cloud_is_centered_and_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..100)
            .map(|_| Vec3::new(rng.random_range(-3.0..5.0), rng.random_range(0.0..2.0), rng.random_range(-1.0..1.0)))
            .collect();
        let n = normalize_cloud(&PointCloud::new(pts)).unwrap();
        assert!(n.centroid().unwrap().norm() < 1e-6);
        let max = n.points().iter().map(|p| p.norm()).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sphere_samples_are_unchanged() {
        // antipodal pairs: centroid exactly zero, all norms one
        let pts = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
        ];
        let n = normalize_cloud(&PointCloud::new(pts.clone())).unwrap();
        assert_eq!(n.points(), &pts[..]);
    }

    #[test]
    fn coincident_points_collapse_to_origin() {
        let c = PointCloud::from_xyz(&[[1.0, 2.0, 3.0]; 3]);
        let n = normalize_cloud(&c).unwrap();
        assert!(n.points().iter().all(|p| *p == Vec3::zeros()));
    }

    #[test]
    fn empty_cloud_is_an_error() {
        assert!(matches!(normalize_cloud(&PointCloud::default()), Err(Error::EmptyCloud)));
    }
}

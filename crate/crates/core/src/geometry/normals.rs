use nalgebra::{Matrix3, SymmetricEigen};

use super::sampling::knn;
use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

pub const DEFAULT_NORMAL_K: usize = 16;

/// Cloud with estimated normals plus the number of points whose
/// neighborhood was collinear (or collapsed to a point).
#[derive(Clone, Debug)]
pub struct NormalEstimate {
    pub cloud: PointCloud,
    pub degenerate: usize,
}

/// PCA normals over the `k` nearest neighbors (the point itself included),
/// oriented away from the cloud centroid.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<NormalEstimate> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if k < 3 {
        return Err(Error::Config(format!("normal estimation needs k >= 3, got {k}")));
    }
    let k = k.min(cloud.len());
    let centroid = cloud.centroid()?;
    let points = cloud.points();
    let mut normals = Vec::with_capacity(points.len());
    let mut degenerate = 0;
    for p in points {
        let idx = knn(cloud, p, k)?;
        let (normal, flat) = pca_normal(idx.iter().map(|&i| points[i]));
        if flat {
            degenerate += 1;
        }
        normals.push(orient(normal, p - centroid));
    }
    Ok(NormalEstimate {
        cloud: PointCloud::with_normals(points.to_vec(), normals)?,
        degenerate,
    })
}

/// Smallest-eigenvalue eigenvector of the neighborhood covariance, and whether
/// the neighborhood failed to span a plane.
fn pca_normal(neighbors: impl Iterator<Item = Vec3> + Clone) -> (Vec3, bool) {
    let count = neighbors.clone().count() as f64;
    let mean = neighbors.clone().sum::<Vec3>() / count;
    let cov = neighbors.fold(Matrix3::zeros(), |acc, q| {
        let d = q - mean;
        acc + d * d.transpose()
    }) / count;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[2]];
    if largest <= f64::EPSILON * 1e-3 {
        return (Vec3::z(), true);
    }
    let flat = eig.eigenvalues[order[1]] <= 1e-12 * largest;
    let n = eig.eigenvectors.column(order[0]).into_owned();
    (n.normalize(), flat)
}

fn orient(n: Vec3, outward: Vec3) -> Vec3 {
    let dot = n.dot(&outward);
    let tol = 1e-9 * outward.norm().max(1e-12);
    if dot < -tol {
        -n
    } else if dot > tol {
        n
    } else {
        let imax = n.iamax();
        if n[imax] < 0.0 {
            -n
        } else {
            n
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
                .collect(),
        )
    }

    #[test]
    fn plane_normals_are_axis_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let est = estimate_normals(&plane(&mut rng, 200), 16).unwrap();
        assert_eq!(est.degenerate, 0);
        for n in est.cloud.normals().unwrap() {
            assert!((n.z.abs() - 1.0).abs() < 1e-9, "{n:?}");
            // in-plane points give a zero outward dot product -> tie rule
            assert!(n.z > 0.0);
        }
    }

    #[test]
    fn rotated_plane_normals_rotate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = plane(&mut rng, 200);
        let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let est = estimate_normals(&cloud.rotated(&rot), 16).unwrap();
        let axis = rot * Vec3::z();
        for n in est.cloud.normals().unwrap() {
            let d = (n - axis).norm().min((n + axis).norm());
            assert!(d < 1e-5, "{n:?} vs {axis:?}");
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Vec3> = (0..1024)
            .map(|_| loop {
                let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let len = v.norm();
                if len > 1e-3 && len <= 1.0 {
                    break v / len;
                }
            })
            .collect();
        let est = estimate_normals(&PointCloud::new(pts.clone()), 16).unwrap();
        let cos10 = 10f64.to_radians().cos();
        for (p, n) in pts.iter().zip(est.cloud.normals().unwrap()) {
            assert!(n.dot(p) >= cos10, "angle too large at {p:?}");
        }
    }

    #[test]
    fn collinear_points_are_flagged() {
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let est = estimate_normals(&PointCloud::new(pts), 4).unwrap();
        assert_eq!(est.degenerate, 10);
        for n in est.cloud.normals().unwrap() {
            assert!(n.x.abs() < 1e-9 && (n.norm() - 1.0).abs() < 1e-9);
        }
    }
}

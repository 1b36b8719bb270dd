use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{normalize_cloud, PointCloud, Vec3};

/// Primitive surfaces available to the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Cone,
    Cube,
    Cylinder,
    Sphere,
    Torus,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Cone, Shape::Cube, Shape::Cylinder, Shape::Sphere, Shape::Torus];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Cone => "cone",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Sphere => "sphere",
            Shape::Torus => "torus",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|shape| shape.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape `{s}`")))
    }
}

const TORUS_MAJOR: f64 = 1.0;
const TORUS_MINOR: f64 = 0.35;
const JITTER: f64 = 0.02;

/// `n` points drawn uniformly by area from the shape's surface, in its
/// canonical pose (unit sphere, cube `[-1, 1]^3`, radius-1 height-2 cylinder
/// and cone, torus with radii 1 and 0.35).
pub fn sample_surface<R: Rng + ?Sized>(shape: Shape, n: usize, rng: &mut R) -> Vec<Vec3> {
    (0..n).map(|_| sample_one(shape, rng)).collect()
}

fn sample_one<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Vec3 {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    match shape {
        Shape::Sphere => loop {
            let v = Vec3::new(u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0));
            let len = v.norm();
            if len > 1e-6 && len <= 1.0 {
                return v / len;
            }
        },
        Shape::Cube => {
            let face = (u(0.0, 6.0) as usize).min(5);
            let (a, b) = (u(-1.0, 1.0), u(-1.0, 1.0));
            let sign = if face.is_multiple_of(2) { 1.0 } else { -1.0 };
            match face / 2 {
                0 => Vec3::new(sign, a, b),
                1 => Vec3::new(a, sign, b),
                _ => Vec3::new(a, b, sign),
            }
        }
        Shape::Cylinder => {
            // side area 4 pi, each cap pi
            let pick = u(0.0, 6.0);
            let angle = u(0.0, 2.0 * PI);
            if pick < 4.0 {
                Vec3::new(angle.cos(), angle.sin(), u(-1.0, 1.0))
            } else {
                let r = u(0.0, 1.0).sqrt();
                let z = if pick < 5.0 { 1.0 } else { -1.0 };
                Vec3::new(r * angle.cos(), r * angle.sin(), z)
            }
        }
        Shape::Cone => {
            // apex at z = 1, base radius 1 at z = -1; lateral area pi sqrt(5), base pi
            let lateral = 5f64.sqrt();
            let angle = u(0.0, 2.0 * PI);
            let t = u(0.0, 1.0).sqrt();
            if u(0.0, lateral + 1.0) < lateral {
                Vec3::new(t * angle.cos(), t * angle.sin(), 1.0 - 2.0 * t)
            } else {
                Vec3::new(t * angle.cos(), t * angle.sin(), -1.0)
            }
        }
        Shape::Torus => loop {
            let (a, b) = (u(0.0, 2.0 * PI), u(0.0, 2.0 * PI));
            let ring = TORUS_MAJOR + TORUS_MINOR * b.cos();
            if u(0.0, TORUS_MAJOR + TORUS_MINOR) <= ring {
                return Vec3::new(ring * a.cos(), ring * a.sin(), TORUS_MINOR * b.sin());
            }
        },
    }
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation3<f64> {
    let axis = sample_one(Shape::Sphere, rng);
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(0.0..2.0 * PI))
}

/// `per_class` randomly rotated, jittered and normalized instances of each
/// shape; labels follow the sorted class names.
pub fn synth_shapes(classes: &[Shape], per_class: usize, n_points: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 || classes.is_empty() || n_points == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut shapes = classes.to_vec();
    shapes.sort();
    shapes.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, JITTER).expect("valid jitter");
    let mut out = Dataset {
        classes: shapes.iter().map(|s| s.to_string()).collect(),
        ..Dataset::default()
    };
    for (label, &shape) in shapes.iter().enumerate() {
        for i in 0..per_class {
            let rot = random_rotation(&mut rng);
            let pts: Vec<Vec3> = sample_surface(shape, n_points, &mut rng)
                .into_iter()
                .map(|p| rot * p + Vec3::new(jitter.sample(&mut rng), jitter.sample(&mut rng), jitter.sample(&mut rng)))
                .collect();
            out.clouds.push(normalize_cloud(&PointCloud::new(pts))?);
            out.labels.push(label);
            out.names.push(format!("{shape}/{shape}_{i:04}.xyz"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::chamfer_distance;

    #[test]
    fn surfaces_lie_on_their_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in sample_surface(Shape::Sphere, 500, &mut rng) {
            assert!((p.norm() - 1.0).abs() < 1e-6);
        }
        for p in sample_surface(Shape::Cube, 500, &mut rng) {
            assert!((p.amax() - 1.0).abs() < 1e-12);
        }
        for p in sample_surface(Shape::Torus, 500, &mut rng) {
            let ring = (p.x * p.x + p.y * p.y).sqrt() - TORUS_MAJOR;
            assert!((ring * ring + p.z * p.z - TORUS_MINOR * TORUS_MINOR).abs() < 1e-9);
        }
        for p in sample_surface(Shape::Cone, 500, &mut rng) {
            let r = (p.x * p.x + p.y * p.y).sqrt();
            assert!((p.z + 1.0).abs() < 1e-12 || (r - (1.0 - p.z) / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dataset_size_and_determinism() {
        let classes = [Shape::Sphere, Shape::Cube, Shape::Torus];
        let a = synth_shapes(&classes, 3, 128, 1).unwrap();
        assert_eq!(a.len(), 9);
        assert_eq!(a.classes, vec!["cube", "sphere", "torus"]);
        let b = synth_shapes(&classes, 3, 128, 1).unwrap();
        assert_eq!(a.clouds, b.clouds);
        let c = synth_shapes(&classes, 3, 128, 2).unwrap();
        let diff = a.clouds[0]
            .points()
            .iter()
            .zip(c.clouds[0].points())
            .map(|(p, q)| (p - q).norm())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn classes_are_separable() {
        let data = synth_shapes(&Shape::ALL, 10, 256, 4).unwrap();
        let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                let d = chamfer_distance(data.clouds[i].points(), data.clouds[j].points()).unwrap();
                let slot = if data.labels[i] == data.labels[j] { &mut intra } else { &mut inter };
                slot.0 += d;
                slot.1 += 1;
            }
        }
        assert!(inter.0 / inter.1 as f64 > intra.0 / intra.1 as f64);
    }
}

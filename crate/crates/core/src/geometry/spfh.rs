use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 11;

/// How the Darboux-frame angles are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairFeatureVariant {
    /// `alpha = v . n_i`, `theta = atan2(w . n_i, u . n_i)` with a unit `v`.
    #[default]
    Standard,
    /// The formulas exactly as printed: `alpha = v . n_q`,
    /// `theta = atan2(w . n_i, u . n_q)`, unnormalized `v`. Kept for auditing;
    /// `alpha` is identically zero under this reading.
    PaperLiteral,
}

impl std::str::FromStr for PairFeatureVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "paper-literal" => Ok(Self::PaperLiteral),
            other => Err(Error::Config(format!("unknown pair-feature-variant `{other}`"))),
        }
    }
}

/// Angular relation between a query point and one neighbor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairFeature {
    pub alpha: f64,
    pub phi: f64,
    pub theta: f64,
    /// The offset was parallel to the query normal so `v` was undefined.
    pub degenerate: bool,
}

pub fn pair_features(p_q: &Vec3, n_q: &Vec3, p_i: &Vec3, n_i: &Vec3, variant: PairFeatureVariant) -> Result<PairFeature> {
    let diff = p_i - p_q;
    let dist = diff.norm();
    if dist == 0.0 {
        return Err(Error::CoincidentPair);
    }
    let dhat = diff / dist;
    let u = *n_q;
    let phi = u.dot(&dhat).clamp(-1.0, 1.0);
    match variant {
        PairFeatureVariant::Standard => {
            let v = dhat.cross(&u);
            let vn = v.norm();
            if vn < 1e-12 {
                return Ok(PairFeature {
                    alpha: 0.0,
                    phi: phi.signum(),
                    theta: 0.0,
                    degenerate: true,
                });
            }
            let v = v / vn;
            let w = u.cross(&v);
            Ok(PairFeature {
                alpha: v.dot(n_i).clamp(-1.0, 1.0),
                phi,
                theta: w.dot(n_i).atan2(u.dot(n_i)),
                degenerate: false,
            })
        }
        PairFeatureVariant::PaperLiteral => {
            let v = diff.cross(&u);
            let w = u.cross(&v);
            // (diff x u) . n_q evaluated as diff . (u x n_q): with u = n_q the
            // inner cross product is exactly zero in floating point
            let alpha = diff.dot(&u.cross(n_q));
            Ok(PairFeature {
                alpha,
                phi,
                theta: w.dot(n_i).atan2(u.dot(n_q)),
                degenerate: v.norm() < 1e-12 * dist,
            })
        }
    }
}

/// Three concatenated normalized histograms (alpha, phi, theta).
#[derive(Clone, Debug, PartialEq)]
pub struct SpfhDescriptor {
    pub histogram: Vec<f64>,
}

impl SpfhDescriptor {
    pub fn bins(&self) -> usize {
        self.histogram.len() / 3
    }

    pub fn sub_histograms(&self) -> [&[f64]; 3] {
        let b = self.bins();
        [&self.histogram[..b], &self.histogram[b..2 * b], &self.histogram[2 * b..]]
    }
}

fn bin_of(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = ((x - lo) / (hi - lo) * bins as f64).floor();
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

/// SPFH of `center` over `neighbors`; neighbors coinciding with the center
/// are skipped.
pub fn spfh_descriptor(
    cloud: &PointCloud,
    center: usize,
    neighbors: &[usize],
    bins: usize,
    variant: PairFeatureVariant,
) -> Result<SpfhDescriptor> {
    let normals = cloud.normals().ok_or(Error::MissingNormals)?;
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let points = cloud.points();
    let (p_q, n_q) = (points[center], normals[center]);
    let mut histogram = vec![0.0; 3 * bins];
    let mut pairs = 0usize;
    for &i in neighbors {
        if i == center || points[i] == p_q {
            continue;
        }
        let f = pair_features(&p_q, &n_q, &points[i], &normals[i], variant)?;
        histogram[bin_of(f.alpha, -1.0, 1.0, bins)] += 1.0;
        histogram[bins + bin_of(f.phi, -1.0, 1.0, bins)] += 1.0;
        histogram[2 * bins + bin_of(f.theta, -PI, PI, bins)] += 1.0;
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::DegenerateNeighborhood);
    }
    let scale = 1.0 / pairs as f64;
    histogram.iter_mut().for_each(|h| *h *= scale);
    Ok(SpfhDescriptor { histogram })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STD: PairFeatureVariant = PairFeatureVariant::Standard;

    #[test]
    fn hand_computed_frames() {
        let z = Vec3::z();
        let f = pair_features(&Vec3::zeros(), &z, &Vec3::x(), &z, STD).unwrap();
        assert_eq!((f.alpha, f.phi, f.theta), (0.0, 0.0, 0.0));
        let g = pair_features(&Vec3::zeros(), &z, &Vec3::x(), &Vec3::x(), STD).unwrap();
        assert!(g.alpha.abs() < 1e-12 && g.phi.abs() < 1e-12);
        assert!((g.theta - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_pair_is_an_error() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert!(matches!(pair_features(&p, &Vec3::z(), &p, &Vec3::z(), STD), Err(Error::CoincidentPair)));
    }

    #[test]
    fn offset_along_normal_is_degenerate() {
        let f = pair_features(&Vec3::zeros(), &Vec3::z(), &Vec3::new(0.0, 0.0, -2.0), &Vec3::x(), STD).unwrap();
        assert!(f.degenerate);
        assert_eq!((f.alpha, f.phi, f.theta), (0.0, -1.0, 0.0));
    }

    #[test]
    fn literal_alpha_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let r = |rng: &mut ChaCha8Rng| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (pq, pi) = (r(&mut rng), r(&mut rng));
            let (nq, ni) = (r(&mut rng).normalize(), r(&mut rng).normalize());
            let f = pair_features(&pq, &nq, &pi, &ni, PairFeatureVariant::PaperLiteral).unwrap();
            assert_eq!(f.alpha, 0.0);
        }
    }

    fn planar_cloud() -> PointCloud {
        let mut pts = vec![Vec3::zeros()];
        for k in 0..8 {
            let a = k as f64 * PI / 4.0 + 0.1;
            pts.push(Vec3::new(a.cos(), a.sin(), 0.0) * (0.5 + 0.1 * k as f64));
        }
        let normals = vec![Vec3::z(); pts.len()];
        PointCloud::with_normals(pts, normals).unwrap()
    }

    #[test]
    fn plane_concentrates_alpha_and_theta() {
        let c = planar_cloud();
        let d = spfh_descriptor(&c, 0, &(0..9).collect::<Vec<_>>(), 11, STD).unwrap();
        let [a, p, t] = d.sub_histograms();
        assert_eq!(a[5], 1.0);
        assert_eq!(p[5], 1.0);
        assert_eq!(t[5], 1.0);
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let c = planar_cloud();
        let a = spfh_descriptor(&c, 0, &[1, 2, 3, 4, 5, 6, 7, 8], 11, STD).unwrap();
        let b = spfh_descriptor(&c, 0, &[8, 3, 0, 5, 1, 7, 2, 6, 4], 11, STD).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_leaves_descriptor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec3> = (0..32)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize())
            .collect();
        let c = PointCloud::with_normals(pts.clone(), pts).unwrap();
        let nbrs: Vec<usize> = (0..32).collect();
        let base = spfh_descriptor(&c, 0, &nbrs, 11, STD).unwrap();
        let rot = Rotation3::from_euler_angles(1.0, 0.5, -0.7);
        let turned = spfh_descriptor(&c.rotated(&rot), 0, &nbrs, 11, STD).unwrap();
        for (x, y) in base.histogram.iter().zip(&turned.histogram) {
            assert!((x - y).abs() < 1e-5);
        }
        for h in base.sub_histograms() {
            assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_neighborhood_and_missing_normals() {
        let c = PointCloud::with_normals(vec![Vec3::zeros(); 3], vec![Vec3::z(); 3]).unwrap();
        assert!(matches!(spfh_descriptor(&c, 0, &[0, 1, 2], 11, STD), Err(Error::DegenerateNeighborhood)));
        let bare = c.without_normals();
        assert!(matches!(spfh_descriptor(&bare, 0, &[1], 11, STD), Err(Error::MissingNormals)));
    }
}

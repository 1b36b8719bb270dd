use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, PointCloud, Vec3};

/// Parse `x y z` or `x y z nx ny nz` rows; blank lines and `#` comments are
/// skipped. `path` only labels errors.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let fail = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut columns = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| fail(i + 1, format!("`{tok}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != 3 && values.len() != 6 {
            return Err(fail(i + 1, format!("expected 3 or 6 values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(fail(i + 1, "non-finite coordinate".into()));
        }
        match columns {
            None => columns = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(fail(i + 1, format!("expected {c} values like the first row, found {}", values.len())));
            }
            _ => {}
        }
        points.push(Vec3::new(values[0], values[1], values[2]));
        if values.len() == 6 {
            let n = Vec3::new(values[3], values[4], values[5]);
            let len = n.norm();
            if len == 0.0 {
                return Err(fail(i + 1, "zero normal".into()));
            }
            normals.push(n / len);
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if normals.is_empty() {
        Ok(PointCloud::new(points))
    } else {
        PointCloud::with_normals(points, normals)
    }
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

/// Write one point per line with 9 significant digits, normals included
/// when present.
pub fn save_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 48);
    for (i, p) in cloud.points().iter().enumerate() {
        write!(out, "{:.8e} {:.8e} {:.8e}", p.x, p.y, p.z).unwrap();
        if let Some(normals) = cloud.normals() {
            let n = normals[i];
            write!(out, " {:.8e} {:.8e} {:.8e}", n.x, n.y, n.z).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Bring a cloud to exactly `n` points: farthest-point downsampling when it
/// has more, random duplication of existing points when it has fewer.
pub fn resample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let len = cloud.len();
    let indices = if len > n {
        farthest_point_sample(cloud, n, seed)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..len).collect();
        idx.extend((len..n).map(|_| rng.random_range(0..len)));
        idx
    };
    Ok(cloud.select(&indices))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_simple_and_commented_files() {
        let c = parse_xyz("0 0 0\n1 0 0\n", Path::new("a.xyz")).unwrap();
        assert_eq!(c.len(), 2);
        let c = parse_xyz("# header\n\n0 0 0 0 0 2\n1 0 0 0 0 1\n", Path::new("a.xyz")).unwrap();
        assert_eq!(c.normals().unwrap()[0], Vec3::z());
    }

    #[test]
    fn malformed_lines_name_their_number() {
        let err = parse_xyz("a b c\n", Path::new("bad.xyz")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = parse_xyz("0 0 0\n1 2\n", Path::new("bad.xyz")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(parse_xyz("# nothing\n", Path::new("e.xyz")), Err(Error::EmptyCloud)));
    }

    #[test]
    fn roundtrip_keeps_nine_digits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        let pts = vec![Vec3::new(0.123456789123, -3.5e-7, 12345.6789), Vec3::new(1.0 / 3.0, 2.0 / 3.0, -1.0)];
        let cloud = PointCloud::new(pts.clone());
        save_xyz(&path, &cloud).unwrap();
        let back = load_xyz(&path).unwrap();
        for (a, b) in pts.iter().zip(back.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-8 * a[k].abs());
            }
        }
    }

    #[test]
    fn resampling_hits_the_target_size() {
        let pts: Vec<Vec3> = (0..2048).map(|i| Vec3::new(i as f64, (i * i % 17) as f64, 0.0)).collect();
        let cloud = PointCloud::new(pts.clone());
        let down = resample(&cloud, 1024, 3).unwrap();
        assert_eq!(down.len(), 1024);
        assert!(down.points().iter().all(|p| pts.contains(p)));
        let small = PointCloud::new(pts[..10].to_vec());
        let up = resample(&small, 25, 3).unwrap();
        assert_eq!(up.len(), 25);
        assert_eq!(&up.points()[..10], &pts[..10]);
        assert!(up.points().iter().all(|p| pts[..10].contains(p)));
    }
}

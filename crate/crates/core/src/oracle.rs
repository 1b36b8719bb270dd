//! Brute-force reference implementations. Deliberately naive: every quantity
//! is recomputed from scratch so they share no shortcuts with the fast paths.

use crate::geometry::Vec3;

/// Greedy farthest point sampling that re-evaluates, at every step, the
/// distance from each unselected candidate to every selected point.
pub fn fps_exhaustive(points: &[Vec3], count: usize, first: usize) -> Vec<usize> {
    let mut selected = vec![first];
    while selected.len() < count.min(points.len()) {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            let mut nearest = f64::INFINITY;
            for &s in &selected {
                let d = (p - points[s]).norm_squared();
                if d < nearest {
                    nearest = d;
                }
            }
            match best {
                Some((_, b)) if nearest <= b => {}
                _ => best = Some((i, nearest)),
            }
        }
        selected.push(best.expect("a candidate remains").0);
    }
    selected
}

/// k nearest indices by sorting every point on (squared distance, index).
pub fn knn_full_sort(points: &[Vec3], query: &Vec3, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..points.len()).collect();
    all.sort_by(|&a, &b| {
        let da = (points[a] - query).norm_squared();
        let db = (points[b] - query).norm_squared();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    all.truncate(k);
    all
}

/// Symmetric squared-L2 Chamfer distance with explicit double loops.
pub fn chamfer_double_loop(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut ab = 0.0;
    for x in a {
        let mut best = f64::INFINITY;
        for y in b {
            let d = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2);
            if d < best {
                best = d;
            }
        }
        ab += best;
    }
    let mut ba = 0.0;
    for y in b {
        let mut best = f64::INFINITY;
        for x in a {
            let d = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2);
            if d < best {
                best = d;
            }
        }
        ba += best;
    }
    ab / a.len() as f64 + ba / b.len() as f64
}

/// `floor(num / den * g)` in integer arithmetic.
pub fn masked_count_exact(g: usize, num: usize, den: usize) -> usize {
    g * num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_cases() {
        let pts = [Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::new(10.0, 0.0, 0.0)];
        // 1 and 2 tie at distance 1 from the selected set; the lower index wins
        assert_eq!(fps_exhaustive(&pts, 3, 0), vec![0, 3, 1]);
        assert_eq!(knn_full_sort(&pts, &Vec3::new(0.9, 0.0, 0.0), 2), vec![1, 0]);
        assert_eq!(chamfer_double_loop(&pts[..1], &pts[1..2]), 2.0);
        assert_eq!(masked_count_exact(64, 6, 10), 38);
    }
}

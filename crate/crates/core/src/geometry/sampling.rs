use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

/// Greedy farthest point sampling seeded with a uniformly random first index.
pub fn farthest_point_sample(cloud: &PointCloud, count: usize, seed: u64) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..cloud.len());
    farthest_point_sample_from(cloud, count, first)
}

/// Farthest point sampling starting at `first`. Each further pick maximizes
/// the distance to the already selected set; ties go to the lowest index.
pub fn farthest_point_sample_from(cloud: &PointCloud, count: usize, first: usize) -> Result<Vec<usize>> {
    let points = cloud.points();
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if count == 0 || count > points.len() {
        return Err(Error::SampleCountExceedsCloud {
            requested: count,
            available: points.len(),
        });
    }
    let mut selected = Vec::with_capacity(count);
    let mut taken = vec![false; points.len()];
    selected.push(first);
    taken[first] = true;
    let mut min_dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while selected.len() < count {
        let mut best = usize::MAX;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            // selected points sit at distance zero; a duplicate of a selected
            // point is still a legal (distinct-index) pick once nothing is farther
            if d > best_dist && !taken[i] {
                best = i;
                best_dist = d;
            }
        }
        selected.push(best);
        taken[best] = true;
        let chosen = points[best];
        for (d, p) in min_dist.iter_mut().zip(points) {
            *d = d.min((p - chosen).norm_squared());
        }
    }
    Ok(selected)
}

/// Indices of the `k` points nearest to `query`, ascending by distance with
/// ties broken by the lower index.
pub fn knn(cloud: &PointCloud, query: &Vec3, k: usize) -> Result<Vec<usize>> {
    let points = cloud.points();
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if k > points.len() {
        return Err(Error::KExceedsCloud {
            k,
            available: points.len(),
        });
    }
    let mut keyed: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < keyed.len() && k > 0 {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(cmp);
    Ok(keyed.into_iter().take(k).map(|(_, i)| i).collect())
}

/// `g` patch centers with their centered `k`-neighborhoods.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub center_indices: Vec<usize>,
    pub centers: Vec<Vec3>,
    /// `g` rows of `k` offsets from the row's center.
    pub neighborhoods: Vec<Vec<Vec3>>,
    pub neighbor_indices: Vec<Vec<usize>>,
}

impl PatchSet {
    pub fn groups(&self) -> usize {
        self.centers.len()
    }

    pub fn group_size(&self) -> usize {
        self.neighbor_indices.first().map_or(0, Vec::len)
    }
}

/// FPS centers followed by k-NN grouping, each neighborhood expressed
/// relative to its center.
pub fn build_patches(cloud: &PointCloud, groups: usize, group_size: usize, seed: u64) -> Result<PatchSet> {
    let center_indices = farthest_point_sample(cloud, groups, seed)?;
    patches_from_centers(cloud, center_indices, group_size)
}

pub(crate) fn patches_from_centers(cloud: &PointCloud, center_indices: Vec<usize>, group_size: usize) -> Result<PatchSet> {
    let points = cloud.points();
    let centers: Vec<Vec3> = center_indices.iter().map(|&i| points[i]).collect();
    let mut neighbor_indices = Vec::with_capacity(centers.len());
    let mut neighborhoods = Vec::with_capacity(centers.len());
    for c in &centers {
        let idx = knn(cloud, c, group_size)?;
        neighborhoods.push(idx.iter().map(|&i| points[i] - c).collect());
        neighbor_indices.push(idx);
    }
    Ok(PatchSet {
        center_indices,
        centers,
        neighborhoods,
        neighbor_indices,
    })
}

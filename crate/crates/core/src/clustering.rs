//! Geometric over-segmentation: k-means over back-projected 3-D points with
//! deterministic grid seeding, plus a depth-aware 4-connectivity adjacency
//! graph between the resulting clusters.
//!
//! Clusters are the unit the solver scores as static or dynamic, so the
//! labeling must be bit-reproducible: seeding is a jittered uniform grid
//! snapped to valid pixels, Lloyd runs a fixed iteration count, and
//! assignment ties go to the lowest cluster index.

use crate::frame::RgbdFrame;
use crate::img::Image;
use nalgebra::Vector3;
use thiserror::Error;

/// Label for pixels without a valid depth reading.
pub const INVALID_LABEL: u32 = u32::MAX;

/// Default 3-D gap (meters) above which touching pixels are not considered
/// part of one surface when building cluster adjacency.
pub const DEFAULT_ADJACENCY_DELTA: f64 = 0.10;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k = {k} must be between 1 and the valid pixel count ({valid})")]
    BadK { k: usize, valid: usize },
    #[error("frame has no valid depth pixels")]
    NoValidPixels,
}

/// Output of the over-segmentation.
#[derive(Debug, Clone)]
pub struct ClusterSet {
    pub k: usize,
    /// Per-pixel cluster index; `INVALID_LABEL` where depth is missing.
    pub labels: Image<u32>,
    pub centroids: Vec<Vector3<f64>>,
    pub sizes: Vec<usize>,
    /// False for clusters that ended with no members; they keep their last
    /// centroid and are pinned static downstream.
    pub alive: Vec<bool>,
    /// Row-major `k x k` symmetric adjacency, zero diagonal.
    pub adjacency: Vec<bool>,
}

impl ClusterSet {
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.k + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.k).filter(|&j| self.adjacent(i, j)).count()
    }
}

/// Back-projects every valid pixel; returns (pixel index, point) pairs in
/// row-major order.
fn valid_points(frame: &RgbdFrame) -> Vec<(usize, Vector3<f64>)> {
    let k = &frame.intrinsics;
    let mut points = Vec::new();
    for y in 0..k.height {
        for x in 0..k.width {
            let d = frame.depth.get(x, y) as f64;
            if d > 0.0 {
                let p = k
                    .back_project(x as f64, y as f64, d)
                    .expect("positive depth back-projects");
                points.push((y * k.width + x, p));
            }
        }
    }
    points
}

fn seed_hash(seed: u64, i: u64) -> f64 {
    let mut h = seed ^ i.wrapping_mul(0x9E3779B97F4A7C15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51AFD7ED558CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Picks `k` distinct valid pixels near a jittered uniform grid. The jitter
/// (at most a fifth of a grid cell) only breaks ties between equally spaced
/// seeds; the same seed value always produces the same pixels.
fn grid_seeds(frame: &RgbdFrame, points: &[(usize, Vector3<f64>)], k: usize, seed: u64) -> Vec<Vector3<f64>> {
    let w = frame.width() as f64;
    let h = frame.height() as f64;
    let gx = ((k as f64 * w / h).sqrt().ceil() as usize).max(1);
    let gy = k.div_ceil(gx);
    let jitter = 0.2 * (w / gx as f64).min(h / gy as f64);

    let mut used = vec![false; points.len()];
    let mut seeds = Vec::with_capacity(k);
    for i in 0..k {
        let (row, col) = (i / gx, i % gx);
        let tx = (col as f64 + 0.5) * w / gx as f64 + (seed_hash(seed, i as u64) - 0.5) * jitter;
        let ty = (row as f64 + 0.5) * h / gy as f64 + (seed_hash(seed, (i + k) as u64) - 0.5) * jitter;
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (pi, (pix, _)) in points.iter().enumerate() {
            if used[pi] {
                continue;
            }
            let (px, py) = ((pix % frame.width()) as f64, (pix / frame.width()) as f64);
            let d = (px - tx) * (px - tx) + (py - ty) * (py - ty);
            if d < best_d {
                best_d = d;
                best = pi;
            }
        }
        used[best] = true;
        seeds.push(points[best].1);
    }
    seeds
}

/// Plain Lloyd iterations with a fixed count. Ties go to the lowest index;
/// clusters that lose every member keep their previous centroid.
fn lloyd(points: &[Vector3<f64>], seeds: &[Vector3<f64>], iters: usize) -> (Vec<u32>, Vec<Vector3<f64>>, Vec<usize>) {
    let k = seeds.len();
    let mut centroids = seeds.to_vec();
    let mut assign = vec![0u32; points.len()];
    let mut sizes = vec![0usize; k];
    for _ in 0..iters {
        sizes.iter_mut().for_each(|s| *s = 0);
        let mut sums = vec![Vector3::zeros(); k];
        for (pi, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centroids.iter().enumerate() {
                let d = (p - c).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            assign[pi] = best as u32;
            sizes[best] += 1;
            sums[best] += p;
        }
        for ci in 0..k {
            if sizes[ci] > 0 {
                centroids[ci] = sums[ci] / sizes[ci] as f64;
            }
        }
    }
    (assign, centroids, sizes)
}

/// Over-segments a frame into `k` geometric clusters. Runs exactly `iters`
/// Lloyd iterations; the result is bit-identical for identical inputs.
/// Adjacency is left empty — see [`compute_adjacency`] / [`cluster_frame`].
pub fn kmeans_cluster(frame: &RgbdFrame, k: usize, iters: usize, seed: u64) -> Result<ClusterSet, ClusterError> {
    let points = valid_points(frame);
    if points.is_empty() {
        return Err(ClusterError::NoValidPixels);
    }
    if k < 1 || k > points.len() {
        return Err(ClusterError::BadK { k, valid: points.len() });
    }

    let seeds = grid_seeds(frame, &points, k, seed);
    let coords: Vec<Vector3<f64>> = points.iter().map(|(_, p)| *p).collect();
    let (assign, centroids, sizes) = lloyd(&coords, &seeds, iters);

    let mut labels = Image::new_fill(frame.width(), frame.height(), INVALID_LABEL);
    for ((pix, _), a) in points.iter().zip(&assign) {
        labels.data_mut()[*pix] = *a;
    }
    let alive = sizes.iter().map(|s| *s > 0).collect();
    Ok(ClusterSet { k, labels, centroids, sizes, alive, adjacency: vec![false; k * k] })
}

/// Marks clusters adjacent when some 4-connected pixel pair crosses the
/// boundary with a 3-D gap below `delta` meters, so clusters split across a
/// depth discontinuity do not couple.
pub fn compute_adjacency(frame: &RgbdFrame, labels: &Image<u32>, k: usize, delta: f64) -> Vec<bool> {
    let mut adj = vec![false; k * k];
    let ki = &frame.intrinsics;
    let point_at = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let d = frame.depth.get(x, y) as f64;
        (d > 0.0).then(|| ki.back_project(x as f64, y as f64, d).expect("positive depth"))
    };
    let mut link = |a: u32, b: u32, pa: &Vector3<f64>, pb: &Vector3<f64>| {
        if a != b && a != INVALID_LABEL && b != INVALID_LABEL && (pa - pb).norm() < delta {
            adj[a as usize * k + b as usize] = true;
            adj[b as usize * k + a as usize] = true;
        }
    };
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let Some(p) = point_at(x, y) else { continue };
            let l = labels.get(x, y);
            if x + 1 < frame.width() {
                if let Some(q) = point_at(x + 1, y) {
                    link(l, labels.get(x + 1, y), &p, &q);
                }
            }
            if y + 1 < frame.height() {
                if let Some(q) = point_at(x, y + 1) {
                    link(l, labels.get(x, y + 1), &p, &q);
                }
            }
        }
    }
    adj
}

/// Convenience: cluster and fill in adjacency in one call.
pub fn cluster_frame(frame: &RgbdFrame, k: usize, iters: usize, seed: u64, delta: f64) -> Result<ClusterSet, ClusterError> {
    let mut cs = kmeans_cluster(frame, k, iters, seed)?;
    cs.adjacency = compute_adjacency(frame, &cs.labels, cs.k, delta);
    Ok(cs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Intrinsics;

    /// 16x16 frame, left half depth 1 m, right half depth 3 m. The focal
    /// length keeps each blob tight against the 2 m depth gap.
    fn two_plane_frame() -> RgbdFrame {
        let k = Intrinsics::new(64.0, 64.0, 7.5, 7.5, 16, 16).unwrap();
        let mut depth = Image::new_fill(16, 16, 0.0f32);
        for y in 0..16 {
            for x in 0..16 {
                depth.set(x, y, if x < 8 { 1.0 } else { 3.0 });
            }
        }
        RgbdFrame::new(Image::new_fill(16, 16, 0.5f32), depth, 0.0, k).unwrap()
    }

    /// Exhaustive 2-means oracle: the optimal 2-partition of points whose
    /// centroids differ mainly in z is a threshold on z, so trying every
    /// contiguous split of the z-sorted points finds the global optimum.
    fn two_means_oracle(points: &[Vector3<f64>]) -> (f64, Vec<bool>) {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a].z.total_cmp(&points[b].z));
        let mut best = (f64::INFINITY, vec![false; points.len()]);
        for split in 1..points.len() {
            let (lo, hi) = order.split_at(split);
            let wcss = |idx: &[usize]| {
                let mean: Vector3<f64> = idx.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / idx.len() as f64;
                idx.iter().map(|&i| (points[i] - mean).norm_squared()).sum::<f64>()
            };
            let total = wcss(lo) + wcss(hi);
            if total < best.0 {
                let mut in_hi = vec![false; points.len()];
                for &i in hi {
                    in_hi[i] = true;
                }
                best = (total, in_hi);
            }
        }
        best
    }

    fn wcss_of(cs: &ClusterSet, frame: &RgbdFrame) -> f64 {
        let mut total = 0.0;
        for (pix, p) in valid_points(frame) {
            let label = cs.labels.data()[pix];
            total += (p - cs.centroids[label as usize]).norm_squared();
        }
        total
    }

    #[test]
    fn two_planes_partition_matches_exhaustive_oracle() {
        let frame = two_plane_frame();
        let cs = kmeans_cluster(&frame, 2, 10, 0).unwrap();

        let pairs = valid_points(&frame);
        let points: Vec<Vector3<f64>> = pairs.iter().map(|&(_, p)| p).collect();
        let (oracle_wcss, oracle_split) = two_means_oracle(&points);
        assert!(wcss_of(&cs, &frame) <= oracle_wcss + 1e-9);

        // The oracle split must match ours up to cluster relabeling.
        let far_label = cs.labels.get(8, 8);
        let ours: Vec<bool> = pairs.iter().map(|(pix, _)| cs.labels.data()[*pix] == far_label).collect();
        let agree = ours.iter().zip(&oracle_split).filter(|(a, b)| a == b).count();
        let n = ours.len();
        assert!(agree == n || agree == 0, "partition differs from oracle: {agree}/{n}");

        // And it is exactly the two planes.
        for y in 0..16 {
            assert_eq!(cs.labels.get(0, y), cs.labels.get(7, y));
            assert_eq!(cs.labels.get(8, y), cs.labels.get(15, y));
            assert_ne!(cs.labels.get(7, y), cs.labels.get(8, y));
        }
    }

    #[test]
    fn lloyd_objective_is_monotone_in_iterations() {
        let frame = two_plane_frame();
        let mut prev = f64::INFINITY;
        for iters in 1..8 {
            let cs = kmeans_cluster(&frame, 5, iters, 3).unwrap();
            let w = wcss_of(&cs, &frame);
            assert!(w <= prev + 1e-9, "iters {iters}: {w} > {prev}");
            prev = w;
        }
    }

    #[test]
    fn clustering_is_deterministic() {
        let frame = two_plane_frame();
        let a = kmeans_cluster(&frame, 4, 10, 42).unwrap();
        let b = kmeans_cluster(&frame, 4, 10, 42).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let frame = two_plane_frame();
        assert!(matches!(kmeans_cluster(&frame, 0, 5, 0), Err(ClusterError::BadK { .. })));
        assert!(matches!(kmeans_cluster(&frame, 257, 5, 0), Err(ClusterError::BadK { .. })));

        let k = Intrinsics::new(64.0, 64.0, 7.5, 7.5, 16, 16).unwrap();
        let empty = RgbdFrame::new(
            Image::new_fill(16, 16, 0.5f32),
            Image::new_fill(16, 16, 0.0f32),
            0.0,
            k,
        )
        .unwrap();
        assert!(matches!(kmeans_cluster(&empty, 2, 5, 0), Err(ClusterError::NoValidPixels)));
    }

    #[test]
    fn a_cluster_seeded_in_no_mans_land_dies() {
        // Two tight blobs and a third seed stranded between them: after the
        // first update both blob centroids absorb everything.
        let points = vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.01, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(0.01, 0.0, 5.0),
        ];
        let seeds = vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(100.0, 0.0, 3.0),
        ];
        let (_, centroids, sizes) = lloyd(&points, &seeds, 4);
        assert_eq!(sizes[2], 0, "stranded cluster must end empty");
        // Dead cluster keeps its seed centroid.
        assert_eq!(centroids[2], seeds[2]);
        assert!(sizes[0] > 0 && sizes[1] > 0);
    }

    #[test]
    fn adjacency_respects_the_depth_gap() {
        let frame = two_plane_frame();
        // Four clusters: k-means splits each plane in two. Clusters on the
        // same plane touch in 3-D; the seam between planes has a 2 m gap.
        let cs = cluster_frame(&frame, 4, 10, 0, DEFAULT_ADJACENCY_DELTA).unwrap();
        let left = cs.labels.get(7, 8) as usize;
        let right = cs.labels.get(8, 8) as usize;
        assert!(!cs.adjacent(left, right), "depth gap must break adjacency");

        // Within the left plane, the two sub-clusters share a 4-connected
        // boundary at equal depth.
        let l_top = cs.labels.get(3, 2) as usize;
        let l_bot = cs.labels.get(3, 13) as usize;
        if l_top != l_bot {
            assert!(cs.adjacent(l_top, l_bot));
        }
        // Diagonal check: symmetric, zero diagonal.
        for i in 0..cs.k {
            assert!(!cs.adjacent(i, i));
            for j in 0..cs.k {
                assert_eq!(cs.adjacent(i, j), cs.adjacent(j, i));
            }
        }
    }
}

//! Lloyd's k-means over 2-D `(scale, zero-point)` points.
//!
//! Both coordinates are z-score normalized before clustering. Seeding is
//! distance-weighted (k-means++) from an explicit seed, empty clusters are
//! refilled with the point farthest from its centroid, and nearest-centroid
//! ties go to the lowest group id. Centroid sums run in ascending point order
//! so results are bit-stable.
//!
//! Once Lloyd iterations stop changing assignments, single-point moves are
//! applied while any move lowers the objective (Hartigan's criterion). A
//! partition stable under such moves is also stable under Lloyd's rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub scale_mean: f64,
    pub scale_std: f64,
    pub zero_mean: f64,
    pub zero_std: f64,
}

impl Normalization {
    pub fn fit(raw: &[Point]) -> Self {
        let n = raw.len().max(1) as f64;
        let stats = |axis: usize| {
            let mean = raw.iter().map(|p| p[axis]).sum::<f64>() / n;
            let var = raw.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            (mean, if std > 0.0 { std } else { 1.0 })
        };
        let (scale_mean, scale_std) = stats(0);
        let (zero_mean, zero_std) = stats(1);
        Self {
            scale_mean,
            scale_std,
            zero_mean,
            zero_std,
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        [
            (p[0] - self.scale_mean) / self.scale_std,
            (p[1] - self.zero_mean) / self.zero_std,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Independent seedings; the lowest final objective wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            restarts: 16,
        }
    }
}

/// Result of clustering, in normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<u32>,
    pub centroids: Vec<Point>,
    pub normalization: Normalization,
    /// Sum of squared distances to the assigned centroid.
    pub objective: f64,
    /// Objective after each Lloyd iteration and each improving single-point
    /// sweep of the winning restart.
    pub history: Vec<f64>,
}

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Lowest-id nearest centroid.
fn nearest(p: &Point, centroids: &[Point]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (g, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (g as u32, d);
        }
    }
    best
}

/// Sum of squared distances of each point to its group mean.
pub fn partition_objective(points: &[Point], assignments: &[u32], groups: usize) -> f64 {
    let centroids = centroids_of(points, assignments, groups);
    points
        .iter()
        .zip(assignments)
        .map(|(p, &g)| dist2(p, &centroids[g as usize]))
        .sum()
}

fn centroids_of(points: &[Point], assignments: &[u32], groups: usize) -> Vec<Point> {
    let mut sums = vec![[0.0f64; 2]; groups];
    let mut counts = vec![0usize; groups];
    for (p, &g) in points.iter().zip(assignments) {
        let s = &mut sums[g as usize];
        s[0] += p[0];
        s[1] += p[1];
        counts[g as usize] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| {
            if n == 0 {
                [f64::NAN, f64::NAN]
            } else {
                [s[0] / n as f64, s[1] / n as f64]
            }
        })
        .collect()
}

fn seed_centroids(points: &[Point], groups: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[first])).collect();
    while centroids.len() < groups {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the target just past the accumulated sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // every remaining point coincides with a centroid
            chosen.iter().position(|&c| !c).unwrap()
        };
        chosen[pick] = true;
        centroids.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[pick]));
        }
    }
    centroids
}

/// Moves the point farthest from its centroid into each empty group.
fn repair_empty(points: &[Point], assignments: &mut [u32], centroids: &mut [Point]) {
    let groups = centroids.len();
    let mut counts = vec![0usize; groups];
    for &g in assignments.iter() {
        counts[g as usize] += 1;
    }
    for g in 0..groups {
        if counts[g] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let from = assignments[i] as usize;
            if counts[from] < 2 {
                continue;
            }
            let d = dist2(p, &centroids[from]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("groups <= points leaves a donor");
        counts[assignments[i] as usize] -= 1;
        assignments[i] = g as u32;
        counts[g] = 1;
        centroids[g] = points[i];
    }
}

fn lloyd(points: &[Point], mut centroids: Vec<Point>, max_iters: usize) -> (Vec<u32>, Vec<Point>, Vec<f64>) {
    let groups = centroids.len();
    let mut assignments: Vec<u32> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..max_iters {
        let next: Vec<u32> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let changed = next != assignments;
        assignments = next;
        repair_empty(points, &mut assignments, &mut centroids);
        centroids = centroids_of(points, &assignments, groups);
        history.push(
            points
                .iter()
                .zip(&assignments)
                .map(|(p, &g)| dist2(p, &centroids[g as usize]))
                .sum(),
        );
        if !changed {
            break;
        }
    }
    hartigan(points, groups, &mut assignments, &mut history);
    let centroids = centroids_of(points, &assignments, groups);
    (assignments, centroids, history)
}

/// Moves single points between groups while that strictly lowers the
/// objective. Appends the objective after each improving sweep.
fn hartigan(points: &[Point], groups: usize, assignments: &mut [u32], history: &mut Vec<f64>) {
    let mut counts = vec![0usize; groups];
    for &g in assignments.iter() {
        counts[g as usize] += 1;
    }
    let mut centroids = centroids_of(points, assignments, groups);
    loop {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let from = assignments[i] as usize;
            if counts[from] < 2 {
                continue;
            }
            let na = counts[from] as f64;
            let remove = na / (na - 1.0) * dist2(p, &centroids[from]);
            let mut best: Option<(usize, f64)> = None;
            for (g, c) in centroids.iter().enumerate() {
                if g == from {
                    continue;
                }
                let nb = counts[g] as f64;
                let add = nb / (nb + 1.0) * dist2(p, c);
                if best.is_none_or(|(_, b)| add < b) {
                    best = Some((g, add));
                }
            }
            let Some((to, add)) = best else { continue };
            if add < remove * (1.0 - 1e-12) {
                let (na, nb) = (counts[from] as f64, counts[to] as f64);
                for k in 0..2 {
                    centroids[from][k] = (centroids[from][k] * na - p[k]) / (na - 1.0);
                    centroids[to][k] = (centroids[to][k] * nb + p[k]) / (nb + 1.0);
                }
                counts[from] -= 1;
                counts[to] += 1;
                assignments[i] = to as u32;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        // re-derive exactly to keep drift out of later comparisons
        centroids = centroids_of(points, assignments, groups);
        history.push(
            points
                .iter()
                .zip(assignments.iter())
                .map(|(p, &g)| dist2(p, &centroids[g as usize]))
                .sum(),
        );
    }
}

/// Clusters raw `(scale, zero-point)` pairs into `groups` groups.
pub fn kmeans_group(
    raw: &[Point],
    groups: usize,
    seed: u64,
    config: &KMeansConfig,
) -> Result<Clustering> {
    if groups == 0 || groups > raw.len() {
        return Err(Error::InvalidGroupCount {
            groups,
            patches: raw.len(),
        });
    }
    if config.max_iters == 0 {
        return Err(Error::Invariant("k-means needs at least one iteration".into()));
    }
    let normalization = Normalization::fit(raw);
    let points: Vec<Point> = raw.iter().map(|&p| normalization.apply(p)).collect();

    if groups == 1 {
        let assignments = vec![0u32; points.len()];
        let centroids = centroids_of(&points, &assignments, 1);
        let objective = partition_objective(&points, &assignments, 1);
        return Ok(Clustering {
            assignments,
            centroids,
            normalization,
            objective,
            history: vec![objective],
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..config.restarts.max(1) {
        let init = seed_centroids(&points, groups, &mut rng);
        let (assignments, centroids, history) = lloyd(&points, init, config.max_iters);
        let objective = *history.last().unwrap();
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(Clustering {
                assignments,
                centroids,
                normalization,
                objective,
                history,
            });
        }
        if objective == 0.0 {
            break;
        }
    }
    Ok(best.unwrap())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Minimum objective over every partition of `points` into exactly `groups`
    /// non-empty groups (restricted growth strings).
    pub(crate) fn brute_force_optimum(points: &[Point], groups: usize) -> (f64, Vec<u32>) {
        fn rec(
            i: usize,
            used: usize,
            labels: &mut Vec<u32>,
            points: &[Point],
            groups: usize,
            best: &mut (f64, Vec<u32>),
        ) {
            let n = points.len();
            if n - i < groups - used {
                return;
            }
            if i == n {
                let obj = partition_objective(points, labels, groups);
                if obj < best.0 {
                    *best = (obj, labels.clone());
                }
                return;
            }
            for g in 0..=used.min(groups - 1) {
                labels.push(g as u32);
                rec(i + 1, used.max(g + 1), labels, points, groups, best);
                labels.pop();
            }
        }
        let mut best = (f64::INFINITY, Vec::new());
        rec(0, 0, &mut Vec::new(), points, groups, &mut best);
        best
    }

    #[test]
    fn four_points_two_groups() {
        let raw = [[0.10, 0.0], [0.11, 0.0], [0.50, 3.0], [0.52, 3.0]];
        let c = kmeans_group(&raw, 2, 7, &KMeansConfig::default()).unwrap();
        assert_eq!(c.assignments[0], c.assignments[1]);
        assert_eq!(c.assignments[2], c.assignments[3]);
        assert_ne!(c.assignments[0], c.assignments[2]);
        let points: Vec<Point> = raw.iter().map(|&p| c.normalization.apply(p)).collect();
        let (opt, _) = brute_force_optimum(&points, 2);
        assert!((c.objective - opt).abs() <= 1e-12);
        let g = c.assignments[0] as usize;
        let mean = [(points[0][0] + points[1][0]) / 2.0, (points[0][1] + points[1][1]) / 2.0];
        assert!((c.centroids[g][0] - mean[0]).abs() < 1e-12);
        assert!((c.centroids[g][1] - mean[1]).abs() < 1e-12);
    }

    #[test]
    fn one_group_per_point() {
        let raw: Vec<Point> = (0..9).map(|i| [i as f64 * 0.1, (i % 3) as f64]).collect();
        let c = kmeans_group(&raw, 9, 1, &KMeansConfig::default()).unwrap();
        let mut seen = c.assignments.clone();
        seen.sort();
        assert_eq!(seen, (0..9).collect::<Vec<u32>>());
        assert_eq!(c.objective, 0.0);
    }

    #[test]
    fn duplicate_points_still_fill_every_group() {
        let raw = vec![[0.5, 1.0]; 6];
        let c = kmeans_group(&raw, 6, 3, &KMeansConfig::default()).unwrap();
        let mut seen = c.assignments.clone();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<u32>>());
    }

    #[test]
    fn single_group_centroid_is_mean() {
        let raw = [[0.1, 2.0], [0.3, 0.0], [0.2, 1.0]];
        let c = kmeans_group(&raw, 1, 0, &KMeansConfig::default()).unwrap();
        assert_eq!(c.assignments, vec![0, 0, 0]);
        assert!(c.centroids[0][0].abs() < 1e-12 && c.centroids[0][1].abs() < 1e-12);
    }

    #[test]
    fn rejects_too_many_groups() {
        let raw = [[0.1, 0.0], [0.2, 1.0]];
        assert!(matches!(
            kmeans_group(&raw, 3, 0, &KMeansConfig::default()),
            Err(Error::InvalidGroupCount { groups: 3, patches: 2 })
        ));
        assert!(kmeans_group(&raw, 0, 0, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn objective_never_increases_and_final_is_local_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let raw: Vec<Point> = (0..300)
            .map(|_| [rng.random::<f64>() * 0.3, rng.random_range(-20..20) as f64])
            .collect();
        for groups in [2, 5, 17, 64] {
            let c = kmeans_group(&raw, groups, 4, &KMeansConfig::default()).unwrap();
            for w in c.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            if c.history.len() < KMeansConfig::default().max_iters {
                let points: Vec<Point> = raw.iter().map(|&p| c.normalization.apply(p)).collect();
                for (p, &g) in points.iter().zip(&c.assignments) {
                    assert_eq!(nearest(p, &c.centroids).0, g);
                }
            }
        }
    }

    #[test]
    fn six_point_instances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..50 {
            let raw: Vec<Point> = (0..6)
                .map(|_| [rng.random::<f64>(), rng.random_range(0..4) as f64])
                .collect();
            for groups in 1..=3 {
                let c = kmeans_group(&raw, groups, trial, &KMeansConfig::default()).unwrap();
                let points: Vec<Point> = raw.iter().map(|&p| c.normalization.apply(p)).collect();
                let (opt, _) = brute_force_optimum(&points, groups);
                assert!(
                    (c.objective - opt).abs() <= 1e-9 * opt.max(1.0),
                    "trial {trial} G={groups}: {} vs {opt}",
                    c.objective
                );
            }
        }
    }

    #[test]
    fn eight_point_instances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut misses = 0;
        for trial in 0..400 {
            let n = rng.random_range(3..=8);
            let raw: Vec<Point> = (0..n)
                .map(|_| [rng.random::<f64>() * 0.2, rng.random_range(-6..6) as f64])
                .collect();
            for groups in 1..=3.min(n) {
                let c = kmeans_group(&raw, groups, trial, &KMeansConfig::default()).unwrap();
                let points: Vec<Point> = raw.iter().map(|&p| c.normalization.apply(p)).collect();
                let (opt, _) = brute_force_optimum(&points, groups);
                if (c.objective - opt).abs() > 1e-9 * opt.max(1.0) {
                    misses += 1;
                }
            }
        }
        assert_eq!(misses, 0);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw: Vec<Point> = (0..100).map(|_| [rng.random(), rng.random()]).collect();
        let a = kmeans_group(&raw, 7, 42, &KMeansConfig::default()).unwrap();
        let b = kmeans_group(&raw, 7, 42, &KMeansConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}

//! Proper scoring rules and spatially separated fold construction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::SpacePoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("interval lower bound {lower} exceeds upper bound {upper}")]
    InvertedInterval { lower: f64, upper: f64 },
    #[error("level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("scale must be positive, got {0}")]
    Scale(f64),
    #[error("cannot split {sites} sites into {groups} groups")]
    Infeasible { sites: usize, groups: usize },
}

/// Negatively oriented interval score of the central `(1 - alpha)` interval.
/// A value on a bound counts as covered.
pub fn interval_score(lower: f64, upper: f64, x: f64, alpha: f64) -> Result<f64, ScoringError> {
    if lower > upper {
        return Err(ScoringError::InvertedInterval { lower, upper });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ScoringError::Level(alpha));
    }
    let mut s = upper - lower;
    if x < lower {
        s += 2.0 / alpha * (lower - x);
    }
    if x > upper {
        s += 2.0 / alpha * (x - upper);
    }
    Ok(s)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Closed-form continuous ranked probability score of `N(mean, sd^2)` at `x`.
pub fn crps_gaussian(mean: f64, sd: f64, x: f64) -> Result<f64, ScoringError> {
    if !(sd > 0.0) {
        return Err(ScoringError::Scale(sd));
    }
    let n = std_normal();
    let z = (x - mean) / sd;
    Ok(sd * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt()))
}

/// Gaussian log predictive density.
pub fn prequential_score(mean: f64, var: f64, x: f64) -> Result<f64, ScoringError> {
    if !(var > 0.0) {
        return Err(ScoringError::Scale(var));
    }
    Ok(-0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var))
}

/// Central `(1 - alpha)` interval of `N(mean, sd^2)`.
pub fn gaussian_interval(mean: f64, sd: f64, alpha: f64) -> (f64, f64) {
    let q = std_normal().inverse_cdf(1.0 - alpha / 2.0);
    (mean - q * sd, mean + q * sd)
}

/// Which site pairs the separation objective looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationObjective {
    /// Minimum distance between sites in different groups.
    #[default]
    CrossGroup,
    /// Minimum distance between sites sharing a group.
    WithinGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionOptions {
    pub groups: usize,
    pub tries: usize,
    pub seed: u64,
    /// Allowed relative deviation of a group's observation count from the mean.
    pub balance_tolerance: f64,
    pub objective: SeparationObjective,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        Self {
            groups: 4,
            tries: 2000,
            seed: 1,
            balance_tolerance: 0.25,
            objective: SeparationObjective::CrossGroup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Indices into the site list, sorted within each group.
    pub groups: Vec<Vec<usize>>,
    pub objective: f64,
}

/// Separation objective of a labelling, `+inf` when no pair qualifies.
pub fn separation(points: &[SpacePoint], labels: &[usize], objective: SeparationObjective) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in 0..i {
            let same = labels[i] == labels[j];
            let counts = match objective {
                SeparationObjective::CrossGroup => !same,
                SeparationObjective::WithinGroup => same,
            };
            if counts {
                best = best.min(points[i].distance(&points[j]));
            }
        }
    }
    best
}

/// Best of `tries` random splits into `groups` site groups with balanced
/// observation counts. Cross-group separation prefers compact, spatially
/// separated folds; the within-group reading prefers spread-out folds.
pub fn spatial_partition(
    points: &[SpacePoint],
    counts: &[usize],
    opts: &PartitionOptions,
) -> Result<Partition, ScoringError> {
    let n = points.len();
    let k = opts.groups;
    if k == 0 || k > n || counts.len() != n {
        return Err(ScoringError::Infeasible { sites: n, groups: k });
    }
    let total: usize = counts.iter().sum();
    let target = total as f64 / k as f64;
    let balanced = |labels: &[usize]| {
        let mut sums = vec![0usize; k];
        let mut sizes = vec![0usize; k];
        for (s, &g) in labels.iter().enumerate() {
            sums[g] += counts[s];
            sizes[g] += 1;
        }
        sizes.iter().all(|&c| c > 0)
            && sums
                .iter()
                .all(|&c| (c as f64 - target).abs() <= opts.balance_tolerance * target + 1e-9)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut fallback: Option<(f64, Vec<usize>)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    for t in 0..opts.tries.max(1) {
        order.shuffle(&mut rng);
        let labels = if opts.objective == SeparationObjective::CrossGroup && t % 2 == 0 {
            grown_labels(points, counts, k, &order)
        } else {
            dealt_labels(counts, k, &order)
        };
        let score = separation(points, &labels, opts.objective);
        let imbalance = imbalance(&labels, counts, k, target);
        if balanced(&labels) {
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, labels));
            }
        } else if fallback.as_ref().is_none_or(|(b, _)| imbalance < *b) {
            fallback = Some((imbalance, labels));
        }
    }
    let labels = match (best, fallback) {
        (Some((_, l)), _) => l,
        (None, Some((_, l))) => {
            log::warn!("no split met the balance tolerance; using the most balanced one");
            l
        }
        (None, None) => return Err(ScoringError::Infeasible { sites: n, groups: k }),
    };
    let mut groups = vec![Vec::new(); k];
    for (s, &g) in labels.iter().enumerate() {
        groups[g].push(s);
    }
    for g in groups.iter_mut() {
        g.sort_unstable();
    }
    groups.sort();
    let objective = separation(points, &labels, opts.objective);
    Ok(Partition { groups, objective })
}

fn imbalance(labels: &[usize], counts: &[usize], k: usize, target: f64) -> f64 {
    let mut sums = vec![0usize; k];
    for (s, &g) in labels.iter().enumerate() {
        sums[g] += counts[s];
    }
    sums.iter().map(|&c| (c as f64 - target).abs()).fold(0.0, f64::max)
}

/// Give each site in `order` to the group with the smallest count so far.
fn dealt_labels(counts: &[usize], k: usize, order: &[usize]) -> Vec<usize> {
    let mut labels = vec![0; counts.len()];
    let mut sums = vec![0usize; k];
    let mut sizes = vec![0usize; k];
    for &s in order {
        let g = (0..k).min_by_key(|&g| (sizes[g].min(1), sums[g])).unwrap();
        labels[s] = g;
        sums[g] += counts[s];
        sizes[g] += 1;
    }
    labels
}

/// Seed `k` groups at the first sites of `order`, then repeatedly let the
/// lightest group absorb its nearest unassigned site.
fn grown_labels(points: &[SpacePoint], counts: &[usize], k: usize, order: &[usize]) -> Vec<usize> {
    let n = points.len();
    let mut labels = vec![usize::MAX; n];
    let mut sums = vec![0usize; k];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (g, &s) in order.iter().take(k).enumerate() {
        labels[s] = g;
        sums[g] += counts[s];
        members[g].push(s);
    }
    let mut left = n - k;
    while left > 0 {
        let g = (0..k).min_by_key(|&g| sums[g]).unwrap();
        let s = (0..n)
            .filter(|&s| labels[s] == usize::MAX)
            .min_by(|&a, &b| {
                let da = members[g].iter().map(|&m| points[m].distance(&points[a])).fold(f64::INFINITY, f64::min);
                let db = members[g].iter().map(|&m| points[m].distance(&points[b])).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .unwrap();
        labels[s] = g;
        sums[g] += counts[s];
        members[g].push(s);
        left -= 1;
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_score_cases() {
        assert!((interval_score(-1.96, 1.96, 0.0, 0.05).unwrap() - 3.92).abs() < 1e-12);
        assert!((interval_score(-1.96, 1.96, 2.96, 0.05).unwrap() - 43.92).abs() < 1e-12);
        assert_eq!(interval_score(-1.0, 2.0, -1.0, 0.05).unwrap(), 3.0);
        assert_eq!(interval_score(-1.0, 2.0, 2.0, 0.05).unwrap(), 3.0);
        assert!(interval_score(1.0, 0.0, 0.5, 0.05).is_err());
    }

    #[test]
    fn crps_cases() {
        let at_mean = crps_gaussian(0.3, 2.0, 0.3).unwrap();
        assert!((at_mean - 2.0 * 0.233_694_977_255_109_07).abs() < 1e-12);
        let a = crps_gaussian(1.0, 0.5, 1.7).unwrap();
        let b = crps_gaussian(1.0, 0.5, 0.3).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(crps_gaussian(1.0, 1e-12, 1.0).unwrap() < 1e-11);
        assert!(crps_gaussian(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn prequential_cases() {
        assert!((prequential_score(2.0, 1.0, 2.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((prequential_score(2.0, 1.0, 3.0).unwrap() + 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!(prequential_score(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn collinear_sites_split() {
        let pts: Vec<SpacePoint> = [0.0, 1.0, 10.0, 11.0].iter().map(|&x| SpacePoint::new(x, 0.0)).collect();
        let opts = PartitionOptions {
            groups: 2,
            tries: 200,
            ..PartitionOptions::default()
        };
        let p = spatial_partition(&pts, &[1, 1, 1, 1], &opts).unwrap();
        assert_eq!(p.groups, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(p.objective, 9.0);
    }

    #[test]
    fn trivial_group_counts() {
        let pts: Vec<SpacePoint> = [0.0, 1.0, 3.0, 7.0].iter().map(|&x| SpacePoint::new(x, 0.0)).collect();
        let one = spatial_partition(
            &pts,
            &[5, 1, 2, 3],
            &PartitionOptions {
                groups: 1,
                ..PartitionOptions::default()
            },
        )
        .unwrap();
        assert_eq!(one.groups.len(), 1);
        assert_eq!(one.objective, f64::INFINITY);
        let all = spatial_partition(
            &pts,
            &[1, 1, 1, 1],
            &PartitionOptions {
                groups: 4,
                ..PartitionOptions::default()
            },
        )
        .unwrap();
        assert_eq!(all.groups.len(), 4);
        assert_eq!(all.objective, 1.0);
        assert!(spatial_partition(&pts, &[1; 4], &PartitionOptions { groups: 5, ..PartitionOptions::default() }).is_err());
    }
}

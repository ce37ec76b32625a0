//! Adjacency recovery from a fitted Laplacian by 1-D density clustering.
//!
//! Off-diagonal entries of an exact weighted Laplacian are `-1/x` for
//! adjacent buses and zero otherwise. In each row the unconnected entries
//! form the dense bulk; entries lying below that bulk are the connections.

use std::cmp::Ordering;

use super::{AdjacencyEstimate, LaplacianEstimate, RowDiagnostics, TopologyError};
use crate::metrics::normalize_minmax;

/// `max(4, ceil(0.05 n))`.
pub fn default_gamma(n: usize) -> usize {
    4.max((0.05 * n as f64).ceil() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Radius {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterMode {
    /// Cluster each row on its own normalized scale.
    #[default]
    PerRow,
    /// Cluster all normalized off-diagonal entries together.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryConfig {
    /// Minimum neighbour count of a core point; `None` uses [`default_gamma`].
    pub gamma: Option<usize>,
    pub radius: Radius,
    pub mode: ClusterMode,
    /// Break cycles among the candidate edges by keeping the spanning forest
    /// with the largest margins below the bulk.
    pub prune_cycles: bool,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            gamma: None,
            radius: Radius::Auto,
            mode: ClusterMode::PerRow,
            prune_cycles: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbscanLabels {
    /// Cluster id per point, `None` for noise.
    pub cluster: Vec<Option<usize>>,
    pub core: Vec<bool>,
    pub n_clusters: usize,
}

fn sorted_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

/// DBSCAN on the real line. A point is core when at least `gamma` other
/// points lie within `xi`; clusters are chains of core points spaced at most
/// `xi` apart, and non-core points within `xi` of a core point join the
/// nearest one.
pub fn dbscan_1d(values: &[f64], gamma: usize, xi: f64) -> DbscanLabels {
    let m = values.len();
    let order = sorted_order(values);
    let xs: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let mut core_sorted = vec![false; m];
    let (mut lo, mut hi) = (0usize, 0usize);
    for i in 0..m {
        while xs[i] - xs[lo] > xi {
            lo += 1;
        }
        if hi < i {
            hi = i;
        }
        while hi + 1 < m && xs[hi + 1] - xs[i] <= xi {
            hi += 1;
        }
        core_sorted[i] = hi - lo >= gamma;
    }

    let mut cluster_sorted: Vec<Option<usize>> = vec![None; m];
    let mut n_clusters = 0;
    let mut last_core: Option<usize> = None;
    for i in 0..m {
        if !core_sorted[i] {
            continue;
        }
        let joins = last_core.is_some_and(|c| xs[i] - xs[c] <= xi);
        if !joins {
            n_clusters += 1;
        }
        cluster_sorted[i] = Some(n_clusters - 1);
        last_core = Some(i);
    }

    let cores: Vec<usize> = (0..m).filter(|&i| core_sorted[i]).collect();
    for i in 0..m {
        if core_sorted[i] {
            continue;
        }
        // nearest core point; ties resolved towards the lower value
        let pos = cores.partition_point(|&c| xs[c] < xs[i]);
        let below = pos.checked_sub(1).map(|p| cores[p]);
        let above = cores.get(pos).copied();
        let nearest = match (below, above) {
            (Some(b), Some(a)) => {
                if xs[a] - xs[i] < xs[i] - xs[b] {
                    Some(a)
                } else {
                    Some(b)
                }
            }
            (b, a) => b.or(a),
        };
        if let Some(c) = nearest.filter(|&c| (xs[c] - xs[i]).abs() <= xi) {
            cluster_sorted[i] = cluster_sorted[c];
        }
    }

    let mut cluster = vec![None; m];
    let mut core = vec![false; m];
    for (s, &orig) in order.iter().enumerate() {
        cluster[orig] = cluster_sorted[s];
        core[orig] = core_sorted[s];
    }
    DbscanLabels {
        cluster,
        core,
        n_clusters,
    }
}

/// Distance from each point to its `gamma`-th nearest other point, ascending.
fn k_distances(values: &[f64], gamma: usize) -> Vec<f64> {
    let order = sorted_order(values);
    let xs: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let m = xs.len();
    let mut out: Vec<f64> = (0..m)
        .map(|i| {
            let (mut l, mut r) = (i, i);
            let mut dist = 0.0;
            for _ in 0..gamma {
                let dl = if l > 0 { xs[i] - xs[l - 1] } else { f64::INFINITY };
                let dr = if r + 1 < m { xs[r + 1] - xs[i] } else { f64::INFINITY };
                if dl <= dr {
                    l -= 1;
                    dist = dl;
                } else {
                    r += 1;
                    dist = dr;
                }
            }
            dist
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Radius at the knee of the sorted `gamma`-distance curve.
///
/// The knee is the point farthest below the chord joining the ends of the
/// curve (both axes scaled to `[0, 1]`). A curve with no spread returns its
/// common value; a zero knee is floored at `1e-9` of the data range.
pub fn auto_radius(values: &[f64], gamma: usize) -> Result<f64, TopologyError> {
    let m = values.len();
    if m < 3 || gamma == 0 || gamma >= m {
        return Err(TopologyError::TooFewPoints { points: m, gamma });
    }
    let kd = k_distances(values, gamma);
    let (first, last) = (kd[0], kd[m - 1]);
    let range = values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - values.iter().copied().fold(f64::INFINITY, f64::min);
    let floor = (1e-9 * range).max(f64::MIN_POSITIVE);
    if last - first <= 0.0 {
        return Ok(last.max(floor));
    }
    let knee = (0..m)
        .map(|i| {
            let x = i as f64 / (m - 1) as f64;
            let y = (kd[i] - first) / (last - first);
            (i, x - y)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(kd[knee].max(floor))
}

/// Split of one set of values into the unconnected bulk and the entries below it.
struct Split {
    boundary: f64,
    flagged: Vec<usize>,
    clusters: usize,
    noise: usize,
}

fn split_values(normalized: &[f64], raw: &[f64], gamma: usize, xi: f64) -> Option<Split> {
    let labels = dbscan_1d(normalized, gamma, xi);
    if labels.n_clusters == 0 {
        return None;
    }
    let mut size = vec![0usize; labels.n_clusters];
    let mut raw_sum = vec![0.0; labels.n_clusters];
    for (i, c) in labels.cluster.iter().enumerate() {
        if let Some(c) = c {
            size[*c] += 1;
            raw_sum[*c] += raw[i];
        }
    }
    // largest cluster; ties go to the one whose mean is closest to zero
    let background = (0..labels.n_clusters)
        .max_by(|&a, &b| {
            size[a].cmp(&size[b]).then_with(|| {
                let ma = (raw_sum[a] / size[a] as f64).abs();
                let mb = (raw_sum[b] / size[b] as f64).abs();
                mb.partial_cmp(&ma).unwrap_or(Ordering::Equal)
            })
        })
        .expect("at least one cluster");
    let boundary = labels
        .cluster
        .iter()
        .zip(normalized)
        .filter(|(c, _)| **c == Some(background))
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let flagged = (0..normalized.len())
        .filter(|&i| labels.cluster[i] != Some(background) && normalized[i] < boundary)
        .collect();
    Some(Split {
        boundary,
        flagged,
        clusters: labels.n_clusters,
        noise: labels.cluster.iter().filter(|c| c.is_none()).count(),
    })
}

struct RowView {
    /// Column buses (1-based) of the off-diagonal entries.
    cols: Vec<usize>,
    raw: Vec<f64>,
    normalized: Vec<f64>,
}

fn row_view(est: &LaplacianEstimate, i: usize) -> Result<RowView, TopologyError> {
    let n = est.n();
    let cols: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let raw: Vec<f64> = cols.iter().map(|&j| est.y[(i, j)]).collect();
    let normalized = normalize_minmax(&raw).map_err(|_| TopologyError::DegenerateRow(i + 1))?;
    Ok(RowView {
        cols: cols.into_iter().map(|j| j + 1).collect(),
        raw,
        normalized,
    })
}

fn row_sum_ratio(est: &LaplacianEstimate, i: usize) -> f64 {
    let diag = est.y[(i, i)];
    let sum: f64 = est.y.row(i).iter().sum();
    if diag != 0.0 {
        sum / diag
    } else {
        0.0
    }
}

/// Runs the clustering and symmetrizes the per-row labels.
///
/// A pair is an edge when both rows flag it, or when one row flags it with
/// a margin below the bulk larger than twice that row's radius. A radial
/// feeder has no cycles, so with `prune_cycles` any cycle among the
/// candidates loses its edges with the smallest combined margin.
pub fn recover_topology(
    est: &LaplacianEstimate,
    cfg: &RecoveryConfig,
) -> Result<AdjacencyEstimate, TopologyError> {
    let n = est.n();
    let gamma = cfg.gamma.unwrap_or_else(|| default_gamma(n));
    if n < 2 {
        return Err(TopologyError::TooFewPoints { points: n, gamma });
    }
    let views = (0..n).map(|i| row_view(est, i)).collect::<Result<Vec<_>, _>>()?;

    // margin[i][j] > 0 when row i flags bus j + 1; depth is boundary minus value
    let mut margin = vec![vec![0.0f64; n]; n];
    let mut depth = vec![vec![0.0f64; n]; n];
    let mut rows = Vec::with_capacity(n);
    let mut radius = vec![0.0; n];

    match cfg.mode {
        ClusterMode::PerRow => {
            for (i, view) in views.iter().enumerate() {
                let xi = match cfg.radius {
                    Radius::Fixed(r) => r,
                    Radius::Auto => auto_radius(&view.normalized, gamma)?,
                };
                let split = split_values(&view.normalized, &view.raw, gamma, xi)
                    .ok_or(TopologyError::NoClusterFound(i + 1))?;
                for (c, &v) in view.cols.iter().zip(&view.normalized) {
                    depth[i][c - 1] = split.boundary - v;
                }
                for &f in &split.flagged {
                    margin[i][view.cols[f] - 1] = split.boundary - view.normalized[f];
                }
                radius[i] = xi;
                rows.push(RowDiagnostics {
                    bus: i + 1,
                    gamma,
                    xi,
                    clusters: split.clusters,
                    noise: split.noise,
                    flagged: split.flagged.iter().map(|&f| view.cols[f]).collect(),
                    boundary: split.boundary,
                    row_sum_ratio: row_sum_ratio(est, i),
                });
            }
        }
        ClusterMode::Joint => {
            let normalized: Vec<f64> = views.iter().flat_map(|v| v.normalized.iter().copied()).collect();
            let raw: Vec<f64> = views.iter().flat_map(|v| v.raw.iter().copied()).collect();
            let xi = match cfg.radius {
                Radius::Fixed(r) => r,
                Radius::Auto => auto_radius(&normalized, gamma)?,
            };
            let split = split_values(&normalized, &raw, gamma, xi).ok_or(TopologyError::NoClusterFound(0))?;
            let width = n - 1;
            for (f, v) in normalized.iter().enumerate() {
                let (i, c) = (f / width, f % width);
                depth[i][views[i].cols[c] - 1] = split.boundary - v;
            }
            let mut flagged_by_row = vec![Vec::new(); n];
            for &f in &split.flagged {
                let (i, c) = (f / width, f % width);
                let j = views[i].cols[c];
                margin[i][j - 1] = split.boundary - normalized[f];
                flagged_by_row[i].push(j);
            }
            for (i, flagged) in flagged_by_row.into_iter().enumerate() {
                radius[i] = xi;
                rows.push(RowDiagnostics {
                    bus: i + 1,
                    gamma,
                    xi,
                    clusters: split.clusters,
                    noise: split.noise,
                    flagged,
                    boundary: split.boundary,
                    row_sum_ratio: row_sum_ratio(est, i),
                });
            }
        }
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (margin[i][j], margin[j][i]);
            let both = a > 0.0 && b > 0.0;
            let one_sided = (a > 2.0 * radius[i]) || (b > 2.0 * radius[j]);
            if both || one_sided {
                edges.push((i + 1, j + 1));
            }
        }
    }
    if cfg.prune_cycles {
        edges = max_spanning_forest(n, edges, |i, j| depth[i - 1][j - 1] + depth[j - 1][i - 1]);
    }

    let root_buses = root_candidates(n, &edges, &rows);
    Ok(AdjacencyEstimate {
        n,
        edges,
        root_buses,
        gamma,
        rows,
    })
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

/// Kruskal on descending weight; the result is sorted.
fn max_spanning_forest(
    n: usize,
    mut edges: Vec<(usize, usize)>,
    weight: impl Fn(usize, usize) -> f64,
) -> Vec<(usize, usize)> {
    edges.sort_by(|a, b| weight(b.0, b.1).total_cmp(&weight(a.0, a.1)).then(a.cmp(b)));
    let mut parent: Vec<usize> = (0..n).collect();
    let mut kept = Vec::with_capacity(edges.len());
    for (i, j) in edges {
        let (a, b) = (find(&mut parent, i - 1), find(&mut parent, j - 1));
        if a != b {
            parent[a.max(b)] = a.min(b);
            kept.push((i, j));
        }
    }
    kept.sort_unstable();
    kept
}

/// One substation neighbour per connected component: the bus with the
/// largest row-sum ratio.
fn root_candidates(n: usize, edges: &[(usize, usize)], rows: &[RowDiagnostics]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    for &(i, j) in edges {
        let (a, b) = (find(&mut parent, i - 1), find(&mut parent, j - 1));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut best: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let c = find(&mut parent, i);
        let better = match best[c] {
            None => true,
            Some(b) => rows[i].row_sum_ratio > rows[b].row_sum_ratio,
        };
        if better {
            best[c] = Some(i);
        }
    }
    let mut out: Vec<usize> = best.into_iter().flatten().map(|i| i + 1).collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_default() {
        assert_eq!(default_gamma(10), 4);
        assert_eq!(default_gamma(68), 4);
        assert_eq!(default_gamma(100), 5);
        assert_eq!(default_gamma(101), 6);
    }

    #[test]
    fn dbscan_two_groups_and_noise() {
        let v = [0.0, 0.01, 0.02, 0.03, 1.0, 1.01, 1.02, 1.03, 5.0];
        let l = dbscan_1d(&v, 2, 0.015);
        assert_eq!(l.n_clusters, 2);
        assert_eq!(l.cluster[0], l.cluster[3]);
        assert_ne!(l.cluster[0], l.cluster[4]);
        assert_eq!(l.cluster[8], None);
    }

    #[test]
    fn dbscan_border_point_joins() {
        // 0.5 has one neighbour within 0.3 so it is a border point of the bulk
        let v = [0.0, 0.1, 0.2, 0.3, 0.6];
        let l = dbscan_1d(&v, 2, 0.3);
        assert!(!l.core[4]);
        assert_eq!(l.cluster[4], l.cluster[0]);
    }

    #[test]
    fn auto_radius_isolates_outlier() {
        let v = [0.0, 0.0, 0.0, 0.0, -1.0];
        let xi = auto_radius(&v, 2).unwrap();
        assert!(xi > 0.0 && xi < 1.0);
        let l = dbscan_1d(&v, 2, xi);
        assert_eq!(l.cluster[4], None);
        assert!(l.cluster[..4].iter().all(|c| *c == Some(0)));
    }

    #[test]
    fn auto_radius_uniform_grid() {
        // analytic gamma-distance of an interior grid point is ceil(gamma/2) h
        let h = 0.013;
        let v: Vec<f64> = (0..100).map(|i| i as f64 * h).collect();
        for gamma in [2usize, 4, 6] {
            let xi = auto_radius(&v, gamma).unwrap();
            let ratio = xi / (gamma as f64 * h);
            assert!((0.5 - 1e-9..=2.0).contains(&ratio), "gamma {gamma}: {ratio}");
        }
    }

    #[test]
    fn auto_radius_needs_points() {
        assert!(matches!(auto_radius(&[1.0, 2.0], 1), Err(TopologyError::TooFewPoints { .. })));
        assert!(matches!(auto_radius(&[1.0, 2.0, 3.0], 3), Err(TopologyError::TooFewPoints { .. })));
    }

    #[test]
    fn forest_drops_weakest_cycle_edge() {
        let w = |i: usize, j: usize| match (i, j) {
            (1, 2) => 3.0,
            (2, 3) => 2.0,
            (1, 3) => 1.0,
            _ => 5.0,
        };
        let kept = max_spanning_forest(4, vec![(1, 2), (1, 3), (2, 3), (3, 4)], w);
        assert_eq!(kept, vec![(1, 2), (2, 3), (3, 4)]);
    }
}

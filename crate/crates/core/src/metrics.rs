//! Evaluation of recovered topology and impedances against a reference network.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::RadialNetwork;
use crate::topology::AdjacencyEstimate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("row has fewer than two distinct values")]
    ConstantRow,
    #[error("estimate covers {estimate} buses, reference has {truth}")]
    UniverseMismatch { estimate: usize, truth: usize },
    #[error("no estimate for branch {0}")]
    MissingBranch(usize),
    #[error("branch {0} is not in the reference network")]
    UnknownBranch(usize),
}

/// `(v - min) / (max - min)`.
pub fn normalize_minmax(row: &[f64]) -> Result<Vec<f64>, MetricsError> {
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || !(hi - lo).is_finite() {
        return Err(MetricsError::ConstantRow);
    }
    Ok(row.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyScore {
    pub precision: f64,
    pub recall: f64,
    pub false_edges: Vec<(usize, usize)>,
    pub missing_edges: Vec<(usize, usize)>,
    /// Whether the estimated substation buses equal the true children of bus 0.
    pub root_match: bool,
}

fn undirected(edges: impl IntoIterator<Item = (usize, usize)>) -> BTreeSet<(usize, usize)> {
    edges.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect()
}

/// Precision and recall of unordered edges among buses `1..=n`. An empty
/// estimated (or true) edge set scores a vacuous 1.
pub fn compare_edges(estimated: &[(usize, usize)], truth: &[(usize, usize)]) -> (f64, f64) {
    let (est, tru) = (undirected(estimated.iter().copied()), undirected(truth.iter().copied()));
    let hit = est.intersection(&tru).count() as f64;
    let ratio = |den: usize| if den == 0 { 1.0 } else { hit / den as f64 };
    (ratio(est.len()), ratio(tru.len()))
}

pub fn compare_topology(est: &AdjacencyEstimate, truth: &RadialNetwork) -> Result<TopologyScore, MetricsError> {
    if est.n != truth.n() {
        return Err(MetricsError::UniverseMismatch {
            estimate: est.n,
            truth: truth.n(),
        });
    }
    let true_edges: Vec<(usize, usize)> = truth.tree().edges().into_iter().filter(|e| e.0 != 0 && e.1 != 0).collect();
    let (precision, recall) = compare_edges(&est.edges, &true_edges);
    let (e, t) = (undirected(est.edges.iter().copied()), undirected(true_edges));
    let true_roots: BTreeSet<usize> = truth.tree().children(0).iter().copied().collect();
    Ok(TopologyScore {
        precision,
        recall,
        false_edges: e.difference(&t).copied().collect(),
        missing_edges: t.difference(&e).copied().collect(),
        root_match: est.root_buses.iter().copied().collect::<BTreeSet<_>>() == true_roots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchError {
    pub branch: usize,
    pub depth: usize,
    pub r_true: f64,
    pub r_hat: f64,
    pub x_true: f64,
    pub x_hat: f64,
    /// Percent.
    pub rel_err_r: f64,
    pub rel_err_x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceErrors {
    pub rows: Vec<BranchError>,
    pub max_rel_err_r: f64,
    pub max_rel_err_x: f64,
}

fn rel_err(hat: f64, truth: f64) -> f64 {
    (hat - truth).abs() / truth.abs() * 100.0
}

/// Per-branch `|ĥ - h| / h` in percent, for estimates keyed by branch.
pub fn relative_errors(estimates: &BTreeMap<usize, (f64, f64)>, truth: &RadialNetwork) -> Result<ImpedanceErrors, MetricsError> {
    if let Some(&j) = estimates.keys().find(|&&j| j == 0 || j > truth.n()) {
        return Err(MetricsError::UnknownBranch(j));
    }
    let rows = (1..=truth.n())
        .map(|j| {
            let &(r_hat, x_hat) = estimates.get(&j).ok_or(MetricsError::MissingBranch(j))?;
            let (r_true, x_true) = (truth.r(j), truth.x(j));
            Ok(BranchError {
                branch: j,
                depth: truth.tree().depth(j),
                r_true,
                r_hat,
                x_true,
                x_hat,
                rel_err_r: rel_err(r_hat, r_true),
                rel_err_x: rel_err(x_hat, x_true),
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(ImpedanceErrors {
        max_rel_err_r: rows.iter().map(|r| r.rel_err_r).fold(0.0, f64::max),
        max_rel_err_x: rows.iter().map(|r| r.rel_err_x).fold(0.0, f64::max),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub depth: usize,
    pub branches: usize,
    pub max_rel_err_r: f64,
    pub max_rel_err_x: f64,
}

/// Worst errors per depth, deepest first (the order the sweep visits them).
pub fn propagation_trace(errors: &ImpedanceErrors) -> Vec<LayerError> {
    let mut by_depth: BTreeMap<usize, LayerError> = BTreeMap::new();
    for row in &errors.rows {
        let e = by_depth.entry(row.depth).or_insert(LayerError {
            depth: row.depth,
            branches: 0,
            max_rel_err_r: 0.0,
            max_rel_err_x: 0.0,
        });
        e.branches += 1;
        e.max_rel_err_r = e.max_rel_err_r.max(row.rel_err_r);
        e.max_rel_err_x = e.max_rel_err_x.max(row.rel_err_x);
    }
    by_depth.into_values().rev().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub edge_precision: f64,
    pub edge_recall: f64,
    pub root_match: bool,
    pub max_rel_err_r: f64,
    pub max_rel_err_x: f64,
    pub per_branch_errors: Vec<BranchError>,
    pub propagation_trace: Vec<LayerError>,
    /// Seconds per stage.
    pub runtimes: BTreeMap<String, f64>,
}

impl EvaluationReport {
    pub fn new(topology: &TopologyScore, impedance: &ImpedanceErrors) -> Self {
        EvaluationReport {
            edge_precision: topology.precision,
            edge_recall: topology.recall,
            root_match: topology.root_match,
            max_rel_err_r: impedance.max_rel_err_r,
            max_rel_err_x: impedance.max_rel_err_x,
            per_branch_errors: impedance.rows.clone(),
            propagation_trace: propagation_trace(impedance),
            runtimes: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-branch table, one row per branch.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.per_branch_errors {
            w.serialize(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Evaluation report\n\n");
        s += "| metric | value |\n|---|---|\n";
        s += &format!("| edge precision | {:.4} |\n", self.edge_precision);
        s += &format!("| edge recall | {:.4} |\n", self.edge_recall);
        s += &format!("| substation buses match | {} |\n", self.root_match);
        s += &format!("| max relative error r (%) | {:.3e} |\n", self.max_rel_err_r);
        s += &format!("| max relative error x (%) | {:.3e} |\n", self.max_rel_err_x);
        for (stage, secs) in &self.runtimes {
            s += &format!("| runtime {stage} (s) | {secs:.3} |\n");
        }
        s += "\n## Per-branch errors\n\n| branch | depth | r | r̂ | err r (%) | x | x̂ | err x (%) |\n|---|---|---|---|---|---|---|---|\n";
        for r in &self.per_branch_errors {
            s += &format!(
                "| {} | {} | {:.6e} | {:.6e} | {:.3e} | {:.6e} | {:.6e} | {:.3e} |\n",
                r.branch, r.depth, r.r_true, r.r_hat, r.rel_err_r, r.x_true, r.x_hat, r.rel_err_x
            );
        }
        s += "\n## Errors by depth\n\n| depth | branches | max err r (%) | max err x (%) |\n|---|---|---|---|\n";
        for l in &self.propagation_trace {
            s += &format!("| {} | {} | {:.3e} | {:.3e} |\n", l.depth, l.branches, l.max_rel_err_r, l.max_rel_err_x);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Branch, Bus};

    fn path3() -> RadialNetwork {
        let buses = (0..=3).map(Bus::new).collect();
        let branches = vec![
            Branch::new(1, 0, 0.01, 0.02),
            Branch::new(2, 1, 0.02, 0.01),
            Branch::new(3, 2, 0.03, 0.03),
        ];
        RadialNetwork::build(buses, branches).unwrap()
    }

    #[test]
    fn minmax() {
        assert_eq!(normalize_minmax(&[-2.0, 0.0, 2.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_minmax(&[3.0, 3.0]), Err(MetricsError::ConstantRow));
        assert_eq!(normalize_minmax(&[]), Err(MetricsError::ConstantRow));
    }

    #[test]
    fn edge_scores() {
        let truth: Vec<(usize, usize)> = (1..=10).map(|i| (i, i + 1)).collect();
        assert_eq!(compare_edges(&truth, &truth), (1.0, 1.0));
        assert_eq!(compare_edges(&truth[..9], &truth), (1.0, 0.9));
        let flipped: Vec<_> = truth.iter().rev().map(|&(a, b)| (b, a)).collect();
        assert_eq!(compare_edges(&flipped, &truth), (1.0, 1.0));
    }

    #[test]
    fn topology_universe() {
        let est = AdjacencyEstimate {
            n: 2,
            edges: vec![(1, 2)],
            root_buses: vec![1],
            gamma: 4,
            rows: vec![],
        };
        assert_eq!(
            compare_topology(&est, &path3()),
            Err(MetricsError::UniverseMismatch { estimate: 2, truth: 3 })
        );
        let est = AdjacencyEstimate { n: 3, edges: vec![(1, 2), (2, 3)], ..est };
        let score = compare_topology(&est, &path3()).unwrap();
        assert_eq!((score.precision, score.recall, score.root_match), (1.0, 1.0, true));
    }

    #[test]
    fn relative_error_arithmetic() {
        let net = path3();
        let mut est: BTreeMap<usize, (f64, f64)> = (1..=3).map(|j| (j, (net.r(j), net.x(j)))).collect();
        let exact = relative_errors(&est, &net).unwrap();
        assert_eq!((exact.max_rel_err_r, exact.max_rel_err_x), (0.0, 0.0));
        est.insert(2, (1.01 * net.r(2), net.x(2)));
        let e = relative_errors(&est, &net).unwrap();
        assert!((e.rows[1].rel_err_r - 1.0).abs() < 1e-9);
        assert_eq!(propagation_trace(&e)[0].depth, 3);
        est.remove(&3);
        assert_eq!(relative_errors(&est, &net), Err(MetricsError::MissingBranch(3)));
    }

    #[test]
    fn report_formats() {
        let net = path3();
        let est: BTreeMap<usize, (f64, f64)> = (1..=3).map(|j| (j, (net.r(j), net.x(j)))).collect();
        let score = TopologyScore {
            precision: 1.0,
            recall: 1.0,
            false_edges: vec![],
            missing_edges: vec![],
            root_match: true,
        };
        let report = EvaluationReport::new(&score, &relative_errors(&est, &net).unwrap());
        assert_eq!(report.to_csv().lines().count(), 4);
        assert!(report.to_markdown().contains("| edge recall | 1.0000 |"));
        let back: EvaluationReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}

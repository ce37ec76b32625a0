use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::branch::{solve_branch, unexcited_fallback};
use super::{
    BranchEstimate, BranchRegressionInput, BranchSample, Confidence, ImpedanceError, Method,
    SolverConfig,
};
use crate::network::{ConductorLibrary, Tree};
use crate::powerflow::{
    update_receiving_flows, update_sending_flows, BranchFlows, FlowState, PowerFlowError, SampleSet,
};
use crate::topology::AdjacencyEstimate;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub method: Method,
    pub solver: SolverConfig,
    /// Branches whose `(r, x)` is imposed rather than estimated.
    pub overrides: BTreeMap<usize, (f64, f64)>,
    /// Give unexcited branches a placeholder estimate instead of failing.
    pub fallback_unexcited: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            method: Method::Lad,
            solver: SolverConfig::default(),
            overrides: BTreeMap::new(),
            fallback_unexcited: true,
        }
    }
}

impl SweepOptions {
    pub fn with_method(method: Method) -> Self {
        SweepOptions {
            method,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub estimates: BTreeMap<usize, BranchEstimate>,
    /// Depths in processing order.
    pub layer_order: Vec<usize>,
    /// Branches of each processed layer, aligned with `layer_order`.
    pub layers: Vec<Vec<usize>>,
    /// Reconstructed flows of every sample.
    pub flow_trace: Vec<BranchFlows>,
}

impl SweepResult {
    /// Estimated `(r, x)` indexed `branch - 1`.
    pub fn impedances(&self) -> Vec<(f64, f64)> {
        self.estimates.values().map(|e| (e.r, e.x)).collect()
    }
}

/// Orients an undirected edge set over buses `0..=n` away from bus 0.
pub fn orient_tree(n: usize, edges: &[(usize, usize)]) -> Result<Tree, ImpedanceError> {
    let not_a_tree = ImpedanceError::NotATree { n };
    if n == 0 || edges.len() != n {
        return Err(not_a_tree);
    }
    let mut adj = vec![BTreeSet::new(); n + 1];
    for &(a, b) in edges {
        if a > n || b > n || a == b || !adj[a].insert(b) {
            return Err(not_a_tree);
        }
        adj[b].insert(a);
    }
    let mut parents = vec![usize::MAX; n + 1];
    parents[0] = 0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for &w in &adj[u] {
            if parents[w] == usize::MAX {
                parents[w] = u;
                queue.push_back(w);
            }
        }
    }
    if parents.contains(&usize::MAX) {
        return Err(not_a_tree);
    }
    Tree::from_parents(&parents).map_err(|_| not_a_tree)
}

/// Tree of a stage-1 estimate, rooted through its substation buses.
pub fn tree_from_adjacency(adj: &AdjacencyEstimate) -> Result<Tree, ImpedanceError> {
    orient_tree(adj.n, &adj.all_edges()).map_err(|_| ImpedanceError::UnrootedTopology)
}

fn check_dims(tree: &Tree, samples: &SampleSet) -> Result<(), ImpedanceError> {
    if samples.n() != tree.n() {
        return Err(PowerFlowError::DimensionMismatch {
            expected: tree.n(),
            got: samples.n(),
        }
        .into());
    }
    if samples.is_empty() {
        return Err(ImpedanceError::NoSamples);
    }
    Ok(())
}

fn branch_input(tree: &Tree, samples: &SampleSet, states: &[FlowState], j: usize) -> Result<BranchRegressionInput, ImpedanceError> {
    let parent = tree.parent(j);
    let rows = samples
        .snapshots()
        .iter()
        .zip(states)
        .map(|(snap, st)| {
            let (p, q) = st.recv[j - 1].expect("receiving flows are set before estimation");
            BranchSample {
                dv: snap.voltage(parent) - snap.voltage(j),
                p,
                q,
                v: snap.voltage(j),
            }
        })
        .collect();
    BranchRegressionInput::new(rows)
}

fn overridden(input: &BranchRegressionInput, library: &ConductorLibrary, method: Method, r: f64, x: f64) -> BranchEstimate {
    let lambda = r / x;
    let residuals: Vec<f64> = input
        .samples()
        .iter()
        .map(|s| s.dv - 2.0 * (r * s.p + x * s.q) - (r * r + x * x) * (s.p * s.p + s.q * s.q) / s.v)
        .collect();
    let objective = match method {
        Method::Lad => residuals.iter().map(|e| e.abs()).sum(),
        _ => residuals.iter().map(|e| e * e).sum(),
    };
    BranchEstimate {
        r,
        x,
        z: library.index_of(lambda, 1e-9),
        lambda,
        objective,
        residuals,
        per_z_objectives: Vec::new(),
        confidence: Confidence::Overridden,
    }
}

/// Most frequently chosen library entry so far; ties go to the lower index.
fn most_common_z(estimates: &BTreeMap<usize, BranchEstimate>) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for z in estimates.values().filter(|e| e.confidence == Confidence::Normal).filter_map(|e| e.z) {
        *counts.entry(z).or_default() += 1;
    }
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map_or(0, |(&z, _)| z)
}

/// Leaf-to-root estimation. Layer by layer from the deepest: receiving
/// flows from the injections and the children's sending flows, one
/// regression per branch (in parallel within the layer), then the sending
/// flows implied by the new estimates.
pub fn sweep(
    tree: &Tree,
    samples: &SampleSet,
    library: &ConductorLibrary,
    opts: &SweepOptions,
) -> Result<SweepResult, ImpedanceError> {
    check_dims(tree, samples)?;
    if library.is_empty() {
        return Err(ImpedanceError::EmptyLibrary);
    }
    let mut states = vec![FlowState::new(tree.n()); samples.len()];
    let mut estimates: BTreeMap<usize, BranchEstimate> = BTreeMap::new();
    let mut layer_order = Vec::new();
    let mut layers = Vec::new();

    for d in (1..=tree.max_depth()).rev() {
        for (snap, st) in samples.snapshots().iter().zip(states.iter_mut()) {
            update_receiving_flows(tree, d, snap, st)?;
        }
        let layer = tree.layer(d);
        let solved: Vec<Result<Option<BranchEstimate>, ImpedanceError>> = layer
            .par_iter()
            .map(|&j| {
                let input = branch_input(tree, samples, &states, j)?;
                if let Some(&(r, x)) = opts.overrides.get(&j) {
                    return Ok(Some(overridden(&input, library, opts.method, r, x)));
                }
                match solve_branch(&input, library, opts.method, &opts.solver) {
                    Ok(est) => Ok(Some(est)),
                    Err(ImpedanceError::AllCandidatesDegenerate) if opts.fallback_unexcited => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect();

        let mut pending = Vec::new();
        for (&j, res) in layer.iter().zip(solved) {
            let wrap = |e: ImpedanceError| ImpedanceError::InBranch {
                layer: d,
                branch: j,
                source: Box::new(e),
            };
            match res.map_err(wrap)? {
                Some(est) => {
                    estimates.insert(j, est);
                }
                None => pending.push(j),
            }
        }
        for j in pending {
            log::warn!("branch {j} carries no power; using a placeholder impedance");
            let input = branch_input(tree, samples, &states, j)?;
            let z = most_common_z(&estimates);
            estimates.insert(j, unexcited_fallback(&input, library, z, opts.method, &opts.solver));
        }

        for (snap, st) in samples.snapshots().iter().zip(states.iter_mut()) {
            update_sending_flows(tree, d, snap, |j| (estimates[&j].r, estimates[&j].x), st)?;
        }
        layer_order.push(d);
        layers.push(layer.to_vec());
    }

    let flow_trace = states
        .iter()
        .map(|s| s.complete().expect("every layer visited"))
        .collect();
    Ok(SweepResult {
        estimates,
        layer_order,
        layers,
        flow_trace,
    })
}

/// The sweep's flow reconstruction with known impedances (`impedances[j - 1]`).
pub fn reconstruct_flows(
    tree: &Tree,
    samples: &SampleSet,
    impedances: &[(f64, f64)],
) -> Result<Vec<BranchFlows>, ImpedanceError> {
    check_dims(tree, samples)?;
    if impedances.len() != tree.n() {
        return Err(PowerFlowError::DimensionMismatch {
            expected: tree.n(),
            got: impedances.len(),
        }
        .into());
    }
    samples
        .snapshots()
        .par_iter()
        .map(|snap| {
            let mut st = FlowState::new(tree.n());
            for d in (1..=tree.max_depth()).rev() {
                update_receiving_flows(tree, d, snap, &mut st)?;
                update_sending_flows(tree, d, snap, |j| impedances[j - 1], &mut st)?;
            }
            Ok(st.complete().expect("every layer visited"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orient_path() {
        let t = orient_tree(2, &[(0, 1), (2, 1)]).unwrap();
        assert_eq!(t.layers(), &[vec![1], vec![2]]);
        assert_eq!(t.parent(2), 1);
    }

    #[test]
    fn orient_rejects_non_trees() {
        // chord
        assert!(orient_tree(3, &[(0, 1), (1, 2), (2, 3), (1, 3)]).is_err());
        // cycle plus isolated bus
        assert!(orient_tree(3, &[(1, 2), (2, 3), (1, 3)]).is_err());
        // duplicate edge
        assert!(orient_tree(2, &[(0, 1), (1, 0)]).is_err());
        assert!(orient_tree(2, &[(0, 1), (1, 5)]).is_err());
    }
}

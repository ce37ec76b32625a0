//! Radial network data model.
//!
//! Buses are dense integers `0..=n` with bus 0 the substation secondary.
//! Every other bus `j` has exactly one upstream branch, and that branch is
//! labelled `j` as well. All matrices below are indexed by `bus - 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("network has no branches")]
    Empty,
    #[error("bus ids must be contiguous 0..=n with a single substation bus 0 (problem at id {0})")]
    InvalidBusIds(usize),
    #[error("branch {branch} references unknown bus {bus}")]
    UnknownBus { branch: usize, bus: usize },
    #[error("more than one branch ends at bus {0}")]
    DuplicateDownstreamBus(usize),
    #[error("branch {0} must have r > 0 and x > 0")]
    NonPositiveImpedance(usize),
    #[error("cycle detected through bus {0}")]
    CycleDetected(usize),
    #[error("bus {0} is not connected to the substation")]
    Disconnected(usize),
    #[error("conductor library is empty")]
    EmptyLibrary,
    #[error("conductor library ratio {0} is not strictly positive")]
    NonPositiveRatio(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl Bus {
    pub fn new(id: usize) -> Self {
        Bus { id, name: None }
    }

    pub fn named(id: usize, name: impl Into<String>) -> Self {
        Bus {
            id,
            name: Some(name.into()),
        }
    }
}

/// A line segment, labelled by its downstream bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: usize,
    pub parent: usize,
    pub r: f64,
    pub x: f64,
}

impl Branch {
    pub fn new(id: usize, parent: usize, r: f64, x: f64) -> Self {
        Branch { id, parent, r, x }
    }

    pub fn ratio(&self) -> f64 {
        self.r / self.x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseValues {
    #[serde(rename = "v_base_kV")]
    pub v_base_kv: f64,
    #[serde(rename = "s_base_kVA")]
    pub s_base_kva: f64,
}

/// Rooted tree over buses `0..=n`.
///
/// Holds the parent/children relation, bus depths and the layer partition
/// used by the bottom-up sweep. Construction validates that the parent map
/// is acyclic and reaches bus 0 from every bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    parent: Vec<usize>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    layers: Vec<Vec<usize>>,
}

impl Tree {
    /// Builds a tree from `parents[j]` for `j = 1..=n`; `parents[0]` is ignored.
    pub fn from_parents(parents: &[usize]) -> Result<Self, NetworkError> {
        let n = parents.len().saturating_sub(1);
        if n == 0 {
            return Err(NetworkError::Empty);
        }
        for (j, &p) in parents.iter().enumerate().skip(1) {
            if p > n {
                return Err(NetworkError::UnknownBus { branch: j, bus: p });
            }
            if p == j {
                return Err(NetworkError::CycleDetected(j));
            }
        }

        // 0 = unvisited, 1 = on the current walk, 2 = resolved
        let mut state = vec![0u8; n + 1];
        let mut depth = vec![0usize; n + 1];
        state[0] = 2;
        for start in 1..=n {
            let mut walk = Vec::new();
            let mut cur = start;
            while state[cur] == 0 {
                state[cur] = 1;
                walk.push(cur);
                cur = parents[cur];
            }
            if state[cur] == 1 {
                return Err(NetworkError::CycleDetected(cur));
            }
            let mut d = depth[cur];
            for &bus in walk.iter().rev() {
                d += 1;
                depth[bus] = d;
                state[bus] = 2;
            }
        }

        let mut parent = parents.to_vec();
        parent[0] = 0;
        let mut children = vec![Vec::new(); n + 1];
        for j in 1..=n {
            children[parent[j]].push(j);
        }
        let max_depth = depth.iter().copied().max().unwrap_or(0);
        let mut layers = vec![Vec::new(); max_depth];
        for j in 1..=n {
            layers[depth[j] - 1].push(j);
        }
        Ok(Tree {
            parent,
            children,
            depth,
            layers,
        })
    }

    /// Number of non-substation buses (and branches).
    pub fn n(&self) -> usize {
        self.parent.len() - 1
    }

    /// Maximum depth `D`.
    pub fn max_depth(&self) -> usize {
        self.layers.len()
    }

    pub fn parent(&self, bus: usize) -> usize {
        self.parent[bus]
    }

    /// Parent map indexed by bus; entry 0 is 0.
    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    pub fn children(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    pub fn depth(&self, bus: usize) -> usize {
        self.depth[bus]
    }

    /// Buses at depth `d`, `1 <= d <= D`.
    pub fn layer(&self, d: usize) -> &[usize] {
        &self.layers[d - 1]
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    /// Buses on the path from `bus` up to (but excluding) the substation,
    /// starting with `bus` itself.
    pub fn path(&self, bus: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.depth[bus]);
        let mut cur = bus;
        while cur != 0 {
            out.push(cur);
            cur = self.parent[cur];
        }
        out
    }

    /// True when `i` lies on the path from `j` to the substation (`i == j` included).
    pub fn is_on_path(&self, i: usize, j: usize) -> bool {
        if i == 0 || self.depth[i] > self.depth[j] {
            return false;
        }
        let mut cur = j;
        while self.depth[cur] > self.depth[i] {
            cur = self.parent[cur];
        }
        cur == i
    }

    /// The child of `i` that lies on the path from `j` to the root, if any.
    pub fn child_towards(&self, i: usize, j: usize) -> Option<usize> {
        if i == j || !self.is_on_path(i, j) {
            return None;
        }
        let mut cur = j;
        while self.parent[cur] != i {
            cur = self.parent[cur];
        }
        Some(cur)
    }

    /// All `(parent, child)` pairs, ordered by child id.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (1..=self.n()).map(|j| (self.parent[j], j)).collect()
    }

    /// Reduced incidence matrix `A` (rows: buses 1..n, columns: branches 1..n).
    pub fn incidence(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut a = DMatrix::zeros(n, n);
        for j in 1..=n {
            a[(j - 1, j - 1)] = -1.0;
            let p = self.parent[j];
            if p != 0 {
                a[(p - 1, j - 1)] = 1.0;
            }
        }
        a
    }

    /// Substation row `a0` of the incidence matrix.
    pub fn root_incidence(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            (1..=self.n()).map(|j| if self.parent[j] == 0 { 1.0 } else { 0.0 }),
        )
    }

    /// `A^{-1}` built from path membership: `b_ij = -1` iff `i` is on the path of `j`.
    pub fn reduced_incidence_inverse(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut b = DMatrix::zeros(n, n);
        for j in 1..=n {
            for i in self.path(j) {
                b[(i - 1, j - 1)] = -1.0;
            }
        }
        b
    }
}

/// Validated radial feeder with per-branch impedances.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialNetwork {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    tree: Tree,
    base: Option<BaseValues>,
}

impl RadialNetwork {
    pub fn build(buses: Vec<Bus>, branches: Vec<Branch>) -> Result<Self, NetworkError> {
        let mut buses = buses;
        buses.sort_by_key(|b| b.id);
        for (expected, bus) in buses.iter().enumerate() {
            if bus.id != expected {
                return Err(NetworkError::InvalidBusIds(bus.id));
            }
        }
        let n = buses.len().saturating_sub(1);
        if n == 0 {
            return Err(NetworkError::Empty);
        }

        let mut slots: Vec<Option<Branch>> = vec![None; n + 1];
        for br in &branches {
            if br.id == 0 || br.id > n {
                return Err(NetworkError::UnknownBus {
                    branch: br.id,
                    bus: br.id,
                });
            }
            if br.parent > n {
                return Err(NetworkError::UnknownBus {
                    branch: br.id,
                    bus: br.parent,
                });
            }
            if !(br.r > 0.0 && br.x > 0.0 && br.r.is_finite() && br.x.is_finite()) {
                return Err(NetworkError::NonPositiveImpedance(br.id));
            }
            if slots[br.id].replace(*br).is_some() {
                return Err(NetworkError::DuplicateDownstreamBus(br.id));
            }
        }

        // buses without an upstream branch are parked on the root so that
        // cycles elsewhere are still reported first
        let parents: Vec<usize> = slots
            .iter()
            .map(|s| s.map_or(0, |b| b.parent))
            .collect();
        let tree = Tree::from_parents(&parents)?;
        if let Some(j) = (1..=n).find(|&j| slots[j].is_none()) {
            return Err(NetworkError::Disconnected(j));
        }
        let branches = slots.into_iter().flatten().collect();
        Ok(RadialNetwork {
            buses,
            branches,
            tree,
            base: None,
        })
    }

    pub fn with_base(mut self, base: BaseValues) -> Self {
        self.base = Some(base);
        self
    }

    pub fn base(&self) -> Option<BaseValues> {
        self.base
    }

    pub fn n(&self) -> usize {
        self.tree.n()
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    /// Branches ordered by id.
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch(&self, j: usize) -> &Branch {
        &self.branches[j - 1]
    }

    pub fn r(&self, j: usize) -> f64 {
        self.branches[j - 1].r
    }

    pub fn x(&self, j: usize) -> f64 {
        self.branches[j - 1].x
    }

    /// Per-branch R/X ratios, ordered by branch id.
    pub fn ratios(&self) -> Vec<f64> {
        self.branches.iter().map(Branch::ratio).collect()
    }

    pub fn mean_ratio(&self) -> f64 {
        let r = self.ratios();
        r.iter().sum::<f64>() / r.len() as f64
    }

    /// Same topology, new impedances (`(r, x)` per branch, ordered by id).
    pub fn with_impedances(&self, impedances: &[(f64, f64)]) -> Result<Self, NetworkError> {
        let branches = self
            .branches
            .iter()
            .zip(impedances)
            .map(|(b, &(r, x))| Branch::new(b.id, b.parent, r, x))
            .collect();
        let mut net = RadialNetwork::build(self.buses.clone(), branches)?;
        net.base = self.base;
        Ok(net)
    }

    /// Weighted Laplacian `Y = A X^{-1} A^T`, assembled entrywise from the tree.
    pub fn weighted_laplacian(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut y = DMatrix::zeros(n, n);
        for j in 1..=n {
            let w = 1.0 / self.x(j);
            y[(j - 1, j - 1)] += w;
            let p = self.tree.parent(j);
            if p != 0 {
                y[(p - 1, p - 1)] += w;
                y[(p - 1, j - 1)] = -w;
                y[(j - 1, p - 1)] = -w;
            }
        }
        y
    }

    /// Deviations `lambda_j - mean(lambda)`, ordered by branch id.
    pub fn ratio_deviations(&self) -> Vec<f64> {
        let mean = self.mean_ratio();
        self.ratios().into_iter().map(|l| l - mean).collect()
    }

    /// Heterogeneity matrix `A diag(dlambda) A^{-1}`, assembled entrywise from path structure.
    pub fn delta_lambda_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let dl = self.ratio_deviations();
        let mut m = DMatrix::zeros(n, n);
        for j in 1..=n {
            for i in self.tree.path(j) {
                let v = if i == j {
                    dl[i - 1]
                } else {
                    let c = self
                        .tree
                        .child_towards(i, j)
                        .expect("ancestor has a child towards j");
                    dl[i - 1] - dl[c - 1]
                };
                m[(i - 1, j - 1)] = v;
            }
        }
        m
    }

    pub fn reduced_incidence_inverse(&self) -> DMatrix<f64> {
        self.tree.reduced_incidence_inverse()
    }
}

/// Admissible R/X ratios, sorted ascending and deduplicated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConductorLibrary {
    ratios: Vec<f64>,
}

const LIBRARY_DEDUP_TOL: f64 = 1e-9;

impl ConductorLibrary {
    pub fn new(mut ratios: Vec<f64>) -> Result<Self, NetworkError> {
        if ratios.is_empty() {
            return Err(NetworkError::EmptyLibrary);
        }
        if let Some(&bad) = ratios.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(NetworkError::NonPositiveRatio(bad));
        }
        ratios.sort_by(f64::total_cmp);
        ratios.dedup_by(|a, b| (*a - *b).abs() <= LIBRARY_DEDUP_TOL);
        Ok(ConductorLibrary { ratios })
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    pub fn get(&self, z: usize) -> f64 {
        self.ratios[z]
    }

    /// Index of the entry closest to `ratio`, if within `tol`.
    pub fn index_of(&self, ratio: f64, tol: f64) -> Option<usize> {
        self.ratios
            .iter()
            .enumerate()
            .map(|(z, l)| (z, (l - ratio).abs()))
            .filter(|(_, d)| *d <= tol)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(z, _)| z)
    }
}

impl<'de> Deserialize<'de> for ConductorLibrary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            ratios: Vec<f64>,
        }
        let raw = Raw::deserialize(d)?;
        ConductorLibrary::new(raw.ratios).map_err(serde::de::Error::custom)
    }
}

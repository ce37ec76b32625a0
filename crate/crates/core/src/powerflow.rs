//! Branch-flow (DistFlow) solvers and smart-meter sample synthesis.
//!
//! Sign convention: `p`, `q` are net injections, so loads are negative and
//! the receiving-end flow of a leaf branch is `P_j = -p_j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{RadialNetwork, Tree};

/// Iteration cap of the backward/forward sweep.
pub const MAX_SWEEPS: usize = 200;
/// Convergence threshold on `max |dv|` between sweeps.
pub const VOLTAGE_TOL: f64 = 1e-12;
/// Smallest squared voltage accepted when dividing by `v_j`.
pub const MIN_VOLTAGE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("power flow did not converge{}: {reason}", sample.map(|k| format!(" at sample {k}")).unwrap_or_default())]
    NonConvergence {
        sample: Option<usize>,
        reason: String,
    },
    #[error("voltage at bus {bus} is not above {MIN_VOLTAGE}")]
    ZeroVoltage { bus: usize },
    #[error("sending-end flow of child {child} is unknown while updating branch {branch}")]
    MissingChildFlow { branch: usize, child: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("squared voltage must be positive (sample {sample}, bus {bus})")]
    NonPositiveVoltage { sample: usize, bus: usize },
}

impl PowerFlowError {
    fn at_sample(self, k: usize) -> Self {
        match self {
            PowerFlowError::NonConvergence { reason, .. } => PowerFlowError::NonConvergence {
                sample: Some(k),
                reason,
            },
            other => other,
        }
    }
}

/// One synchronized smart-meter reading of buses `1..=n` (index `bus - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Squared voltage magnitudes.
    pub v: Vec<f64>,
    /// Squared substation voltage.
    pub v0: f64,
}

impl Snapshot {
    pub fn n(&self) -> usize {
        self.v.len()
    }

    /// Squared voltage at any bus, including the substation.
    pub fn voltage(&self, bus: usize) -> f64 {
        if bus == 0 {
            self.v0
        } else {
            self.v[bus - 1]
        }
    }
}

/// `K` coherently indexed snapshots over the same `n` buses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    n: usize,
    snapshots: Vec<Snapshot>,
}

impl SampleSet {
    pub fn new(n: usize, snapshots: Vec<Snapshot>) -> Result<Self, PowerFlowError> {
        for (k, s) in snapshots.iter().enumerate() {
            for len in [s.p.len(), s.q.len(), s.v.len()] {
                if len != n {
                    return Err(PowerFlowError::DimensionMismatch {
                        expected: n,
                        got: len,
                    });
                }
            }
            if !(s.v0 > 0.0) {
                return Err(PowerFlowError::NonPositiveVoltage { sample: k, bus: 0 });
            }
            if let Some(j) = s.v.iter().position(|v| !(*v > 0.0)) {
                return Err(PowerFlowError::NonPositiveVoltage {
                    sample: k,
                    bus: j + 1,
                });
            }
        }
        Ok(SampleSet { n, snapshots })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn get(&self, k: usize) -> &Snapshot {
        &self.snapshots[k]
    }

    /// Relabels buses: new bus `i + 1` carries the readings of old bus `perm[i] + 1`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |x: &[f64]| perm.iter().map(|&i| x[i]).collect::<Vec<_>>();
        SampleSet {
            n: self.n,
            snapshots: self
                .snapshots
                .iter()
                .map(|s| Snapshot {
                    p: pick(&s.p),
                    q: pick(&s.q),
                    v: pick(&s.v),
                    v0: s.v0,
                })
                .collect(),
        }
    }

    /// Concatenation of `self` with `other` (same bus universe).
    pub fn concat(&self, other: &SampleSet) -> Result<Self, PowerFlowError> {
        if self.n != other.n {
            return Err(PowerFlowError::DimensionMismatch {
                expected: self.n,
                got: other.n,
            });
        }
        let mut snapshots = self.snapshots.clone();
        snapshots.extend(other.snapshots.iter().cloned());
        Ok(SampleSet {
            n: self.n,
            snapshots,
        })
    }
}

/// Receiving-end (`P`, `Q`) and sending-end (`P̄`, `Q̄`) flows, indexed `branch - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFlows {
    pub p_recv: Vec<f64>,
    pub q_recv: Vec<f64>,
    pub p_send: Vec<f64>,
    pub q_send: Vec<f64>,
}

impl BranchFlows {
    fn zeros(n: usize) -> Self {
        BranchFlows {
            p_recv: vec![0.0; n],
            q_recv: vec![0.0; n],
            p_send: vec![0.0; n],
            q_send: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub snapshot: Snapshot,
    pub flows: BranchFlows,
    pub iterations: usize,
}

fn check_len(n: usize, got: usize) -> Result<(), PowerFlowError> {
    if n == got {
        Ok(())
    } else {
        Err(PowerFlowError::DimensionMismatch { expected: n, got })
    }
}

fn backward_pass(net: &RadialNetwork, p: &[f64], q: &[f64], v: &[f64], flows: &mut BranchFlows) {
    let tree = net.tree();
    for layer in tree.layers().iter().rev() {
        for &j in layer {
            let i = j - 1;
            let (mut pr, mut qr) = (-p[i], -q[i]);
            for &c in tree.children(j) {
                pr += flows.p_send[c - 1];
                qr += flows.q_send[c - 1];
            }
            let s = (pr * pr + qr * qr) / v[i];
            flows.p_recv[i] = pr;
            flows.q_recv[i] = qr;
            flows.p_send[i] = pr + net.r(j) * s;
            flows.q_send[i] = qr + net.x(j) * s;
        }
    }
}

/// Solves the branch flow model by a backward (flows) / forward (voltages)
/// fixed-point sweep.
pub fn solve_exact(
    net: &RadialNetwork,
    p: &[f64],
    q: &[f64],
    v0: f64,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = net.n();
    check_len(n, p.len())?;
    check_len(n, q.len())?;
    if !(v0 > 0.0) || !p.iter().chain(q).all(|x| x.is_finite()) {
        return Err(PowerFlowError::NonConvergence {
            sample: None,
            reason: "invalid injections or substation voltage".into(),
        });
    }
    let tree = net.tree();
    let mut v = vec![v0; n];
    let mut flows = BranchFlows::zeros(n);

    for iter in 1..=MAX_SWEEPS {
        backward_pass(net, p, q, &v, &mut flows);
        let mut delta: f64 = 0.0;
        for layer in tree.layers() {
            for &j in layer {
                let i = j - 1;
                let parent = tree.parent(j);
                let vi = if parent == 0 { v0 } else { v[parent - 1] };
                let (r, x) = (net.r(j), net.x(j));
                let (pr, qr) = (flows.p_recv[i], flows.q_recv[i]);
                let vj = vi - 2.0 * (r * pr + x * qr) - (r * r + x * x) * (pr * pr + qr * qr) / v[i];
                if !(vj > MIN_VOLTAGE) || !vj.is_finite() {
                    return Err(PowerFlowError::NonConvergence {
                        sample: None,
                        reason: format!("voltage collapse at bus {j}"),
                    });
                }
                delta = delta.max((vj - v[i]).abs());
                v[i] = vj;
            }
        }
        if delta <= VOLTAGE_TOL {
            // refresh flows so the balance equations hold against the final voltages
            backward_pass(net, p, q, &v, &mut flows);
            return Ok(PowerFlowSolution {
                snapshot: Snapshot {
                    p: p.to_vec(),
                    q: q.to_vec(),
                    v,
                    v0,
                },
                flows,
                iterations: iter,
            });
        }
    }
    Err(PowerFlowError::NonConvergence {
        sample: None,
        reason: format!("no convergence within {MAX_SWEEPS} sweeps"),
    })
}

/// Largest residual of the branch flow equations over all branches.
pub fn branch_flow_residual(net: &RadialNetwork, snap: &Snapshot, flows: &BranchFlows) -> f64 {
    let tree = net.tree();
    let mut worst: f64 = 0.0;
    for j in 1..=net.n() {
        let i = j - 1;
        let (r, x) = (net.r(j), net.x(j));
        let (pr, qr) = (flows.p_recv[i], flows.q_recv[i]);
        let vj = snap.v[i];
        let vi = snap.voltage(tree.parent(j));
        let s = (pr * pr + qr * qr) / vj;
        let child_p: f64 = tree.children(j).iter().map(|&c| flows.p_send[c - 1]).sum();
        let child_q: f64 = tree.children(j).iter().map(|&c| flows.q_send[c - 1]).sum();
        let res = [
            pr - (child_p - snap.p[i]),
            qr - (child_q - snap.q[i]),
            flows.p_send[i] - (pr + r * s),
            flows.q_send[i] - (qr + x * s),
            (vi - vj) - (2.0 * (r * pr + x * qr) + (r * r + x * x) * s),
        ];
        for e in res {
            worst = worst.max(e.abs());
        }
    }
    worst
}

/// LinDistFlow voltages `v = v0 1 + 2 A^{-T} (R A^{-1} p + X A^{-1} q)`,
/// evaluated by accumulating lossless flows down the tree.
pub fn solve_linearized(
    net: &RadialNetwork,
    p: &[f64],
    q: &[f64],
    v0: f64,
) -> Result<Snapshot, PowerFlowError> {
    let n = net.n();
    check_len(n, p.len())?;
    check_len(n, q.len())?;
    let tree = net.tree();
    let mut pf = vec![0.0; n];
    let mut qf = vec![0.0; n];
    for layer in tree.layers().iter().rev() {
        for &j in layer {
            let (mut a, mut b) = (-p[j - 1], -q[j - 1]);
            for &c in tree.children(j) {
                a += pf[c - 1];
                b += qf[c - 1];
            }
            pf[j - 1] = a;
            qf[j - 1] = b;
        }
    }
    // accumulate drops relative to v0 so small deviations keep full precision
    let mut drop = vec![0.0; n];
    for layer in tree.layers() {
        for &j in layer {
            let parent = tree.parent(j);
            let up = if parent == 0 { 0.0 } else { drop[parent - 1] };
            drop[j - 1] = up + 2.0 * (net.r(j) * pf[j - 1] + net.x(j) * qf[j - 1]);
        }
    }
    Ok(Snapshot {
        p: p.to_vec(),
        q: q.to_vec(),
        v: drop.iter().map(|d| v0 - d).collect(),
        v0,
    })
}

/// Per-bus active/reactive injection series, indexed `[k][bus - 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadProfiles {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

impl LoadProfiles {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Standard deviations of additive zero-mean Gaussian measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_v: f64,
    pub sigma_p: f64,
    pub sigma_q: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec::default()
    }

    pub fn is_none(&self) -> bool {
        self.sigma_v == 0.0 && self.sigma_p == 0.0 && self.sigma_q == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum V0Profile {
    Constant(f64),
    Series(Vec<f64>),
}

impl V0Profile {
    fn at(&self, k: usize) -> f64 {
        match self {
            V0Profile::Constant(v) => *v,
            V0Profile::Series(s) => s[k],
        }
    }
}

/// Output of [`generate_samples`]: measured samples plus the noiseless truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub samples: SampleSet,
    pub clean: SampleSet,
    pub flows: Vec<BranchFlows>,
}

fn check_profiles(
    net: &RadialNetwork,
    profiles: &LoadProfiles,
    v0: &V0Profile,
) -> Result<(), PowerFlowError> {
    check_len(profiles.p.len(), profiles.q.len())?;
    if let V0Profile::Series(s) = v0 {
        check_len(profiles.len(), s.len())?;
    }
    for (p, q) in profiles.p.iter().zip(&profiles.q) {
        check_len(net.n(), p.len())?;
        check_len(net.n(), q.len())?;
    }
    Ok(())
}

fn add_noise(x: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        let dist = Normal::new(0.0, sigma).expect("finite sigma");
        for xi in x.iter_mut() {
            *xi += dist.sample(rng);
        }
    }
}

/// Solves every snapshot exactly and applies measurement noise afterwards.
///
/// Sample `k` draws its noise from a generator seeded with `seed + k`, so the
/// output does not depend on the thread count.
pub fn generate_samples(
    net: &RadialNetwork,
    profiles: &LoadProfiles,
    noise: &NoiseSpec,
    v0: &V0Profile,
    seed: u64,
) -> Result<GeneratedData, PowerFlowError> {
    check_profiles(net, profiles, v0)?;
    let solved: Vec<Result<PowerFlowSolution, PowerFlowError>> = (0..profiles.len())
        .into_par_iter()
        .map(|k| {
            solve_exact(net, &profiles.p[k], &profiles.q[k], v0.at(k)).map_err(|e| e.at_sample(k))
        })
        .collect();
    let mut clean = Vec::with_capacity(solved.len());
    let mut flows = Vec::with_capacity(solved.len());
    for sol in solved {
        let sol = sol?;
        clean.push(sol.snapshot);
        flows.push(sol.flows);
    }
    let noisy: Vec<Snapshot> = clean
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let mut s = s.clone();
            if !noise.is_none() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
                add_noise(&mut s.v, noise.sigma_v, &mut rng);
                add_noise(&mut s.p, noise.sigma_p, &mut rng);
                add_noise(&mut s.q, noise.sigma_q, &mut rng);
            }
            s
        })
        .collect();
    let n = net.n();
    Ok(GeneratedData {
        samples: SampleSet::new(n, noisy)?,
        clean: SampleSet::new(n, clean)?,
        flows,
    })
}

/// Gross voltage errors: each sample is corrupted with probability
/// `fraction`, every bus of a corrupted sample getting `v *= 1 ± magnitude`
/// with a random sign. Returns the corrupted set and the affected sample
/// indices. The draws use a stream separate from [`generate_samples`] noise.
pub fn corrupt_voltages(
    samples: &SampleSet,
    fraction: f64,
    magnitude: f64,
    seed: u64,
) -> Result<(SampleSet, Vec<usize>), PowerFlowError> {
    let mut hit = Vec::new();
    let snaps = samples
        .snapshots()
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            rng.set_stream(1);
            let mut s = s.clone();
            if rng.random::<f64>() < fraction {
                hit.push(k);
                for v in s.v.iter_mut() {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    *v *= 1.0 + sign * magnitude;
                }
            }
            s
        })
        .collect();
    Ok((SampleSet::new(samples.n(), snaps)?, hit))
}

/// Noiseless LinDistFlow samples for the same profiles.
pub fn generate_linearized_samples(
    net: &RadialNetwork,
    profiles: &LoadProfiles,
    v0: &V0Profile,
) -> Result<SampleSet, PowerFlowError> {
    check_profiles(net, profiles, v0)?;
    let snaps = (0..profiles.len())
        .map(|k| solve_linearized(net, &profiles.p[k], &profiles.q[k], v0.at(k)))
        .collect::<Result<Vec<_>, _>>()?;
    SampleSet::new(net.n(), snaps)
}

/// Partially known flows of one snapshot during a bottom-up sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub recv: Vec<Option<(f64, f64)>>,
    pub send: Vec<Option<(f64, f64)>>,
}

impl FlowState {
    pub fn new(n: usize) -> Self {
        FlowState {
            recv: vec![None; n],
            send: vec![None; n],
        }
    }

    /// Completed flows; `None` while any branch is still unknown.
    pub fn complete(&self) -> Option<BranchFlows> {
        let n = self.recv.len();
        let mut out = BranchFlows::zeros(n);
        for i in 0..n {
            let (pr, qr) = self.recv[i]?;
            let (ps, qs) = self.send[i]?;
            out.p_recv[i] = pr;
            out.q_recv[i] = qr;
            out.p_send[i] = ps;
            out.q_send[i] = qs;
        }
        Some(out)
    }
}

/// `P_j = sum of children's P̄ - p_j` (and likewise for `Q`) for every bus in layer `d`.
pub fn update_receiving_flows(
    tree: &Tree,
    d: usize,
    snap: &Snapshot,
    state: &mut FlowState,
) -> Result<(), PowerFlowError> {
    for &j in tree.layer(d) {
        let (mut pr, mut qr) = (-snap.p[j - 1], -snap.q[j - 1]);
        for &c in tree.children(j) {
            let (ps, qs) = state.send[c - 1].ok_or(PowerFlowError::MissingChildFlow {
                branch: j,
                child: c,
            })?;
            pr += ps;
            qr += qs;
        }
        state.recv[j - 1] = Some((pr, qr));
    }
    Ok(())
}

/// Sending-end flow of a single branch from its receiving-end flow and impedance.
pub fn sending_flow(r: f64, x: f64, p: f64, q: f64, v: f64) -> Option<(f64, f64)> {
    if !(v > MIN_VOLTAGE) {
        return None;
    }
    let s = (p * p + q * q) / v;
    Some((p + r * s, q + x * s))
}

/// `P̄_j = P_j + r_j (P_j² + Q_j²) / v_j` (and likewise for `Q̄`) for every bus
/// in layer `d`; `impedance(j)` supplies the (estimated) `(r_j, x_j)`.
pub fn update_sending_flows(
    tree: &Tree,
    d: usize,
    snap: &Snapshot,
    impedance: impl Fn(usize) -> (f64, f64),
    state: &mut FlowState,
) -> Result<(), PowerFlowError> {
    for &j in tree.layer(d) {
        let (pr, qr) = state.recv[j - 1].ok_or(PowerFlowError::MissingChildFlow {
            branch: tree.parent(j),
            child: j,
        })?;
        let (r, x) = impedance(j);
        let sent =
            sending_flow(r, x, pr, qr, snap.v[j - 1]).ok_or(PowerFlowError::ZeroVoltage { bus: j })?;
        state.send[j - 1] = Some(sent);
    }
    Ok(())
}

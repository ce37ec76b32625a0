//! File formats: network and library JSON, sample CSVs, stage outputs.
//!
//! Floats are written in their shortest round-trip form, so every artifact
//! reads back bit-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::impedance::{BranchEstimate, Confidence, Method, SweepResult};
use crate::network::{BaseValues, Branch, Bus, ConductorLibrary, NetworkError, RadialNetwork};
use crate::powerflow::{PowerFlowError, SampleSet, Snapshot};
use crate::topology::{AdjacencyEstimate, LaplacianEstimate, RowDiagnostics};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Samples(#[from] PowerFlowError),
}

impl IoError {
    fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        IoError::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn from_json<T: DeserializeOwned>(text: &str, context: &str) -> Result<T, IoError> {
    serde_json::from_str(text).map_err(|e| IoError::parse(context, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkFile {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<BaseValues>,
}

fn unknown_keys(value: &Value, known: &[&str], at: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = value {
        for key in map.keys().filter(|k| !known.contains(&k.as_str())) {
            out.push(format!("{at}.{key}"));
        }
    }
}

/// Parses network JSON. Unknown fields are returned (and logged) as
/// warnings; missing required fields are errors.
pub fn parse_network(text: &str) -> Result<(RadialNetwork, Vec<String>), IoError> {
    let value: Value = from_json(text, "network JSON")?;
    let mut warnings = Vec::new();
    unknown_keys(&value, &["buses", "branches", "base"], "$", &mut warnings);
    for (list, known) in [("buses", &["id", "name"][..]), ("branches", &["id", "parent", "r", "x"][..])] {
        if let Some(Value::Array(items)) = value.get(list) {
            for (i, item) in items.iter().enumerate() {
                unknown_keys(item, known, &format!("$.{list}[{i}]"), &mut warnings);
            }
        }
    }
    if let Some(base) = value.get("base") {
        unknown_keys(base, &["v_base_kV", "s_base_kVA"], "$.base", &mut warnings);
    }
    for w in &warnings {
        log::warn!("network JSON: ignoring unknown field {w}");
    }
    let file: NetworkFile = serde_json::from_value(value).map_err(|e| IoError::parse("network JSON", e))?;
    let mut net = RadialNetwork::build(file.buses, file.branches)?;
    if let Some(base) = file.base {
        net = net.with_base(base);
    }
    Ok((net, warnings))
}

pub fn network_to_json(net: &RadialNetwork) -> String {
    to_json(&NetworkFile {
        buses: net.buses().to_vec(),
        branches: net.branches().to_vec(),
        base: net.base(),
    })
}

pub fn read_network(path: &Path) -> Result<RadialNetwork, IoError> {
    parse_network(&read_text(path)?)
        .map(|(net, _)| net)
        .map_err(|e| with_path(e, path))
}

fn with_path(e: IoError, path: &Path) -> IoError {
    match e {
        IoError::Parse { context, message } => IoError::Parse {
            context: format!("{} ({context})", path.display()),
            message,
        },
        other => other,
    }
}

pub fn parse_library(text: &str) -> Result<ConductorLibrary, IoError> {
    from_json(text, "library JSON")
}

pub fn library_to_json(lib: &ConductorLibrary) -> String {
    to_json(lib)
}

pub fn read_library(path: &Path) -> Result<ConductorLibrary, IoError> {
    parse_library(&read_text(path)?).map_err(|e| with_path(e, path))
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    k: usize,
    bus: usize,
    p: f64,
    q: f64,
    v: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubRow {
    k: usize,
    v0: f64,
}

fn csv_string<T: Serialize>(headers: &[&str], rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(headers).expect("in-memory write");
    for row in rows {
        w.serialize(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

fn csv_rows<T: DeserializeOwned>(text: &str, context: &str) -> Result<Vec<T>, IoError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| IoError::parse(format!("{context} record {}", i + 1), e)))
        .collect()
}

/// `(samples.csv, sub.csv)` contents: rows `k,bus,p,q,v` and `k,v0`.
pub fn samples_to_csv(set: &SampleSet) -> (String, String) {
    let rows = set.snapshots().iter().enumerate().flat_map(|(k, s)| {
        (0..s.n()).map(move |i| SampleRow {
            k,
            bus: i + 1,
            p: s.p[i],
            q: s.q[i],
            v: s.v[i],
        })
    });
    let subs = set.snapshots().iter().enumerate().map(|(k, s)| SubRow { k, v0: s.v0 });
    (
        csv_string(&["k", "bus", "p", "q", "v"], rows),
        csv_string(&["k", "v0"], subs),
    )
}

/// Inverse of [`samples_to_csv`]. Samples are numbered `0..K` by the
/// substation file and every sample must list buses `1..=n` exactly once.
pub fn samples_from_csv(samples: &str, sub: &str) -> Result<SampleSet, IoError> {
    let rows: Vec<SampleRow> = csv_rows(samples, "samples CSV")?;
    let subs: Vec<SubRow> = csv_rows(sub, "substation CSV")?;
    let k_count = subs.len();
    let mut v0 = vec![None; k_count];
    for s in &subs {
        match v0.get_mut(s.k) {
            Some(slot @ None) => *slot = Some(s.v0),
            Some(Some(_)) => return Err(IoError::parse("substation CSV", format!("sample {} listed twice", s.k))),
            None => return Err(IoError::parse("substation CSV", format!("sample index {} out of range 0..{k_count}", s.k))),
        }
    }
    let n = rows.iter().map(|r| r.bus).max().unwrap_or(0);
    let mut snaps: Vec<Snapshot> = v0
        .iter()
        .map(|v0| Snapshot {
            p: vec![f64::NAN; n],
            q: vec![f64::NAN; n],
            v: vec![f64::NAN; n],
            v0: v0.expect("every index filled"),
        })
        .collect();
    let mut seen = BTreeSet::new();
    for r in &rows {
        if r.bus == 0 {
            return Err(IoError::parse("samples CSV", "bus ids start at 1"));
        }
        if r.k >= k_count {
            return Err(IoError::parse("samples CSV", format!("sample {} has no substation voltage", r.k)));
        }
        if !seen.insert((r.k, r.bus)) {
            return Err(IoError::parse("samples CSV", format!("sample {} bus {} listed twice", r.k, r.bus)));
        }
        let s = &mut snaps[r.k];
        s.p[r.bus - 1] = r.p;
        s.q[r.bus - 1] = r.q;
        s.v[r.bus - 1] = r.v;
    }
    if seen.len() != n * k_count {
        return Err(IoError::parse(
            "samples CSV",
            format!("expected {} rows ({k_count} samples x {n} buses), found {}", n * k_count, seen.len()),
        ));
    }
    Ok(SampleSet::new(n, snaps)?)
}

pub fn read_samples(samples: &Path, sub: &Path) -> Result<SampleSet, IoError> {
    samples_from_csv(&read_text(samples)?, &read_text(sub)?)
}

pub fn write_samples(samples: &Path, sub: &Path, set: &SampleSet) -> Result<(), IoError> {
    let (a, b) = samples_to_csv(set);
    write_text(samples, &a)?;
    write_text(sub, &b)
}

fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Stage-1 output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub root_buses: Vec<usize>,
    // NaN (written as null) when the topology was given rather than fitted
    #[serde(deserialize_with = "nan_if_null")]
    pub lambda: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub residual_norm: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub condition: f64,
    pub gamma: usize,
    pub rows: Vec<RowDiagnostics>,
}

impl TopologyFile {
    pub fn new(fit: &LaplacianEstimate, adj: &AdjacencyEstimate) -> Self {
        TopologyFile {
            n: adj.n,
            edges: adj.edges.clone(),
            root_buses: adj.root_buses.clone(),
            lambda: fit.lambda,
            residual_norm: fit.residual_norm,
            condition: fit.condition,
            gamma: adj.gamma,
            rows: adj.rows.clone(),
        }
    }

    pub fn adjacency(&self) -> AdjacencyEstimate {
        AdjacencyEstimate {
            n: self.n,
            edges: self.edges.clone(),
            root_buses: self.root_buses.clone(),
            gamma: self.gamma,
            rows: self.rows.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        from_json(text, "topology JSON")
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::parse(&read_text(path)?).map_err(|e| with_path(e, path))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceRecord {
    pub branch: usize,
    pub parent: usize,
    pub r: f64,
    pub x: f64,
    pub lambda: f64,
    /// Index into the sorted library.
    pub lambda_index: Option<usize>,
    pub objective: f64,
    pub confidence: Confidence,
}

/// Stage-2 output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceFile {
    pub method: Method,
    pub branches: Vec<ImpedanceRecord>,
}

impl ImpedanceFile {
    pub fn new(method: Method, parents: &[usize], result: &SweepResult) -> Self {
        let record = |(&j, e): (&usize, &BranchEstimate)| ImpedanceRecord {
            branch: j,
            parent: parents[j],
            r: e.r,
            x: e.x,
            lambda: e.lambda,
            lambda_index: e.z,
            objective: e.objective,
            confidence: e.confidence,
        };
        ImpedanceFile {
            method,
            branches: result.estimates.iter().map(record).collect(),
        }
    }

    pub fn impedances(&self) -> BTreeMap<usize, (f64, f64)> {
        self.branches.iter().map(|b| (b.branch, (b.r, b.x))).collect()
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        from_json(text, "impedance JSON")
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::parse(&read_text(path)?).map_err(|e| with_path(e, path))
    }
}

/// Row-normalized `Y` as a headerless CSV matrix.
pub fn heatmap_csv(fit: &LaplacianEstimate) -> String {
    let m = fit.normalized();
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        s += &row.join(",");
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const NET: &str = r#"{
        "buses": [{"id": 0, "name": "sub"}, {"id": 1}, {"id": 2, "color": "red"}],
        "branches": [{"id": 1, "parent": 0, "r": 0.004, "x": 0.008},
                     {"id": 2, "parent": 1, "r": 0.1, "x": 0.3}],
        "base": {"v_base_kV": 4.16, "s_base_kVA": 5000},
        "extra": 1
    }"#;

    #[test]
    fn network_round_trip_and_warnings() {
        let (net, warnings) = parse_network(NET).unwrap();
        assert_eq!(warnings, vec!["$.extra", "$.buses[2].color"]);
        assert_eq!(net.r(2), 0.1);
        assert_eq!(net.base().unwrap().v_base_kv, 4.16);
        let text = network_to_json(&net);
        let (again, w) = parse_network(&text).unwrap();
        assert!(w.is_empty());
        assert_eq!(network_to_json(&again), text);
    }

    #[test]
    fn network_missing_field_is_error() {
        let bad = NET.replace(r#""r": 0.1, "#, "");
        assert!(matches!(parse_network(&bad), Err(IoError::Parse { .. })));
    }

    #[test]
    fn library_json() {
        let lib = parse_library(r#"{"ratios":[0.5153,1.2840,0.8124,0.8112,0.9864,2.0655]}"#).unwrap();
        assert_eq!(lib.len(), 6);
        assert_eq!(parse_library(&library_to_json(&lib)).unwrap(), lib);
        assert!(parse_library(r#"{"ratios":[]}"#).is_err());
        assert!(parse_library(r#"{"ratios":[1.0],"x":2}"#).is_err());
    }

    #[test]
    fn samples_round_trip_bitwise() {
        let snaps = vec![
            Snapshot { p: vec![-0.1, 1.0 / 3.0], q: vec![-0.05, 1e-17], v: vec![0.99, 0.987654321], v0: 1.0 },
            Snapshot { p: vec![0.2, -0.3], q: vec![0.1, -0.7], v: vec![1.01, 0.95], v0: 1.02 },
        ];
        let set = SampleSet::new(2, snaps).unwrap();
        let (a, b) = samples_to_csv(&set);
        assert!(a.starts_with("k,bus,p,q,v\n0,1,"));
        let back = samples_from_csv(&a, &b).unwrap();
        assert_eq!(back, set);
        assert_eq!(samples_to_csv(&back), (a, b));
    }

    #[test]
    fn empty_samples_are_valid() {
        let set = samples_from_csv("k,bus,p,q,v\n", "k,v0\n").unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn incomplete_samples_rejected() {
        let sub = "k,v0\n0,1.0\n1,1.0\n";
        let rows = "k,bus,p,q,v\n0,1,0,0,1\n0,2,0,0,1\n1,1,0,0,1\n";
        assert!(samples_from_csv(rows, sub).is_err());
        let dup = "k,bus,p,q,v\n0,1,0,0,1\n0,1,0,0,1\n";
        assert!(samples_from_csv(dup, "k,v0\n0,1\n").is_err());
    }
}

//! Subcommands of the `gridtwin` binary.
//!
//! Each command reads its inputs from files (defaulting to the output
//! directory) and persists its result, so stages can be run one by one or
//! chained with `pipeline`.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use gridtwin_core::fixtures::{self, Fixture};
use gridtwin_core::impedance::{self, ImpedanceError, Method, SolverConfig, SweepOptions};
use gridtwin_core::io::{self, ImpedanceFile, IoError, TopologyFile};
use gridtwin_core::metrics::{self, EvaluationReport, MetricsError};
use gridtwin_core::network::{NetworkError, RadialNetwork};
use gridtwin_core::powerflow::{self, NoiseSpec, PowerFlowError, SampleSet, V0Profile};
use gridtwin_core::topology::{self, ClusterMode, Radius, RecoveryConfig, TopologyError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn in_stage(self, stage: &str) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{stage}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{stage}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{stage}: {m}")),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Samples(pf) => pf.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PowerFlowError> for CliError {
    fn from(e: PowerFlowError) -> Self {
        match e {
            PowerFlowError::NonConvergence { .. } | PowerFlowError::ZeroVoltage { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TopologyError> for CliError {
    fn from(e: TopologyError) -> Self {
        match e {
            TopologyError::IllConditioned(_)
            | TopologyError::SingularNormalMatrix
            | TopologyError::NoClusterFound(_)
            | TopologyError::DegenerateRow(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ImpedanceError> for CliError {
    fn from(e: ImpedanceError) -> Self {
        let inner = match &e {
            ImpedanceError::InBranch { source, .. } => source.as_ref(),
            other => other,
        };
        match inner {
            ImpedanceError::PowerFlow(pf) => CliError::from(pf.clone()).in_stage(&e.to_string()),
            ImpedanceError::AllCandidatesDegenerate => CliError::Numerical(e.to_string()),
            ImpedanceError::EmptyLibrary => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Md,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "gridtwin", version, about = "Feeder topology and impedance identification from smart-meter data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Seed for every stochastic choice.
    #[arg(long, global = true, env = "GRIDTWIN_SEED", default_value_t = 1)]
    pub seed: u64,
    /// Directory for outputs and default inputs.
    #[arg(long, global = true, env = "GRIDTWIN_OUT_DIR", default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "GRIDTWIN_THREADS")]
    pub threads: Option<usize>,
    /// Report format; inferred from the output extension when omitted.
    #[arg(long, global = true, env = "GRIDTWIN_FORMAT", value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Synthesize smart-meter samples for a feeder.
    Generate(GenerateArgs),
    /// Fit the weighted Laplacian and recover connectivity.
    IdentifyTopology(IdentifyArgs),
    /// Estimate branch impedances with the leaf-to-root sweep.
    EstimateImpedance(EstimateArgs),
    /// Compare estimates with a reference network.
    Evaluate(EvaluateArgs),
    /// Run every stage and write all intermediates.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Builtin feeder (feeder13, feeder37, feeder69) or a network JSON file.
    #[arg(long, env = "GRIDTWIN_FIXTURE", default_value = "feeder13")]
    pub fixture: String,
    /// Number of hourly samples.
    #[arg(short = 'k', long = "samples", env = "GRIDTWIN_SAMPLES", default_value_t = 200)]
    pub k: usize,
    /// Standard deviation of Gaussian noise on squared voltages.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_v: f64,
    /// Standard deviation of Gaussian noise on active injections.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_p: f64,
    /// Standard deviation of Gaussian noise on reactive injections.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_q: f64,
    /// Fraction of samples with gross voltage errors.
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
    /// Relative size of a gross voltage error.
    #[arg(long, default_value_t = 0.05)]
    pub outlier_magnitude: f64,
    /// Squared substation voltage.
    #[arg(long, default_value_t = 1.0)]
    pub v0: f64,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    /// Core-point neighbour count (default max(4, ceil(0.05 n))).
    #[arg(long)]
    pub gamma: Option<usize>,
    /// Neighbourhood radius, a number or `auto`.
    #[arg(long, default_value = "auto")]
    pub xi: String,
    /// Cluster all rows together instead of row by row.
    #[arg(long)]
    pub joint: bool,
    /// Keep every candidate edge even when they form cycles.
    #[arg(long)]
    pub keep_cycles: bool,
}

impl ClusterArgs {
    fn config(&self) -> Result<RecoveryConfig, CliError> {
        let radius = match self.xi.as_str() {
            "auto" => Radius::Auto,
            s => Radius::Fixed(
                s.parse::<f64>()
                    .ok()
                    .filter(|r| *r > 0.0)
                    .ok_or_else(|| CliError::Config(format!("--xi must be `auto` or a positive number, got `{s}`")))?,
            ),
        };
        if self.gamma == Some(0) {
            return Err(CliError::Config("--gamma must be positive".into()));
        }
        Ok(RecoveryConfig {
            gamma: self.gamma,
            radius,
            mode: if self.joint { ClusterMode::Joint } else { ClusterMode::PerRow },
            prune_cycles: !self.keep_cycles,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub sub: Option<PathBuf>,
    #[command(flatten)]
    pub cluster: ClusterArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the row-normalized Laplacian as a CSV matrix.
    #[arg(long)]
    pub emit_heatmap: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// lad or ls.
    #[arg(long, default_value = "lad", value_parser = parse_method)]
    pub method: Method,
    /// Upper end of the reactance search interval, p.u.
    #[arg(long, default_value_t = 1.0)]
    pub x_max: f64,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

impl SolverArgs {
    fn options(&self) -> Result<SweepOptions, CliError> {
        if !(self.x_max > 0.0) {
            return Err(CliError::Config("--x-max must be positive".into()));
        }
        Ok(SweepOptions {
            method: self.method,
            solver: SolverConfig {
                x_max: self.x_max,
                ..SolverConfig::default()
            },
            ..SweepOptions::default()
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub sub: Option<PathBuf>,
    #[arg(long)]
    pub topology: Option<PathBuf>,
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub est: Option<PathBuf>,
    #[arg(long)]
    pub topology: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cluster: ClusterArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Skip topology identification and use the true tree.
    #[arg(long)]
    pub known_topology: bool,
}

/// Everything that determines a pipeline run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub k: usize,
    pub noise: NoiseSpec,
    pub outliers: f64,
    pub outlier_magnitude: f64,
    pub v0: f64,
    pub fixture: String,
    pub method: Method,
    pub recovery: RecoveryConfig,
    pub sweep: SweepOptions,
    pub out_dir: PathBuf,
    pub identify_topology: bool,
}

impl RunConfig {
    /// Noiseless defaults for a builtin feeder.
    pub fn new(fixture: &str, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            seed: 1,
            k: 200,
            noise: NoiseSpec::none(),
            outliers: 0.0,
            outlier_magnitude: 0.05,
            v0: 1.0,
            fixture: fixture.to_string(),
            method: Method::Lad,
            recovery: RecoveryConfig::default(),
            sweep: SweepOptions::default(),
            out_dir: out_dir.into(),
            identify_topology: true,
        }
    }

    fn from_data(global: &GlobalOpts, data: &DataArgs) -> Result<Self, CliError> {
        for (flag, v) in [("--sigma-v", data.sigma_v), ("--sigma-p", data.sigma_p), ("--sigma-q", data.sigma_q)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("{flag} must be a nonnegative number")));
            }
        }
        if !(0.0..=1.0).contains(&data.outliers) {
            return Err(CliError::Config("--outliers must lie in [0, 1]".into()));
        }
        if !(data.v0 > 0.0) {
            return Err(CliError::Config("--v0 must be positive".into()));
        }
        Ok(RunConfig {
            seed: global.seed,
            k: data.k,
            noise: NoiseSpec {
                sigma_v: data.sigma_v,
                sigma_p: data.sigma_p,
                sigma_q: data.sigma_q,
            },
            outliers: data.outliers,
            outlier_magnitude: data.outlier_magnitude,
            v0: data.v0,
            fixture: data.fixture.clone(),
            out_dir: global.out_dir.clone(),
            ..RunConfig::new(&data.fixture, &global.out_dir)
        })
    }
}

/// Artifact names inside the output directory.
pub mod files {
    pub const NETWORK: &str = "network.json";
    pub const LIBRARY: &str = "library.json";
    pub const SAMPLES: &str = "samples.csv";
    pub const SUB: &str = "sub.csv";
    pub const TOPOLOGY: &str = "topology.json";
    pub const HEATMAP: &str = "heatmap.csv";
    pub const IMPEDANCES: &str = "impedances.json";
    pub const REPORT: &str = "report";
}

fn or_default(p: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| dir.join(name))
}

pub fn resolve_fixture(spec: &str) -> Result<Fixture, CliError> {
    if let Some(f) = fixtures::by_name(spec) {
        return Ok(f);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "unknown fixture `{spec}` (expected one of {} or a network JSON file)",
            fixtures::FIXTURE_NAMES.join(", ")
        )));
    }
    let net = io::read_network(path)?;
    let name = path.file_stem().map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
    Ok(fixtures::custom(name, net))
}

pub struct Generated {
    pub fixture: Fixture,
    pub samples: SampleSet,
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Generated, CliError> {
    let fixture = resolve_fixture(&cfg.fixture)?;
    let profiles = fixtures::synthesize_profiles(&fixture, cfg.k, cfg.seed, &fixture.load_model);
    let data = powerflow::generate_samples(&fixture.network, &profiles, &cfg.noise, &V0Profile::Constant(cfg.v0), cfg.seed)?;
    let mut samples = data.samples;
    if cfg.outliers > 0.0 {
        let (corrupted, hit) = powerflow::corrupt_voltages(&samples, cfg.outliers, cfg.outlier_magnitude, cfg.seed)?;
        log::info!("{} of {} samples carry gross voltage errors", hit.len(), corrupted.len());
        samples = corrupted;
    }
    let dir = &cfg.out_dir;
    io::write_samples(&dir.join(files::SAMPLES), &dir.join(files::SUB), &samples)?;
    io::write_text(&dir.join(files::NETWORK), &io::network_to_json(&fixture.network))?;
    io::write_text(&dir.join(files::LIBRARY), &io::library_to_json(&fixture.library))?;
    Ok(Generated { fixture, samples })
}

pub fn identify(samples: &SampleSet, cfg: &RecoveryConfig) -> Result<TopologyFile, CliError> {
    let fit = topology::fit_laplacian(samples)?;
    let adj = topology::recover_topology(&fit, cfg)?;
    Ok(TopologyFile::new(&fit, &adj))
}

pub fn cmd_identify_topology(global: &GlobalOpts, args: &IdentifyArgs) -> Result<TopologyFile, CliError> {
    let dir = &global.out_dir;
    let cfg = args.cluster.config()?;
    let samples = io::read_samples(&or_default(&args.samples, dir, files::SAMPLES), &or_default(&args.sub, dir, files::SUB))?;
    let fit = topology::fit_laplacian(&samples)?;
    let adj = topology::recover_topology(&fit, &cfg)?;
    let out = TopologyFile::new(&fit, &adj);
    io::write_text(&or_default(&args.out, dir, files::TOPOLOGY), &out.to_json())?;
    if let Some(path) = &args.emit_heatmap {
        io::write_text(path, &io::heatmap_csv(&fit))?;
    }
    Ok(out)
}

pub fn estimate(
    topo: &TopologyFile,
    samples: &SampleSet,
    library: &gridtwin_core::network::ConductorLibrary,
    opts: &SweepOptions,
) -> Result<ImpedanceFile, CliError> {
    let tree = impedance::tree_from_adjacency(&topo.adjacency())?;
    let result = impedance::sweep(&tree, samples, library, opts)?;
    Ok(ImpedanceFile::new(opts.method, tree.parents(), &result))
}

pub fn cmd_estimate_impedance(global: &GlobalOpts, args: &EstimateArgs) -> Result<ImpedanceFile, CliError> {
    let dir = &global.out_dir;
    let opts = args.solver.options()?;
    let samples = io::read_samples(&or_default(&args.samples, dir, files::SAMPLES), &or_default(&args.sub, dir, files::SUB))?;
    let topo = TopologyFile::read(&or_default(&args.topology, dir, files::TOPOLOGY))?;
    let library = io::read_library(&or_default(&args.library, dir, files::LIBRARY))?;
    let out = estimate(&topo, &samples, &library, &opts)?;
    io::write_text(&or_default(&args.out, dir, files::IMPEDANCES), &out.to_json())?;
    Ok(out)
}

pub fn evaluate(est: &ImpedanceFile, topo: &TopologyFile, truth: &RadialNetwork) -> Result<EvaluationReport, CliError> {
    let score = metrics::compare_topology(&topo.adjacency(), truth)?;
    let errors = metrics::relative_errors(&est.impedances(), truth)?;
    Ok(EvaluationReport::new(&score, &errors))
}

fn render(report: &EvaluationReport, format: Format) -> String {
    match format {
        Format::Json => report.to_json(),
        Format::Csv => report.to_csv(),
        Format::Md => report.to_markdown(),
    }
}

fn format_for(path: &Path, explicit: Option<Format>) -> Format {
    explicit.unwrap_or(match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Format::Csv,
        Some("md") => Format::Md,
        _ => Format::Json,
    })
}

pub fn cmd_evaluate(global: &GlobalOpts, args: &EvaluateArgs) -> Result<EvaluationReport, CliError> {
    let dir = &global.out_dir;
    let est = ImpedanceFile::read(&or_default(&args.est, dir, files::IMPEDANCES))?;
    let topo = TopologyFile::read(&or_default(&args.topology, dir, files::TOPOLOGY))?;
    let truth = io::read_network(&or_default(&args.truth, dir, files::NETWORK))?;
    let report = evaluate(&est, &topo, &truth)?;
    let out = or_default(&args.out, dir, &format!("{}.json", files::REPORT));
    io::write_text(&out, &render(&report, format_for(&out, global.format)))?;
    Ok(report)
}

/// Topology file describing a known tree (no fit diagnostics).
pub fn topology_from_tree(net: &RadialNetwork) -> TopologyFile {
    let tree = net.tree();
    TopologyFile {
        n: net.n(),
        edges: tree.edges().into_iter().filter(|e| e.0 != 0).map(|(a, b)| (a.min(b), a.max(b))).collect::<std::collections::BTreeSet<_>>().into_iter().collect(),
        root_buses: tree.children(0).to_vec(),
        lambda: f64::NAN,
        residual_norm: f64::NAN,
        condition: f64::NAN,
        gamma: 0,
        rows: Vec::new(),
    }
}

/// generate, identify-topology, estimate-impedance, evaluate.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<EvaluationReport, CliError> {
    let mut runtimes = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |stage: &str, runtimes: &mut BTreeMap<String, f64>| {
        runtimes.insert(stage.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };
    let dir = &cfg.out_dir;

    let generated = cmd_generate(cfg).map_err(|e| e.in_stage("generate"))?;
    lap("generate", &mut runtimes);

    let topo = if cfg.identify_topology {
        let fit = topology::fit_laplacian(&generated.samples).map_err(|e| CliError::from(e).in_stage("identify-topology"))?;
        let adj = topology::recover_topology(&fit, &cfg.recovery).map_err(|e| CliError::from(e).in_stage("identify-topology"))?;
        io::write_text(&dir.join(files::HEATMAP), &io::heatmap_csv(&fit))?;
        TopologyFile::new(&fit, &adj)
    } else {
        topology_from_tree(&generated.fixture.network)
    };
    io::write_text(&dir.join(files::TOPOLOGY), &topo.to_json())?;
    lap("identify-topology", &mut runtimes);

    let opts = SweepOptions {
        method: cfg.method,
        ..cfg.sweep.clone()
    };
    let est = estimate(&topo, &generated.samples, &generated.fixture.library, &opts).map_err(|e| e.in_stage("estimate-impedance"))?;
    io::write_text(&dir.join(files::IMPEDANCES), &est.to_json())?;
    lap("estimate-impedance", &mut runtimes);

    let mut report = evaluate(&est, &topo, &generated.fixture.network).map_err(|e| e.in_stage("evaluate"))?;
    lap("evaluate", &mut runtimes);
    report.runtimes = runtimes;
    for format in [Format::Json, Format::Md, Format::Csv] {
        let ext = match format {
            Format::Json => "json",
            Format::Md => "md",
            Format::Csv => "csv",
        };
        io::write_text(&dir.join(format!("{}.{ext}", files::REPORT)), &render(&report, format))?;
    }
    Ok(report)
}

fn summary(report: &EvaluationReport) -> String {
    format!(
        "edge precision {:.4}, recall {:.4}; max relative error r {:.3e} %, x {:.3e} %",
        report.edge_precision, report.edge_recall, report.max_rel_err_r, report.max_rel_err_x
    )
}

/// Runs a parsed command line and returns the text to print.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let work = || -> Result<String, CliError> {
        let g = &cli.global;
        match &cli.command {
            Command::Generate(a) => {
                let cfg = RunConfig::from_data(g, &a.data)?;
                let out = cmd_generate(&cfg)?;
                Ok(format!(
                    "wrote {} samples for {} buses to {}",
                    out.samples.len(),
                    out.samples.n(),
                    g.out_dir.display()
                ))
            }
            Command::IdentifyTopology(a) => {
                let t = cmd_identify_topology(g, a)?;
                Ok(format!(
                    "{} edges, substation buses {:?}, lambda {:.4}, condition {:.3e}",
                    t.edges.len(),
                    t.root_buses,
                    t.lambda,
                    t.condition
                ))
            }
            Command::EstimateImpedance(a) => {
                let f = cmd_estimate_impedance(g, a)?;
                Ok(format!("estimated {} branches", f.branches.len()))
            }
            Command::Evaluate(a) => Ok(summary(&cmd_evaluate(g, a)?)),
            Command::Pipeline(a) => {
                let mut cfg = RunConfig::from_data(g, &a.data)?;
                cfg.recovery = a.cluster.config()?;
                cfg.sweep = a.solver.options()?;
                cfg.method = a.solver.method;
                cfg.identify_topology = !a.known_topology;
                Ok(summary(&cmd_pipeline(&cfg)?))
            }
        }
    };
    match cli.global.threads {
        Some(0) => Err(CliError::Config("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(work),
        None => work(),
    }
}

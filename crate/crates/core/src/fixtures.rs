//! Builtin feeders and seeded load-profile synthesis.
//!
//! The three feeders reproduce the topologies of the balanced IEEE 13-bus
//! (reduced to 11 buses), 37-bus and 69-bus test systems together with their
//! R/X ratio libraries. Per-branch impedances and nominal loads are fixture
//! data chosen for this crate; they are not taken from the IEEE datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::network::{Branch, Bus, ConductorLibrary, RadialNetwork};
use crate::powerflow::{solve_linearized, LoadProfiles};

/// Nominal active demand (positive, p.u. before scaling) and power factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusLoad {
    pub demand: f64,
    pub power_factor: f64,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub network: RadialNetwork,
    pub library: ConductorLibrary,
    /// Indexed `bus - 1`.
    pub loads: Vec<BusLoad>,
    /// Profile model used when none is given explicitly.
    pub load_model: LoadModel,
}

pub const FIXTURE_NAMES: [&str; 3] = ["feeder13", "feeder37", "feeder69"];

pub fn by_name(name: &str) -> Option<Fixture> {
    match name {
        "feeder13" => Some(feeder13()),
        "feeder37" => Some(feeder37()),
        "feeder69" => Some(feeder69()),
        _ => None,
    }
}

pub const LIBRARY_13: [f64; 6] = [0.5153, 1.2840, 0.8124, 0.8112, 0.9864, 2.0655];
pub const LIBRARY_37: [f64; 4] = [1.4536, 1.6222, 2.7482, 1.9691];
pub const LIBRARY_69: [f64; 9] = [0.4, 0.8, 0.9, 2.0, 2.9, 3.0, 3.1, 3.3, 3.4];

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn frac(x: f64) -> f64 {
    x - x.floor()
}

struct Line {
    bus: &'static str,
    parent: &'static str,
    x: f64,
    ratio: f64,
    demand: f64,
    power_factor: f64,
}

fn assemble(
    name: &'static str,
    root: &'static str,
    lines: &[Line],
    library: &[f64],
) -> Fixture {
    let mut names = vec![root];
    names.extend(lines.iter().map(|l| l.bus));
    let id = |s: &str| names.iter().position(|n| *n == s).expect("known bus name");
    let buses = names
        .iter()
        .enumerate()
        .map(|(i, n)| Bus::named(i, *n))
        .collect();
    let branches = lines
        .iter()
        .map(|l| Branch::new(id(l.bus), id(l.parent), l.ratio * l.x, l.x))
        .collect();
    let network = RadialNetwork::build(buses, branches).expect("fixture is a valid tree");
    let mut loads = vec![
        BusLoad {
            demand: 0.0,
            power_factor: 1.0
        };
        lines.len()
    ];
    for l in lines {
        loads[id(l.bus) - 1] = BusLoad {
            demand: l.demand,
            power_factor: l.power_factor,
        };
    }
    Fixture {
        name: name.to_string(),
        network,
        library: ConductorLibrary::new(library.to_vec()).expect("valid library"),
        loads,
        load_model: LoadModel::default(),
    }
}

/// Generated branch data for the larger feeders: reactances spread over
/// `[x_lo, x_hi]` by a golden-ratio sequence, demands over `[0.5, 1.5]`.
fn generated_lines(
    edges: &[(&'static str, &'static str)],
    ratio_of: impl Fn(usize) -> f64,
    x_lo: f64,
    x_hi: f64,
) -> Vec<Line> {
    edges
        .iter()
        .enumerate()
        .map(|(i, &(parent, bus))| {
            let j = (i + 1) as f64;
            Line {
                bus,
                parent,
                x: x_lo + (x_hi - x_lo) * frac(j * GOLDEN),
                ratio: ratio_of(i),
                demand: 0.5 + frac(j * 0.754_877_666_246_692_7),
                power_factor: 0.85 + 0.1 * frac(j * 0.569_840_290_998_053_2),
            }
        })
        .collect()
}

/// IEEE 13-bus topology without the dummy buses 634 and 692 (11 buses, depth 4).
pub fn feeder13() -> Fixture {
    let l = |bus, parent, x, ratio, demand, power_factor| Line {
        bus,
        parent,
        x,
        ratio,
        demand,
        power_factor,
    };
    let lines = [
        l("632", "650", 0.0120, 0.5153, 0.20, 0.90),
        l("633", "632", 0.0080, 0.8112, 0.40, 0.85),
        l("645", "632", 0.0090, 1.2840, 0.17, 0.83),
        l("671", "632", 0.0150, 0.5153, 1.15, 0.87),
        l("646", "645", 0.0060, 1.2840, 0.23, 0.87),
        l("675", "671", 0.0070, 2.0655, 0.84, 0.90),
        l("684", "671", 0.0050, 0.9864, 0.10, 0.90),
        l("680", "671", 0.0085, 0.5153, 0.10, 0.92),
        l("611", "684", 0.0055, 0.9864, 0.17, 0.88),
        l("652", "684", 0.0065, 0.8124, 0.13, 0.93),
    ];
    // spot loads hold their power factor
    Fixture {
        load_model: LoadModel {
            pf_jitter: 0.0,
            ..LoadModel::default()
        },
        ..assemble("feeder13", "650", &lines, &LIBRARY_13)
    }
}

const EDGES_37: [(&str, &str); 36] = [
    ("799", "701"),
    ("701", "702"),
    ("702", "705"),
    ("702", "713"),
    ("702", "703"),
    ("705", "742"),
    ("705", "712"),
    ("713", "704"),
    ("703", "727"),
    ("703", "730"),
    ("704", "714"),
    ("704", "720"),
    ("727", "744"),
    ("730", "709"),
    ("714", "718"),
    ("720", "707"),
    ("720", "706"),
    ("744", "728"),
    ("744", "729"),
    ("709", "731"),
    ("709", "708"),
    ("709", "775"),
    ("707", "724"),
    ("707", "722"),
    ("706", "725"),
    ("708", "733"),
    ("708", "732"),
    ("733", "734"),
    ("734", "737"),
    ("734", "710"),
    ("737", "738"),
    ("710", "735"),
    ("710", "736"),
    ("738", "711"),
    ("711", "741"),
    ("711", "740"),
];

/// IEEE 37-bus topology (36 branches).
pub fn feeder37() -> Fixture {
    let lines = generated_lines(&EDGES_37, |i| LIBRARY_37[(i * 3) % LIBRARY_37.len()], 0.002, 0.008);
    assemble("feeder37", "799", &lines, &LIBRARY_37)
}

const NAMES_69: [&str; 69] = [
    "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12", "13", "14", "15", "16", "17",
    "18", "19", "20", "21", "22", "23", "24", "25", "26", "27", "28", "29", "30", "31", "32", "33",
    "34", "35", "36", "37", "38", "39", "40", "41", "42", "43", "44", "45", "46", "47", "48", "49",
    "50", "51", "52", "53", "54", "55", "56", "57", "58", "59", "60", "61", "62", "63", "64", "65",
    "66", "67", "68", "69",
];

/// `(parent, child)` bus numbers of the 69-bus feeder.
fn edges_69() -> Vec<(usize, usize)> {
    let mut e = Vec::with_capacity(68);
    let chain = |e: &mut Vec<(usize, usize)>, from: usize, first: usize, last: usize| {
        e.push((from, first));
        for b in first..last {
            e.push((b, b + 1));
        }
    };
    chain(&mut e, 1, 2, 27);
    chain(&mut e, 3, 28, 35);
    chain(&mut e, 3, 36, 46);
    chain(&mut e, 4, 47, 50);
    chain(&mut e, 8, 51, 52);
    chain(&mut e, 9, 53, 65);
    chain(&mut e, 11, 66, 67);
    chain(&mut e, 12, 68, 69);
    e
}

/// The 69-bus radial feeder (68 branches, main trunk of depth 26).
pub fn feeder69() -> Fixture {
    let edges: Vec<(&'static str, &'static str)> = edges_69()
        .into_iter()
        .map(|(a, b)| (NAMES_69[a - 1], NAMES_69[b - 1]))
        .collect();
    // lines use the upper cluster of the library so the ratio stays near-homogeneous
    let lines = generated_lines(&edges, |i| LIBRARY_69[4 + (i * 3) % 5], 0.0005, 0.004);
    assemble("feeder69", "1", &lines, &LIBRARY_69)
}

/// Fixture around an arbitrary network: equal nominal loads at power factor
/// 0.9 and a library made of the network's own ratios.
pub fn custom(name: impl Into<String>, network: RadialNetwork) -> Fixture {
    let library = ConductorLibrary::new(network.ratios()).expect("network ratios are positive");
    let loads = vec![
        BusLoad {
            demand: 1.0,
            power_factor: 0.9,
        };
        network.n()
    ];
    Fixture {
        name: name.into(),
        network,
        library,
        loads,
        load_model: LoadModel::default(),
    }
}

/// Parameters of the synthetic load model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadModel {
    /// Target `|V|` drop at the most remote bus under nominal demand.
    pub nominal_drop: f64,
    /// Log-normal sigma of the per-sample demand multiplier.
    pub spread: f64,
    /// Standard deviation of the per-sample power-factor jitter.
    pub pf_jitter: f64,
    /// Maximum per-bus shift of the daily shape, in hours.
    pub phase_hours: f64,
}

impl Default for LoadModel {
    fn default() -> Self {
        LoadModel {
            nominal_drop: 0.04,
            spread: 0.25,
            pf_jitter: 0.01,
            phase_hours: 4.0,
        }
    }
}

/// Demand scale that puts the nominal LinDistFlow drop at `model.nominal_drop`.
pub fn demand_scale(fixture: &Fixture, model: &LoadModel) -> f64 {
    let p: Vec<f64> = fixture.loads.iter().map(|l| -l.demand).collect();
    let q: Vec<f64> = fixture
        .loads
        .iter()
        .map(|l| -l.demand * l.power_factor.acos().tan())
        .collect();
    let snap = solve_linearized(&fixture.network, &p, &q, 1.0).expect("fixture dimensions");
    let worst = snap.v.iter().copied().fold(1.0, f64::min);
    let target = (1.0 - model.nominal_drop).powi(2);
    (1.0 - target) / (1.0 - worst)
}

fn daily_shape(hour: f64) -> f64 {
    0.65 + 0.35 * (std::f64::consts::TAU * hour / 24.0 - std::f64::consts::FRAC_PI_2).sin()
}

/// Hourly profiles: daily shape (phase-shifted per bus) times a log-normal
/// multiplier, with a jittered power factor. Fully determined by `seed`.
pub fn synthesize_profiles(fixture: &Fixture, k: usize, seed: u64, model: &LoadModel) -> LoadProfiles {
    let n = fixture.network.n();
    let scale = demand_scale(fixture, model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * model.phase_hours).collect();
    let mult = LogNormal::new(0.0, model.spread).expect("valid spread");
    let jitter = Normal::new(0.0, model.pf_jitter).expect("valid jitter");
    let mut profiles = LoadProfiles {
        p: Vec::with_capacity(k),
        q: Vec::with_capacity(k),
    };
    for hour in 0..k {
        let mut p = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        for (i, load) in fixture.loads.iter().enumerate() {
            let demand = scale * load.demand * daily_shape(hour as f64 + phases[i]) * mult.sample(&mut rng);
            let pf = (load.power_factor + jitter.sample(&mut rng)).clamp(0.7, 0.995);
            p.push(-demand);
            q.push(-demand * pf.acos().tan());
        }
        profiles.p.push(p);
        profiles.q.push(q);
    }
    profiles
}

/// Random recursive tree: bus `j` hangs off a uniformly chosen bus in `0..j`.
pub fn random_tree<R: Rng>(
    rng: &mut R,
    n: usize,
    x_range: (f64, f64),
    mut ratio: impl FnMut(&mut R) -> f64,
) -> RadialNetwork {
    let buses = (0..=n).map(Bus::new).collect();
    let branches = (1..=n)
        .map(|j| {
            let parent = rng.random_range(0..j);
            let x = rng.random_range(x_range.0..x_range.1);
            let l = ratio(rng);
            Branch::new(j, parent, l * x, x)
        })
        .collect();
    RadialNetwork::build(buses, branches).expect("random recursive tree is valid")
}

/// Independent uniform demands in `[0.2, 1] * scale` with reactive share in `[0.2, 0.6]`.
pub fn random_profiles<R: Rng>(rng: &mut R, n: usize, k: usize, scale: f64) -> LoadProfiles {
    let mut profiles = LoadProfiles::default();
    for _ in 0..k {
        let p: Vec<f64> = (0..n).map(|_| -scale * rng.random_range(0.2..1.0)).collect();
        let q = p.iter().map(|pi| pi * rng.random_range(0.2..0.6)).collect();
        profiles.p.push(p);
        profiles.q.push(q);
    }
    profiles
}

use std::time::Instant;

use gridtwin_core::fixtures::{by_name, random_profiles, random_tree, synthesize_profiles, FIXTURE_NAMES};
use gridtwin_core::impedance::*;
use gridtwin_core::network::{Branch, Bus, ConductorLibrary, RadialNetwork};
use gridtwin_core::powerflow::{corrupt_voltages, generate_samples, NoiseSpec, SampleSet, V0Profile};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Squared-voltage drop of the branch equation, written out independently.
fn drop(r: f64, x: f64, p: f64, q: f64, v: f64) -> f64 {
    2.0 * (r * p + x * q) + (r * r + x * x) * (p * p + q * q) / v
}

fn residual(x: f64, lambda: f64, s: &BranchSample) -> f64 {
    s.dv - drop(lambda * x, x, s.p, s.q, s.v)
}

struct Instance {
    input: BranchRegressionInput,
    library: ConductorLibrary,
}

/// One branch with a random library, `k` samples and mixed noise levels.
fn random_instance(rng: &mut ChaCha8Rng, k: usize) -> Instance {
    let size = rng.random_range(1..=6);
    let ratios: Vec<f64> = (0..size).map(|_| rng.random_range(0.3..3.5)).collect();
    let lambda = ratios[rng.random_range(0..size)];
    let x = rng.random_range(0.002..0.03);
    let noise = [0.0, 1e-6, 1e-4][rng.random_range(0..3)];
    let samples = (0..k)
        .map(|_| {
            let p = rng.random_range(0.05..1.0);
            let q = p * rng.random_range(-0.2..0.6);
            let v = rng.random_range(0.9..1.0);
            BranchSample {
                dv: drop(lambda * x, x, p, q, v) + noise * rng.random_range(-1.0..1.0),
                p,
                q,
                v,
            }
        })
        .collect();
    Instance {
        input: BranchRegressionInput::new(samples).unwrap(),
        library: ConductorLibrary::new(ratios).unwrap(),
    }
}

fn ls(input: &BranchRegressionInput, lambda: f64, x: f64) -> f64 {
    input.samples().iter().map(|s| residual(x, lambda, s).powi(2)).sum()
}

fn lad(input: &BranchRegressionInput, lambda: f64, x: f64) -> f64 {
    input.samples().iter().map(|s| residual(x, lambda, s).abs()).sum()
}

#[test]
fn enumeration_beats_every_grid_point() {
    let cfg = SolverConfig {
        x_max: 0.05,
        ..SolverConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut violations = 0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng, 50);
        let est_ls = solve_branch_ls(&inst.input, &inst.library, &cfg).unwrap();
        let est_lad = solve_branch_lad(&inst.input, &inst.library, &cfg).unwrap();
        for &lambda in inst.library.ratios() {
            for g in 0..=10_000 {
                let x = cfg.x_max * g as f64 / 10_000.0;
                let (gl, ga) = (ls(&inst.input, lambda, x), lad(&inst.input, lambda, x));
                if est_ls.objective > gl * (1.0 + 1e-12) {
                    violations += 1;
                }
                if est_lad.objective > ga * (1.0 + 1e-12) {
                    violations += 1;
                }
            }
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn least_squares_agrees_with_fine_grid() {
    let cfg = SolverConfig {
        x_max: 0.05,
        ..SolverConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let inst = random_instance(&mut rng, 50);
        let est = solve_branch_ls(&inst.input, &inst.library, &cfg).unwrap();
        // quartic coefficients of sum (c0 + c1 x + c2 x^2)^2 for the chosen ratio
        let mut g = [0.0; 5];
        for s in inst.input.samples() {
            let c = [s.dv, -2.0 * (est.lambda * s.p + s.q), -(1.0 + est.lambda.powi(2)) * (s.p * s.p + s.q * s.q) / s.v];
            for a in 0..3 {
                for b in 0..3 {
                    g[a + b] += c[a] * c[b];
                }
            }
        }
        let h = cfg.x_max / 1e6;
        let (mut best_x, mut best) = (0.0, f64::INFINITY);
        for i in 0..=1_000_000 {
            let x = i as f64 * h;
            let val = (((g[4] * x + g[3]) * x + g[2]) * x + g[1]) * x + g[0];
            if val < best {
                best = val;
                best_x = x;
            }
        }
        assert!((est.x - best_x).abs() <= h, "x {} vs grid {}", est.x, best_x);
    }
}

#[test]
fn single_sample_takes_smallest_root() {
    let s = BranchSample {
        dv: drop(0.02, 0.01, 0.3, 0.1, 0.98),
        p: 0.3,
        q: 0.1,
        v: 0.98,
    };
    let lib = ConductorLibrary::new(vec![2.0]).unwrap();
    let input = BranchRegressionInput::new(vec![s]).unwrap();
    let est = solve_branch_lad(&input, &lib, &SolverConfig::default()).unwrap();
    assert_eq!(est.confidence, Confidence::Underdetermined);
    assert!((est.x - 0.01).abs() <= 1e-12);
    assert!(est.objective <= 1e-15);
}

#[test]
fn hand_evaluated_mismatch_vanishes() {
    let s = BranchSample {
        dv: 2.0 * (0.01 * 0.1) + 2.0 * 0.01f64.powi(2) * 0.01,
        p: 0.1,
        q: 0.0,
        v: 1.0,
    };
    assert!(mismatch(0.01, 1.0, &s).abs() <= 1e-15);
    assert_eq!(mismatch(0.0, 1.0, &s), s.dv);
}

fn fixture_data(name: &str, k: usize, seed: u64) -> (gridtwin_core::fixtures::Fixture, SampleSet) {
    let f = by_name(name).unwrap();
    let prof = synthesize_profiles(&f, k, seed, &f.load_model);
    let data = generate_samples(&f.network, &prof, &NoiseSpec::none(), &V0Profile::Constant(1.0), seed).unwrap();
    (f, data.samples)
}

fn max_rel_err(net: &RadialNetwork, res: &SweepResult) -> f64 {
    res.estimates
        .iter()
        .map(|(&j, e)| (((e.r - net.r(j)) / net.r(j)).abs()).max(((e.x - net.x(j)) / net.x(j)).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn noiseless_data_identifies_every_fixture() {
    for name in FIXTURE_NAMES {
        let (f, samples) = fixture_data(name, 200, 6);
        let truth: Vec<(usize, usize)> = f.network.tree().edges();
        let tree = orient_tree(f.network.n(), &truth).unwrap();
        assert_eq!(&tree, f.network.tree());
        for method in [Method::Lad, Method::Ls] {
            let res = sweep(&tree, &samples, &f.library, &SweepOptions::with_method(method)).unwrap();
            assert_eq!(res.estimates.len(), f.network.n());
            assert!(max_rel_err(&f.network, &res) <= 1e-6, "{name} {method:?}");
            for e in res.estimates.values() {
                assert_eq!(e.r, e.lambda * e.x);
                assert_eq!(e.lambda, f.library.get(e.z.unwrap()));
                assert_eq!(e.confidence, Confidence::Normal);
            }
            let mut order = res.layer_order.clone();
            order.sort_unstable_by(|a, b| b.cmp(a));
            order.dedup();
            assert_eq!(order, res.layer_order);
        }
    }
}

#[test]
fn outliers_hurt_least_squares_more() {
    let (f, clean) = fixture_data("feeder13", 200, 12);
    let tree = f.network.tree();
    let (mut lad_errs, mut ls_errs) = (Vec::new(), Vec::new());
    for trial in 0..50u64 {
        let fraction = 0.1 + 0.2 * (trial % 3) as f64 / 2.0;
        let (dirty, hit) = corrupt_voltages(&clean, fraction, 0.05, 1000 + trial).unwrap();
        assert!(!hit.is_empty());
        let a = sweep(tree, &dirty, &f.library, &SweepOptions::with_method(Method::Lad)).unwrap();
        let b = sweep(tree, &dirty, &f.library, &SweepOptions::with_method(Method::Ls)).unwrap();
        lad_errs.push(max_rel_err(&f.network, &a));
        ls_errs.push(max_rel_err(&f.network, &b));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(&mut lad_errs) <= median(&mut ls_errs));
}

#[test]
fn lad_survives_thirty_percent_gross_errors() {
    let (f, clean) = fixture_data("feeder13", 200, 12);
    let (dirty, hit) = corrupt_voltages(&clean, 0.3, 0.05, 77).unwrap();
    assert!(hit.len() > 40);
    let tree = f.network.tree();
    let lad = sweep(tree, &dirty, &f.library, &SweepOptions::with_method(Method::Lad)).unwrap();
    let ls = sweep(tree, &dirty, &f.library, &SweepOptions::with_method(Method::Ls)).unwrap();
    let (a, b) = (max_rel_err(&f.network, &lad), max_rel_err(&f.network, &ls));
    assert!(a <= 0.01, "LAD {a}");
    assert!(b > a, "LS {b} vs LAD {a}");
}

#[test]
fn linearized_mismatch_is_worse() {
    let (f, samples) = fixture_data("feeder13", 200, 7);
    let tree = f.network.tree();
    let run = |m| max_rel_err(&f.network, &sweep(tree, &samples, &f.library, &SweepOptions::with_method(m)).unwrap());
    let (exact, linear) = (run(Method::Ls), run(Method::LinearizedLs));
    assert!(linear > exact, "linearized {linear} vs {exact}");
    let free = sweep(tree, &samples, &f.library, &SweepOptions::with_method(Method::LinearizedFree)).unwrap();
    let worst = free
        .estimates
        .iter()
        .map(|(&j, e)| ((e.r - f.network.r(j)) / f.network.r(j)).abs().max(((e.x - f.network.x(j)) / f.network.x(j)).abs()))
        .fold(0.0, f64::max);
    assert!(worst > 0.2, "free linear fit worst {worst}");
}

#[test]
fn deep_error_barely_moves_upstream_estimates() {
    for name in FIXTURE_NAMES {
        let (f, samples) = fixture_data(name, 200, 7);
        let tree = f.network.tree();
        let base = sweep(tree, &samples, &f.library, &SweepOptions::default()).unwrap();
        let deep = tree.layer(tree.max_depth())[0];
        let mut opts = SweepOptions::default();
        opts.overrides.insert(deep, (1.3 * f.network.r(deep), 1.3 * f.network.x(deep)));
        let forced = sweep(tree, &samples, &f.library, &opts).unwrap();
        assert_eq!(forced.estimates[&deep].confidence, Confidence::Overridden);
        for &j in tree.path(deep).iter().skip(1) {
            let (a, b) = (&base.estimates[&j], &forced.estimates[&j]);
            assert!(((b.x - a.x) / a.x).abs() < 0.01, "{name} branch {j}");
            assert!(((b.r - a.r) / a.r).abs() < 0.01, "{name} branch {j}");
        }
    }
}

#[test]
fn feeder13_edges_orient_into_four_layers() {
    let f = by_name("feeder13").unwrap();
    let mut edges: Vec<(usize, usize)> = f.network.tree().edges().into_iter().map(|(a, b)| (b, a)).collect();
    edges.reverse();
    let tree = orient_tree(f.network.n(), &edges).unwrap();
    assert_eq!(tree.max_depth(), 4);
    assert_eq!(tree.parents(), f.network.tree().parents());

    let mut chord = edges.clone();
    chord.push((edges[0].0, edges[3].0));
    assert!(orient_tree(f.network.n(), &chord).is_err());
}

#[test]
fn star_sweep_is_independent_branch_solves() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lib = ConductorLibrary::new(vec![0.8, 1.5, 2.4]).unwrap();
    let branches = (1..=6)
        .map(|j| Branch::new(j, 0, lib.get(j % 3) * 0.01 * j as f64, 0.01 * j as f64))
        .collect();
    let net = RadialNetwork::build((0..=6).map(Bus::new).collect(), branches).unwrap();
    let prof = random_profiles(&mut rng, 6, 30, 0.05);
    let samples = generate_samples(&net, &prof, &NoiseSpec::none(), &V0Profile::Constant(1.0), 1)
        .unwrap()
        .samples;
    let res = sweep(net.tree(), &samples, &lib, &SweepOptions::default()).unwrap();
    assert_eq!(res.layer_order, vec![1]);
    for j in 1..=6 {
        let input = BranchRegressionInput::new(
            samples
                .snapshots()
                .iter()
                .map(|s| BranchSample {
                    dv: s.v0 - s.v[j - 1],
                    p: -s.p[j - 1],
                    q: -s.q[j - 1],
                    v: s.v[j - 1],
                })
                .collect(),
        )
        .unwrap();
        let single = solve_branch_lad(&input, &lib, &SolverConfig::default()).unwrap();
        assert_eq!(res.estimates[&j], single);
    }
}

#[test]
fn sweep_time_grows_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let lib = ConductorLibrary::new(vec![0.5, 1.0, 1.5, 2.0]).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let sizes = [50usize, 100, 200, 400];
    let mut times = Vec::new();
    for &n in &sizes {
        let net = random_tree(&mut rng, n, (0.002, 0.01), |r| [0.5, 1.0, 1.5, 2.0][r.random_range(0..4)]);
        let prof = random_profiles(&mut rng, n, 60, 0.2 / n as f64);
        let samples = generate_samples(&net, &prof, &NoiseSpec::none(), &V0Profile::Constant(1.0), 1)
            .unwrap()
            .samples;
        let best = (0..9)
            .map(|_| {
                let t = Instant::now();
                pool.install(|| sweep(net.tree(), &samples, &lib, &SweepOptions::default()).unwrap());
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min);
        times.push(best);
    }
    // least-squares line t = a + b n
    let m = sizes.len() as f64;
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let (sx, sy) = (xs.iter().sum::<f64>(), times.iter().sum::<f64>());
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&times).map(|(x, y)| x * y).sum();
    let b = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    let a = (sy - b * sx) / m;
    assert!(b > 0.0, "times {times:?}");
    // linear growth: the cost per branch at every size within 1.5x of the fitted slope
    for (x, t) in xs.iter().zip(&times) {
        let per_branch = t / x;
        assert!(per_branch <= 1.5 * b && per_branch >= b / 1.5, "times {times:?}, line {a} + {b} n");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimates_respect_the_library(seed in any::<u64>(), k in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, k);
        for method in [Method::Lad, Method::Ls, Method::LinearizedLs] {
            let est = solve_branch(&inst.input, &inst.library, method, &SolverConfig::default()).unwrap();
            prop_assert_eq!(est.r, est.lambda * est.x);
            prop_assert_eq!(est.lambda, inst.library.get(est.z.unwrap()));
            prop_assert_eq!(est.per_z_objectives.len(), inst.library.len());
            prop_assert!(est.x >= 0.0 && est.x <= 1.0);
        }
    }
}

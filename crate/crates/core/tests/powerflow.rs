use gridtwin_core::fixtures::{by_name, random_profiles, random_tree, synthesize_profiles, FIXTURE_NAMES};
use gridtwin_core::impedance::reconstruct_flows;
use gridtwin_core::network::{Branch, Bus, RadialNetwork};
use gridtwin_core::powerflow::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn single(r: f64, x: f64) -> RadialNetwork {
    RadialNetwork::build(vec![Bus::new(0), Bus::new(1)], vec![Branch::new(1, 0, r, x)]).unwrap()
}

/// Larger root of `v² - b v + c = 0`, the single-branch voltage equation.
fn single_branch_closed_form(r: f64, x: f64, p: f64, q: f64, v0: f64) -> f64 {
    let (pr, qr) = (-p, -q);
    let b = v0 - 2.0 * (r * pr + x * qr);
    let c = (r * r + x * x) * (pr * pr + qr * qr);
    (b + (b * b - 4.0 * c).sqrt()) / 2.0
}

fn fixture_data(name: &str, k: usize, seed: u64, noise: &NoiseSpec) -> (RadialNetwork, GeneratedData) {
    let f = by_name(name).unwrap();
    let prof = synthesize_profiles(&f, k, seed, &f.load_model);
    let data = generate_samples(&f.network, &prof, noise, &V0Profile::Constant(1.0), seed).unwrap();
    (f.network, data)
}

#[test]
fn fixture_samples_satisfy_branch_flow_equations() {
    for name in FIXTURE_NAMES {
        let (net, data) = fixture_data(name, 200, 3, &NoiseSpec::none());
        assert_eq!(data.samples.len(), 200);
        for (snap, flows) in data.clean.snapshots().iter().zip(&data.flows) {
            assert!(branch_flow_residual(&net, snap, flows) <= 1e-10, "{name}");
            // losses are nonnegative
            for j in 0..net.n() {
                assert!(flows.p_send[j] >= flows.p_recv[j]);
                assert!(flows.q_send[j] >= flows.q_recv[j]);
            }
        }
    }
}

#[test]
fn linearization_gap_small_at_light_load_and_grows_with_load() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let net = random_tree(&mut rng, 15, (0.005, 0.02), |_| 1.5);
        let prof = random_profiles(&mut rng, 15, 1, 0.01);
        let gap = |scale: f64| {
            let p: Vec<f64> = prof.p[0].iter().map(|v| v * scale).collect();
            let q: Vec<f64> = prof.q[0].iter().map(|v| v * scale).collect();
            let exact = solve_exact(&net, &p, &q, 1.0).unwrap().snapshot;
            let lin = solve_linearized(&net, &p, &q, 1.0).unwrap();
            exact.v.iter().zip(&lin.v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let light = gap(1.0);
        assert!(light <= 1e-4, "light-load gap {light}");
        assert!(gap(10.0) > light);
    }
}

#[test]
fn zero_injection_is_flat() {
    let f = by_name("feeder37").unwrap();
    let zeros = vec![0.0; f.network.n()];
    let sol = solve_exact(&f.network, &zeros, &zeros, 1.02).unwrap();
    assert!(sol.snapshot.v.iter().all(|&v| v == 1.02));
    assert!(sol.flows.p_send.iter().chain(&sol.flows.q_send).all(|&f| f == 0.0));
    assert_eq!(solve_linearized(&f.network, &zeros, &zeros, 1.02).unwrap().v, vec![1.02; f.network.n()]);
}

#[test]
fn receiving_voltage_decreases_with_load() {
    let net = single(0.01, 0.02);
    let mut last = 1.0;
    for step in 1..=20 {
        let load = 0.05 * step as f64;
        let sol = solve_exact(&net, &[-load], &[-0.5 * load], 1.0).unwrap();
        let v = sol.snapshot.v[0];
        assert!(v < last, "step {step}");
        let oracle = single_branch_closed_form(0.01, 0.02, -load, -0.5 * load, 1.0);
        assert!((v - oracle).abs() <= 1e-10);
        last = v;
    }
}

#[test]
fn single_branch_linearized_by_hand() {
    let v = solve_linearized(&single(0.01, 0.02), &[-0.1], &[-0.05], 1.0).unwrap().v[0];
    assert!((v - 0.996).abs() < 1e-15);
}

#[test]
fn noise_has_half_normal_deviation() {
    let sigma = 1e-4;
    let noise = NoiseSpec {
        sigma_v: sigma,
        ..NoiseSpec::none()
    };
    let (_, data) = fixture_data("feeder13", 200, 5, &noise);
    let mut sum = 0.0;
    let mut count = 0;
    for (noisy, clean) in data.samples.snapshots().iter().zip(data.clean.snapshots()) {
        for (a, b) in noisy.v.iter().zip(&clean.v) {
            sum += (a - b).abs();
            count += 1;
        }
        assert_eq!(noisy.p, clean.p);
    }
    let mean = sum / count as f64;
    let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
    assert!(mean >= 0.5 * expected && mean <= 1.5 * expected, "mean {mean}");
}

#[test]
fn zero_sigma_equals_noiseless() {
    let (_, a) = fixture_data("feeder13", 1, 9, &NoiseSpec::none());
    let (_, b) = fixture_data("feeder13", 1, 9, &NoiseSpec { sigma_v: 0.0, ..NoiseSpec::none() });
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.samples, a.clean);
}

#[test]
fn generation_ignores_thread_count() {
    let noise = NoiseSpec {
        sigma_v: 1e-5,
        sigma_p: 1e-4,
        sigma_q: 1e-4,
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fixture_data("feeder37", 50, 21, &noise).1)
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn sweep_flow_updates_reproduce_solver_flows() {
    for name in FIXTURE_NAMES {
        let (net, data) = fixture_data(name, 50, 4, &NoiseSpec::none());
        let truth: Vec<(f64, f64)> = (1..=net.n()).map(|j| (net.r(j), net.x(j))).collect();
        let flows = reconstruct_flows(net.tree(), &data.samples, &truth).unwrap();
        for (a, b) in flows.iter().zip(&data.flows) {
            for i in 0..net.n() {
                for (u, w) in [
                    (a.p_recv[i], b.p_recv[i]),
                    (a.q_recv[i], b.q_recv[i]),
                    (a.p_send[i], b.p_send[i]),
                    (a.q_send[i], b.q_send[i]),
                ] {
                    assert!((u - w).abs() <= 1e-10, "{name}");
                }
            }
        }
    }
}

#[test]
fn receiving_flow_of_two_children() {
    // 0 -> 1 -> {2, 3}
    let net = RadialNetwork::build(
        (0..=3).map(Bus::new).collect(),
        vec![Branch::new(1, 0, 0.01, 0.02), Branch::new(2, 1, 0.01, 0.02), Branch::new(3, 1, 0.01, 0.02)],
    )
    .unwrap();
    let snap = Snapshot {
        p: vec![-0.05, 0.0, 0.0],
        q: vec![0.0; 3],
        v: vec![1.0; 3],
        v0: 1.0,
    };
    let mut state = FlowState::new(3);
    state.send[1] = Some((0.1, 0.0));
    state.send[2] = Some((0.2, 0.0));
    update_receiving_flows(net.tree(), 1, &snap, &mut state).unwrap();
    assert!((state.recv[0].unwrap().0 - 0.35).abs() < 1e-15);

    let mut missing = FlowState::new(3);
    missing.send[1] = Some((0.1, 0.0));
    assert!(matches!(
        update_receiving_flows(net.tree(), 1, &snap, &mut missing),
        Err(PowerFlowError::MissingChildFlow { branch: 1, child: 3 })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_solution_matches_closed_form(
        r in 1e-3..0.05f64, x in 1e-3..0.05f64, p in -0.5..0.0f64, q in -0.3..0.1f64, v0 in 0.95..1.05f64,
    ) {
        let sol = solve_exact(&single(r, x), &[p], &[q], v0).unwrap();
        let oracle = single_branch_closed_form(r, x, p, q, v0);
        prop_assert!((sol.snapshot.v[0] - oracle).abs() <= 1e-10);
        prop_assert!(branch_flow_residual(&single(r, x), &sol.snapshot, &sol.flows) <= 1e-10);
    }

    #[test]
    fn lossless_branch_passes_flow_through(p in -1.0..1.0f64, q in -1.0..1.0f64) {
        prop_assert_eq!(sending_flow(0.0, 0.0, p, q, 1.0), Some((p, q)));
    }
}

use noarb::classify::{cev_closed_form, classify_switching_market, ArbitrageReport};
use noarb::config::ConfigFile;
use noarb::expr::{parse, Expr};
use noarb::measure::{chain_fixtures, verify_tilt_law};
use noarb::model::{market_price_of_risk, QMatrix, StateInterval, SwitchingModel, TriState};
use noarb::quad::{
    classify_boundary_with, reduced_const_u_test, Boundary, QuadConfig, ScaleIntegrand,
};
use noarb::sim::{
    euler_terminal_values, ks_two_sample, martingale_defect_direct, regression_suite, sample_chain,
    simulate_paths, DtPolicy, MCEstimate, SimConfig,
};
use noarb::Status;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn p(s: &str) -> Expr {
    parse(s).unwrap()
}

fn uniform(steps: u32) -> SimConfig {
    SimConfig {
        dt: DtPolicy::Uniform { steps },
        ..SimConfig::default()
    }
}

// ---------------------------------------------------------------------------
// expressions

#[test]
fn precedence() {
    assert_eq!(p("2+3*4").eval(0.0).unwrap(), 14.0);
    assert_eq!(p("-x^2").eval(3.0).unwrap(), -9.0);
    assert_eq!(p("2^3^2").eval(0.0).unwrap(), 512.0);
}

proptest! {
    #[test]
    fn evaluation_is_pure(a in -5.0f64..5.0, b in 0.1f64..3.0, x in 0.01f64..100.0) {
        let e = p(&format!("{a}*x^{b} + exp(-x) / (1 + abs(x - {a}))"));
        let y = e.eval(x).unwrap();
        prop_assert_eq!(y.to_bits(), e.eval(x).unwrap().to_bits());
        prop_assert_eq!(y.to_bits(), e.compile().eval(x).unwrap().to_bits());
    }

    #[test]
    fn market_price_of_risk_is_pointwise_ratio(mu in -2.0f64..2.0, s in 0.05f64..3.0, beta in 0.5f64..2.0, x in 1e-3f64..1e3) {
        let mut m = SwitchingModel::cev(&[beta]);
        m.b = vec![p(&format!("{mu}*x"))];
        m.sigma = vec![p(&format!("{s}*x^{beta}"))];
        let theta = market_price_of_risk(&m)[0].eval(x).unwrap();
        let want = (mu * x) / (s * x.powf(beta));
        prop_assert!((theta - want).abs() <= 1e-14 * want.abs().max(f64::MIN_POSITIVE));
    }
}

// ---------------------------------------------------------------------------
// boundary tests

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn statuses_do_not_depend_on_reference_point(beta in 0.3f64..2.5, x0 in 0.05f64..20.0) {
        let cfg = QuadConfig::default();
        let mk = |x0: f64| ScaleIntegrand {
            f: p("0"),
            g: p(&format!("x^{}", 2.0 * beta)),
            interval: StateInterval::new(0.0, f64::INFINITY, x0).unwrap(),
        };
        for b in [Boundary::Lower, Boundary::Upper] {
            let a = classify_boundary_with(&mk(1.0), b, &cfg).unwrap().status;
            let c = classify_boundary_with(&mk(x0), b, &cfg).unwrap().status;
            prop_assert_eq!(a, c, "beta {} x0 {} {:?}", beta, x0, b);
        }
    }
}

#[test]
fn reduced_test_matches_full_scale_integral() {
    let cfg = QuadConfig::default();
    let envelopes = [
        "1",
        "1 + x^2",
        "1 + abs(x)",
        "1 + x^4",
        "exp(min(abs(x), 300))",
        "2 + x^2 * log(2 + x^2)",
        "1 + abs(x)^1.5",
        "1 + abs(x)^0.5",
        "max(1, x^3)",
        "1 + abs(x)^2.2",
    ];
    for a in envelopes {
        let i = StateInterval::real_line();
        let reduced = reduced_const_u_test(&p(a), &i, Boundary::Upper, &cfg).unwrap();
        let full = classify_boundary_with(
            &ScaleIntegrand {
                f: p("1"),
                g: p(a),
                interval: i,
            },
            Boundary::Upper,
            &cfg,
        )
        .unwrap();
        assert_eq!(
            reduced.status, full.status,
            "ā = {a}: {} / {}",
            reduced.reason, full.reason
        );
    }
}

// ---------------------------------------------------------------------------
// classification

fn statuses(r: &ArbitrageReport) -> Vec<Status> {
    let mut v = vec![
        r.smd.status,
        r.elmm_mlmm.status,
        r.emm_mmm.status,
        r.bubble.status,
        r.z_is_martingale.status,
    ];
    v.extend(r.structure_preserving_l.as_ref().map(|s| s.status));
    v.extend(r.structure_preserving_m.as_ref().map(|s| s.status));
    v
}

#[test]
fn cev_grid_matches_closed_form() {
    let cfg = QuadConfig::default();
    let grid: Vec<f64> = (1..=10).map(|k| 0.25 * k as f64).collect();
    let mut cases: Vec<Vec<f64>> = grid.iter().map(|&a| vec![a]).collect();
    for &a in &grid {
        for &b in &grid {
            cases.push(vec![a, b]);
            for &c in &grid {
                cases.push(vec![a, b, c]);
            }
        }
    }
    for betas in cases {
        let r = classify_switching_market(&SwitchingModel::cev(&betas), &cfg).unwrap();
        r.check_consistency().unwrap();
        let c = cev_closed_form(&betas);
        assert_eq!(statuses(&r), statuses(&c), "β = {betas:?}");
    }
}

fn flip(m: &mut SwitchingModel, k: usize) {
    let a = &mut m.attestations;
    match k {
        0 => a.b_locally_bounded = TriState::Unknown,
        1 => a.c_locally_bounded = TriState::Unknown,
        2 => a.chain_recurrent = TriState::Unknown,
        3 => a.localizing_sequence = TriState::Unknown,
        k => {
            let j = k - 4;
            if j < a.es.len() {
                a.es[j] = TriState::Unknown;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weakening_attestations_only_adds_inconclusive(
        b1 in 1usize..=10, b2 in 1usize..=10, flips in proptest::collection::vec(0usize..6, 1..4),
    ) {
        let cfg = QuadConfig::default();
        let base = SwitchingModel::cev(&[0.25 * b1 as f64, 0.25 * b2 as f64]);
        let mut weak = base.clone();
        for k in flips {
            flip(&mut weak, k);
        }
        let strong = classify_switching_market(&base, &cfg).unwrap();
        let w = classify_switching_market(&weak, &cfg).unwrap();
        w.check_consistency().unwrap();
        for (s, w) in statuses(&strong).into_iter().zip(statuses(&w)) {
            prop_assert!(s == w || w == Status::Inconclusive, "{:?} became {:?}", s, w);
        }
    }
}

// ---------------------------------------------------------------------------
// simulation

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_chains_are_well_formed(a in 0.0f64..5.0, b in 0.0f64..5.0, j0 in 0usize..2, seed in any::<u64>()) {
        let q = QMatrix::two_state(a, b).unwrap();
        let c = sample_chain(&q, j0, 3.0, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(c.check_invariants().is_ok());
        let occ: f64 = c.occupation(2).iter().sum();
        prop_assert!((occ - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confidence_interval_is_mean_plus_minus_1_96_stderr(v in proptest::collection::vec(-10.0f64..10.0, 2..200)) {
        let e = MCEstimate::from_samples(&v, 0, None);
        prop_assert!((e.ci95_high - (e.mean + 1.96 * e.stderr)).abs() < 1e-12);
        prop_assert!((e.ci95_low - (e.mean - 1.96 * e.stderr)).abs() < 1e-12);
    }
}

#[test]
fn simulated_paths_respect_their_invariants() {
    let m = SwitchingModel::cev(&[1.0, 2.0]);
    for path in simulate_paths(&m, &uniform(32), 50, 3).unwrap() {
        assert_eq!(path.z_values[0], 1.0);
        assert!(path.z_values.iter().all(|&z| z >= 0.0));
        assert!(path.grid.windows(2).all(|w| w[0] < w[1]));
        path.regime.check_invariants().unwrap();
    }
}

#[test]
fn frozen_chain_matches_plain_euler() {
    let (_, ou) = regression_suite()
        .into_iter()
        .find(|(n, _)| *n == "ou_constant_kernel")
        .unwrap();
    let steps = 64;
    let switching: Vec<f64> = simulate_paths(&ou, &uniform(steps), 10_000, 11)
        .unwrap()
        .iter()
        .map(|p| *p.values.last().unwrap())
        .collect();
    let plain = euler_terminal_values(&ou, 0, steps, 24, 10_000, 12).unwrap();
    let ks = ks_two_sample(&switching, &plain);
    assert!(ks.p_value > 0.01, "KS {} p = {}", ks.statistic, ks.p_value);
}

#[test]
fn estimates_are_independent_of_worker_count() {
    let m = SwitchingModel::cev(&[1.0, 2.0]);
    let mut a = SimConfig {
        dt: DtPolicy::Adaptive {
            steps: 32,
            kappa: 0.05,
        },
        ..SimConfig::default()
    };
    a.workers = Some(1);
    let mut b = a.clone();
    b.workers = Some(3);
    let ea = martingale_defect_direct(&m, &a, 3000, 5).unwrap();
    let eb = martingale_defect_direct(&m, &b, 3000, 5).unwrap();
    assert_eq!(ea.mean.to_bits(), eb.mean.to_bits());
    assert_eq!(ea.stderr.to_bits(), eb.stderr.to_bits());
}

#[test]
fn defect_estimates_respect_the_supermartingale_bound() {
    let cfg = SimConfig {
        dt: DtPolicy::Adaptive {
            steps: 32,
            kappa: 0.05,
        },
        ..SimConfig::default()
    };
    for (name, m) in regression_suite() {
        let e = martingale_defect_direct(&m, &cfg, 5000, 17).unwrap();
        assert!(e.ci95_high <= 1.0 + 5.0 * e.stderr, "{name}: {e:?}");
    }
}

// ---------------------------------------------------------------------------
// measure changes and configs

#[test]
fn tilt_law_holds_on_chain_fixtures() {
    for (k, (q, f)) in chain_fixtures().into_iter().enumerate() {
        let r = verify_tilt_law(&q, &f, 0, 1.0, 20_000, 40 + k as u64, None).unwrap();
        assert!(r.passed, "fixture {k}: {:?}", r.failures);
    }
}

#[test]
fn shipped_configs_round_trip() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() == "malformed.toml" {
            continue;
        }
        let c = ConfigFile::load(&path).unwrap();
        let again = ConfigFile::parse(&c.to_canonical()).unwrap();
        assert_eq!(
            c.to_model().unwrap(),
            again.to_model().unwrap(),
            "{}",
            path.display()
        );
        assert_eq!(again.to_canonical(), c.to_canonical());
        n += 1;
    }
    assert!(n >= 7);
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use noarb::classify::{cev_closed_form, classify_switching_market};
use noarb::expr::parse;
use noarb::measure::{
    chain_exponential_means, chain_fixtures, tilt_qmatrix, verify_mlmm_preservation,
    verify_tilt_law, TiltVector,
};
use noarb::model::{QMatrix, RegularityAttestation, StateInterval, SwitchingModel};
use noarb::quad::{classify_single, Boundary, Convergence, QuadConfig};
use noarb::sim::{
    bessel3_inverse_oracle, duality_check, martingale_defect_direct, regression_suite,
    terminal_state_estimate, DtPolicy, SimConfig,
};
use noarb::Status;

type Criterion = (&'static str, Duration, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn status(b: bool) -> Status {
    if b {
        Status::Holds
    } else {
        Status::Fails
    }
}

fn adaptive(kappa: f64) -> SimConfig {
    SimConfig {
        dt: DtPolicy::Adaptive { steps: 64, kappa },
        ..SimConfig::default()
    }
}

// 1. CEV verdict matrix
fn cev_matrix() -> Outcome {
    let cfg = QuadConfig::default();
    let grid = [0.5, 1.0, 1.5];
    let mut cases: Vec<Vec<f64>> = grid.iter().map(|&b| vec![b]).collect();
    for &a in &grid {
        for &b in &grid {
            cases.push(vec![a, b]);
        }
    }
    let mut bad = Vec::new();
    for betas in &cases {
        let min = betas.iter().copied().fold(f64::INFINITY, f64::min);
        let max = betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let want = (
            status(min >= 1.0),
            status(betas.iter().all(|&b| b == 1.0)),
            status(max <= 1.0),
        );
        let r = match classify_switching_market(&SwitchingModel::cev(betas), &cfg) {
            Ok(r) => r,
            Err(e) => {
                bad.push(format!("{betas:?}: {e}"));
                continue;
            }
        };
        let c = cev_closed_form(betas);
        let got = (r.elmm_mlmm.status, r.emm_mmm.status, r.smd.status);
        let closed = (c.elmm_mlmm.status, c.emm_mmm.status, c.smd.status);
        if got != want || closed != want || r.bubble.status != c.bubble.status {
            bad.push(format!(
                "{betas:?}: got {got:?}, closed form {closed:?}, expected {want:?}"
            ));
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "{} of {} cases agree {}",
            cases.len() - bad.len(),
            cases.len(),
            bad.join("; ")
        ),
    )
}

// 2. power-law families
fn power_laws() -> Outcome {
    let cfg = QuadConfig::default();
    let i = StateInterval::positive();
    let mut bad = Vec::new();
    let mut undetermined = 0;
    for p in [0.5, 0.9, 0.98, 1.0, 1.02, 1.1, 2.0, 3.0] {
        let want = if p > 1.0 {
            Convergence::Convergent
        } else {
            Convergence::Divergent
        };
        let up =
            classify_single(|z: f64| Ok(z.powf(-p)), &i, Boundary::Upper, &cfg).map(|v| v.status);
        let down = classify_single(|z: f64| Ok(z.powf(p - 2.0)), &i, Boundary::Lower, &cfg)
            .map(|v| v.status);
        for (name, got) in [("∫₁^∞ z^-p", up), ("∫₀¹ z^(p-2)", down)] {
            match got {
                Ok(s) if s == want => {}
                Ok(Convergence::Undetermined) if (p - 1.0f64).abs() < 0.02 => undetermined += 1,
                other => bad.push(format!("{name} p = {p}: {other:?}")),
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "16 integrals, {undetermined} undetermined inside |p-1| < 0.02 {}",
            bad.join("; ")
        ),
    )
}

// 3. inverse Bessel defect against the exact oracle
fn inverse_bessel() -> Outcome {
    let (_, m) = regression_suite()
        .into_iter()
        .find(|(n, _)| *n == "inverse_bessel")
        .expect("suite model");
    let n = 1_000_000;
    let direct = match martingale_defect_direct(&m, &adaptive(0.0025), n, 20240601) {
        Ok(e) => e,
        Err(e) => return outcome(false, e.to_string()),
    };
    let oracle = bessel3_inverse_oracle(1.0, n, 20240602, None).expect("oracle");
    let z = direct.z_score(oracle.mean, oracle.stderr);
    let (lo, hi) = direct.ci99();
    let excludes_one = hi < 1.0;
    outcome(
        z <= 3.0 && excludes_one,
        format!(
            "direct {:.5} ± {:.5}, oracle {:.5} ± {:.5}, {z:.2} combined stderr (≤ 3), 99% CI [{lo:.5}, {hi:.5}] excludes 1: {excludes_one}",
            direct.mean, direct.stderr, oracle.mean, oracle.stderr
        ),
    )
}

// 4. martingale sanity
fn martingale_sanity() -> Outcome {
    let m = SwitchingModel::cev(&[1.0, 1.0]);
    let p = match terminal_state_estimate(&m, &adaptive(0.01), 100_000, 99) {
        Ok(e) => e,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut zero = SwitchingModel::cev(&[1.0, 1.5]);
    zero.c = Some(vec![parse("0").unwrap(); 2]);
    let z = martingale_defect_direct(&zero, &adaptive(0.01), 10_000, 98).expect("simulation");
    let contains = p.ci95_contains(m.p0);
    let exact = z.mean == 1.0 && z.stderr == 0.0;
    outcome(
        contains && exact,
        format!(
            "E[P_1] = {:.5}, 95% CI [{:.5}, {:.5}] contains 1: {contains}; c = 0 gives E[Z_1] = {} ± {}",
            p.mean, p.ci95_low, p.ci95_high, z.mean, z.stderr
        ),
    )
}

// 5. duality on the regression suite
fn duality() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (i, (name, m)) in regression_suite().into_iter().enumerate() {
        match duality_check(&m, &adaptive(0.01), 50_000, 500 + i as u64) {
            Ok(d) => {
                let z = if d.combined_stderr > 0.0 {
                    d.gap.abs() / d.combined_stderr
                } else {
                    0.0
                };
                ok &= d.agree;
                lines.push(format!(
                    "{name} {:.4} vs {:.4} ({z:.2})",
                    d.direct.mean, d.explosion.estimate.mean
                ));
            }
            Err(e) => {
                ok = false;
                lines.push(format!("{name}: {e}"));
            }
        }
    }
    outcome(
        ok,
        format!("gap within 3 combined stderr: {}", lines.join(", ")),
    )
}

// 6. Q-matrix tilt
fn q_tilt() -> Outcome {
    let q = QMatrix::new(vec![vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
    let f = TiltVector::new(vec![1.0, 3.0]).unwrap();
    let qs = tilt_qmatrix(&q, &f).unwrap();
    // q*_ij = q_ij f_j / f_i off the diagonal
    let hand = [[-3.0, 3.0], [2.0 / 3.0, -2.0 / 3.0]];
    let max_err = (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| (qs.rate(i, j) - hand[i][j]).abs())
        .fold(0.0, f64::max);
    let rows = qs.max_abs_row_sum();
    let law = verify_tilt_law(&q, &f, 0, 1.0, 100_000, 606, None).expect("chains");
    outcome(
        max_err <= 1e-12 && rows <= 1e-12 && law.passed,
        format!(
            "max |Q* - hand| = {max_err:e}, max |row sum| = {rows:e} (≤ 1e-12), tilt law passed: {} {}",
            law.passed,
            law.failures.join("; ")
        ),
    )
}

// 7. chain exponential martingale
fn chain_exponential() -> Outcome {
    let times = [0.25, 0.5, 1.0];
    let mut ok = true;
    let mut worst = 0.0f64;
    for (k, (q, f)) in chain_fixtures().into_iter().enumerate() {
        let means = chain_exponential_means(&q, &f, 0, 1.0, &times, 100_000, 700 + k as u64, None)
            .expect("chains");
        for m in &means {
            let z = m.z_score(1.0, 0.0);
            worst = worst.max(z);
            ok &= z <= 3.0;
        }
    }
    outcome(
        ok,
        format!("3 fixtures at t = T/4, T/2, T; worst |E[Z_t] - 1| = {worst:.2} stderr (≤ 3)"),
    )
}

// 8. MLMM preservation
fn mlmm() -> Outcome {
    let p = |s: &str| parse(s).unwrap();
    let mut m = SwitchingModel::new(
        StateInterval::positive(),
        QMatrix::two_state(1.0, 2.0).unwrap(),
        vec![p("0.1*x"), p("-0.2*x")],
        vec![p("0.2*x"), p("0.4*x")],
        1.0,
        1.0,
    )
    .unwrap();
    m.attestations = RegularityAttestation::all_true(2);
    let cfg = SimConfig {
        dt: DtPolicy::Uniform { steps: 64 },
        ..SimConfig::default()
    };
    let r = verify_mlmm_preservation(&m, &cfg, 100_000, 808).expect("simulation");
    let zs: Vec<String> = r
        .statistics
        .iter()
        .map(|s| format!("{} {:.2}", s.name, s.z_score))
        .collect();
    outcome(
        r.passed,
        format!("stderr distances (≤ 3): {}", zs.join(", ")),
    )
}

// 9. determinism across runs and worker counts
fn determinism() -> Outcome {
    let configs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let dir = tempfile::tempdir().expect("temp dir");
    let runs: [(&str, &str, &[&str]); 5] = [
        ("classify", "cev_bubble.toml", &[]),
        ("defect", "inverse_bessel.toml", &["--paths", "2000"]),
        (
            "tilt",
            "tilt_two_state.toml",
            &["--verify", "--paths", "5000"],
        ),
        ("simulate", "cev_martingale.toml", &["--paths", "3"]),
        ("validate", "cev_bubble.toml", &[]),
    ];
    let mut bad = Vec::new();
    for (cmd, config, extra) in runs {
        let mut reference: Option<Vec<Vec<u8>>> = None;
        for (run, workers) in ["1", "4", "8", "1"].iter().enumerate() {
            let out = dir.path().join(format!("{cmd}-{run}.out"));
            let csv = dir.path().join(format!("{cmd}-{run}.csv"));
            let o = Command::new(env!("CARGO_BIN_EXE_noarb"))
                .arg(cmd)
                .arg("--config")
                .arg(configs.join(config))
                .arg("--out")
                .arg(&out)
                .arg("--csv")
                .arg(&csv)
                .args(["--deterministic", "--workers", workers])
                .args(extra)
                .output()
                .expect("run noarb");
            let bytes = vec![
                o.stdout,
                std::fs::read(&out).unwrap_or_default(),
                std::fs::read(&csv).unwrap_or_default(),
            ];
            match &reference {
                None => reference = Some(bytes),
                Some(r) if *r != bytes => {
                    bad.push(format!("{cmd} with {workers} workers (run {run})"))
                }
                Some(_) => {}
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "5 subcommands x workers 1, 4, 8, 1: {}",
            if bad.is_empty() {
                "byte-identical".into()
            } else {
                bad.join(", ")
            }
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("CEV verdict matrix", Duration::from_secs(30), cev_matrix),
        ("power-law quadrature", Duration::from_secs(10), power_laws),
        (
            "inverse Bessel defect",
            Duration::from_secs(300),
            inverse_bessel,
        ),
        (
            "martingale sanity",
            Duration::from_secs(120),
            martingale_sanity,
        ),
        ("duality suite", Duration::from_secs(600), duality),
        ("Q-matrix tilt", Duration::from_secs(180), q_tilt),
        (
            "chain exponential martingale",
            Duration::from_secs(120),
            chain_exponential,
        ),
        ("MLMM preservation", Duration::from_secs(180), mlmm),
        ("determinism", Duration::from_secs(600), determinism),
    ];
    let only: Option<usize> = std::env::var("NOARB_CRITERION")
        .ok()
        .and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, budget, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != k + 1) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let pass = o.passed && took <= *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {} {name}: {} ({:.1}s, budget {}s) {}",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            o.detail.trim_end()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

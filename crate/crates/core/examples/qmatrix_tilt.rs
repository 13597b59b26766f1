//! Tilt a Q-matrix by a positive vector and check the new chain law by
//! reweighting with the chain exponential.

use noarb::measure::{chain_exponential_means, tilt_qmatrix, verify_tilt_law, TiltVector};
use noarb::model::QMatrix;

fn main() {
    let q = QMatrix::new(vec![vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
    let f = TiltVector::new(vec![1.0, 3.0]).unwrap();
    let q_star = tilt_qmatrix(&q, &f).unwrap();
    println!(
        "Q* = {:?}, max |row sum| = {:e}",
        q_star.rows(),
        q_star.max_abs_row_sum()
    );

    let means =
        chain_exponential_means(&q, &f, 0, 1.0, &[0.25, 0.5, 1.0], 20_000, 3, None).unwrap();
    for (t, m) in [0.25, 0.5, 1.0].iter().zip(&means) {
        println!("E[Z_{t}] = {:.4} ± {:.4}", m.mean, m.stderr);
    }

    let report = verify_tilt_law(&q, &f, 0, 1.0, 20_000, 3, None).unwrap();
    for s in &report.statistics {
        println!(
            "{:<20} {:.4} vs {:.4} (z = {:.2})",
            s.name, s.reweighted.mean, s.direct.mean, s.z_score
        );
    }
    println!(
        "passed: {} [{}]",
        report.passed,
        report.certificate.id.label()
    );
}

//! A change point modelled as a one-way two-state chain: regime 1 is left
//! at rate λ and regime 2 is absorbing. The chain is not recurrent, so
//! verdicts that need recurrence stay inconclusive until it is attested.

use noarb::classify::classify_switching_market;
use noarb::expr::parse;
use noarb::model::{QMatrix, RegularityAttestation, StateInterval, SwitchingModel, TriState};
use noarb::quad::QuadConfig;
use noarb::sim::{martingale_defect_direct, DtPolicy, SimConfig};

fn main() {
    let lambda = 2.0;
    let q = QMatrix::new(vec![vec![-lambda, lambda], vec![0.0, 0.0]]).unwrap();
    let mut m = SwitchingModel::new(
        StateInterval::positive(),
        q,
        vec![parse("0").unwrap(), parse("0").unwrap()],
        vec![parse("x").unwrap(), parse("x^2").unwrap()],
        1.0,
        1.0,
    )
    .unwrap();
    m.attestations = RegularityAttestation::all_true(2);
    m.attestations.chain_recurrent = TriState::Unknown;

    let report = classify_switching_market(&m, &QuadConfig::default()).unwrap();
    print!("{}", report.to_table());

    // the price itself: a strict local martingale once the change has happened
    m.c = Some(vec![parse("1").unwrap(), parse("x").unwrap()]);
    let cfg = SimConfig {
        dt: DtPolicy::Adaptive {
            steps: 64,
            kappa: 0.01,
        },
        ..SimConfig::default()
    };
    let e = martingale_defect_direct(&m, &cfg, 20_000, 4).unwrap();
    println!("E[P_1] = {:.4} ± {:.4}", e.mean, e.stderr);
}

//! Arbitrage classification of Markov-switching CEV markets, checked
//! against the closed-form answer.

use noarb::classify::{cev_closed_form, classify_switching_market};
use noarb::model::SwitchingModel;
use noarb::quad::QuadConfig;

fn main() {
    let cfg = QuadConfig::default();
    for betas in [[1.0, 1.5], [1.0, 1.0], [0.5, 1.0], [1.5, 2.0]] {
        let m = SwitchingModel::cev(&betas);
        let report = classify_switching_market(&m, &cfg).expect("valid model");
        let closed = cev_closed_form(&betas);
        println!("β = {betas:?}");
        print!("{}", report.to_table());
        let same = [
            (&report.elmm_mlmm, &closed.elmm_mlmm),
            (&report.smd, &closed.smd),
            (&report.emm_mmm, &closed.emm_mmm),
            (&report.bubble, &closed.bubble),
        ]
        .iter()
        .all(|(a, b)| a.status == b.status);
        println!("matches closed form: {same}\n");
    }
}

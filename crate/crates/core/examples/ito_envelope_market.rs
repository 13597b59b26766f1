//! Stochastic exponential markets described through envelopes of the
//! latent Itô coefficients.

use noarb::classify::{classify_exponential, classify_ito_market, ExponentialInput};
use noarb::expr::parse;
use noarb::model::{ItoEnvelopeModel, TriState};
use noarb::quad::QuadConfig;

fn envelope(upper: &str, lower: &str) -> ItoEnvelopeModel {
    let mut m = ItoEnvelopeModel::new(parse(upper).unwrap());
    m.lower_a = Some(parse(lower).unwrap());
    let a = &mut m.attestations;
    a.localizing_sequence = TriState::AssertedTrue;
    a.upper_envelope_bound = TriState::AssertedTrue;
    a.lower_envelope_bound = TriState::AssertedTrue;
    a.yw_one_lower_a = TriState::AssertedTrue;
    m
}

fn main() {
    let cfg = QuadConfig::default();
    for (upper, lower) in [
        ("1 + x^2", "0.5 + x^2"),
        ("1 + abs(x)", "0.5"),
        ("1 + x^4", "1 + x^4"),
    ] {
        let m = envelope(upper, lower);
        let report = classify_ito_market(&m, &cfg).expect("valid envelopes");
        println!("ā = {upper}, a̲ = {lower}");
        print!("{}", report.to_table());
        let z = classify_exponential(ExponentialInput::Ito(&m), &cfg).unwrap();
        println!(
            "Z martingale: {} [{}] {}\n",
            z.status,
            z.certificate.id.label(),
            z.reason
        );
    }
}

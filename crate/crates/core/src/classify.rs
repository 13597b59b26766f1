//! Verdicts on martingale measures, strict martingale densities and bubbles.
//!
//! Every verdict is three-valued and carries the theorem it rests on plus
//! the exact inputs (boundary tests and attestations) that were consumed.
//! A verdict is `Holds` or `Fails` only when every hypothesis of the cited
//! result is attested or numerically established.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr;
use crate::model::{
    validate, ItoEnvelopeModel, MarketModel, SwitchingModel, TriState, ValidationError,
};
use crate::quad::{
    self, feller_price_test, general_v_switching, reduced_const_u_test, Boundary, BoundaryVerdict,
    Convergence, QuadConfig, QuadError, ScaleIntegrand,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Status {
    Holds,
    Fails,
    Inconclusive,
}

impl Status {
    /// Kleene conjunction.
    pub fn and(self, o: Status) -> Status {
        match (self, o) {
            (Status::Fails, _) | (_, Status::Fails) => Status::Fails,
            (Status::Holds, Status::Holds) => Status::Holds,
            _ => Status::Inconclusive,
        }
    }

    /// Kleene disjunction.
    pub fn or(self, o: Status) -> Status {
        match (self, o) {
            (Status::Holds, _) | (_, Status::Holds) => Status::Holds,
            (Status::Fails, Status::Fails) => Status::Fails,
            _ => Status::Inconclusive,
        }
    }
}

/// Kleene negation.
impl std::ops::Not for Status {
    type Output = Status;

    fn not(self) -> Status {
        match self {
            Status::Holds => Status::Fails,
            Status::Fails => Status::Holds,
            Status::Inconclusive => Status::Inconclusive,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Holds => "Holds",
            Status::Fails => "Fails",
            Status::Inconclusive => "Inconclusive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TheoremId {
    #[serde(rename = "T2.1")]
    T2_1,
    #[serde(rename = "T2.3")]
    T2_3,
    #[serde(rename = "T2.6i")]
    T2_6i,
    #[serde(rename = "T2.6ii")]
    T2_6ii,
    #[serde(rename = "C2.8")]
    C2_8,
    #[serde(rename = "T3.2")]
    T3_2,
    #[serde(rename = "T3.4")]
    T3_4,
    #[serde(rename = "T3.6")]
    T3_6,
    #[serde(rename = "T3.7")]
    T3_7,
    #[serde(rename = "C3.8")]
    C3_8,
    #[serde(rename = "T3.9")]
    T3_9,
    #[serde(rename = "P5.4")]
    P5_4,
    #[serde(rename = "T5.2")]
    T5_2,
    #[serde(rename = "T5.3")]
    T5_3,
    #[serde(rename = "T5.5")]
    T5_5,
    #[serde(rename = "CEV")]
    Cev,
}

impl TheoremId {
    pub fn label(self) -> &'static str {
        match self {
            TheoremId::T2_1 => "T2.1",
            TheoremId::T2_3 => "T2.3",
            TheoremId::T2_6i => "T2.6i",
            TheoremId::T2_6ii => "T2.6ii",
            TheoremId::C2_8 => "C2.8",
            TheoremId::T3_2 => "T3.2",
            TheoremId::T3_4 => "T3.4",
            TheoremId::T3_6 => "T3.6",
            TheoremId::T3_7 => "T3.7",
            TheoremId::C3_8 => "C3.8",
            TheoremId::T3_9 => "T3.9",
            TheoremId::P5_4 => "P5.4",
            TheoremId::T5_2 => "T5.2",
            TheoremId::T5_3 => "T5.3",
            TheoremId::T5_5 => "T5.5",
            TheoremId::Cev => "CEV",
        }
    }

    /// Anchoring quotation for each result; fixed at build time.
    pub fn quote(self) -> &'static str {
        match self {
            TheoremId::T2_1 => "is a localizing sequence for",
            TheoremId::T2_3 => "Then, Z is a strict local martingale.",
            TheoremId::T2_6i => "c is bounded on compact subsets",
            TheoremId::T2_6ii => "Assume that ξ is recurrent",
            TheoremId::C2_8 => "is a martingale if and only if",
            TheoremId::T3_2 => "then Q is an EMM and Z is a SMD",
            TheoremId::T3_4 => "Then, no SMD exists.",
            TheoremId::T3_6 => "then Q is an EMM.",
            TheoremId::T3_7 => "and the MLMM does not exist",
            TheoremId::C3_8 => "The MLMM exists if and only if",
            TheoremId::T3_9 => "Suppose there exists a j ∈ J",
            TheoremId::P5_4 => "Then, A* = ℝ^N and",
            TheoremId::T5_2 => "preserves the independence of the sources",
            TheoremId::T5_3 => "solution process for the martingale problem",
            TheoremId::T5_5 => "is well-posed and that",
            TheoremId::Cev => "The MMM exists if and only if",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TheoremCitation {
    pub id: TheoremId,
    pub quote: &'static str,
}

impl From<TheoremId> for TheoremCitation {
    fn from(id: TheoremId) -> Self {
        TheoremCitation {
            id,
            quote: id.quote(),
        }
    }
}

/// One hypothesis or computed quantity consumed by a verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerdictInput {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub status: Status,
    pub certificate: TheoremCitation,
    pub inputs: Vec<VerdictInput>,
    pub reason: String,
}

impl Verdict {
    fn new(
        status: Status,
        id: TheoremId,
        inputs: Vec<VerdictInput>,
        reason: impl Into<String>,
    ) -> Self {
        Verdict {
            status,
            certificate: id.into(),
            inputs,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundarySummary {
    pub name: String,
    pub status: Convergence,
    pub estimate: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArbitrageReport {
    pub model: &'static str,
    pub smd: Verdict,
    pub elmm_mlmm: Verdict,
    pub emm_mmm: Verdict,
    pub bubble: Verdict,
    /// Structure-preserving ELMMs exist. Not defined for Itô envelope models.
    #[serde(rename = "structure_preserving_L")]
    pub structure_preserving_l: Option<Verdict>,
    #[serde(rename = "structure_preserving_M")]
    pub structure_preserving_m: Option<Verdict>,
    pub z_is_martingale: Verdict,
    pub boundary_tests: Vec<BoundarySummary>,
}

impl ArbitrageReport {
    fn verdicts(&self) -> Vec<(&'static str, Option<&Verdict>)> {
        vec![
            ("smd", Some(&self.smd)),
            ("elmm_mlmm", Some(&self.elmm_mlmm)),
            ("emm_mmm", Some(&self.emm_mmm)),
            ("bubble", Some(&self.bubble)),
            (
                "structure_preserving_L",
                self.structure_preserving_l.as_ref(),
            ),
            (
                "structure_preserving_M",
                self.structure_preserving_m.as_ref(),
            ),
            ("z_is_martingale", Some(&self.z_is_martingale)),
        ]
    }

    pub fn any_inconclusive(&self) -> bool {
        self.verdicts()
            .iter()
            .any(|(_, v)| v.is_some_and(|v| v.status == Status::Inconclusive))
    }

    /// Checks the logical relations between the verdicts.
    pub fn check_consistency(&self) -> Result<(), String> {
        use Status::*;
        let (elmm, emm, smd, bubble) = (
            self.elmm_mlmm.status,
            self.emm_mmm.status,
            self.smd.status,
            self.bubble.status,
        );
        if emm == Holds && elmm != Holds {
            return Err("EMM holds but ELMM does not".into());
        }
        if emm == Holds && bubble != Fails {
            return Err("EMM holds but bubble is not excluded".into());
        }
        if elmm == Holds && smd == Fails && bubble != Holds {
            return Err("ELMM holds and SMD fails but no bubble is reported".into());
        }
        if emm == Holds && smd == Fails {
            return Err("EMM holds but SMD fails".into());
        }
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<24} {:<13} {:<7} reason\n",
            "property", "status", "cites"
        );
        for (name, v) in self.verdicts() {
            match v {
                Some(v) => s.push_str(&format!(
                    "{:<24} {:<13} {:<7} {}\n",
                    name,
                    v.status.to_string(),
                    v.certificate.id.label(),
                    v.reason
                )),
                None => s.push_str(&format!(
                    "{name:<24} {:<13} {:<7} not defined for this model\n",
                    "-", "-"
                )),
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("internal contradiction: {0}")]
    Contradiction(String),
}

fn input(name: impl Into<String>, value: impl Into<String>) -> VerdictInput {
    VerdictInput {
        name: name.into(),
        value: value.into(),
    }
}

fn conv_name(c: Convergence) -> &'static str {
    match c {
        Convergence::Divergent => "Divergent",
        Convergence::Convergent => "Convergent",
        Convergence::Undetermined => "Undetermined",
    }
}

fn summary(name: String, v: &BoundaryVerdict) -> BoundarySummary {
    BoundarySummary {
        name,
        status: v.status,
        estimate: v.estimate,
        reason: v.reason.clone(),
    }
}

fn regimes_list(js: &[usize]) -> String {
    js.iter()
        .map(|j| (j + 1).to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

// ---------------------------------------------------------------------------
// Switching markets

struct SideTests {
    zero: Vec<Convergence>,
    inf: Vec<Convergence>,
}

struct Hyp {
    es: Vec<TriState>,
    b_bounded: TriState,
    recurrent: bool,
    recurrence_note: String,
}

impl Hyp {
    fn of(m: &SwitchingModel) -> Self {
        let irreducible = m.q.is_irreducible();
        let recurrent = irreducible || m.attestations.chain_recurrent.is_true();
        let recurrence_note = if irreducible {
            "automatic (finite irreducible chain)".to_string()
        } else {
            format!("attested {}", m.attestations.chain_recurrent.as_str())
        };
        Hyp {
            es: (0..m.n()).map(|j| m.attestations.es_for(j)).collect(),
            b_bounded: m.attestations.b_locally_bounded,
            recurrent,
            recurrence_note,
        }
    }

    fn es_all(&self) -> bool {
        self.es.iter().all(|e| e.is_true())
    }

    fn standing(&self) -> bool {
        self.es_all() && self.b_bounded.is_true()
    }

    fn inputs(&self) -> Vec<VerdictInput> {
        let mut v: Vec<VerdictInput> = self
            .es
            .iter()
            .enumerate()
            .map(|(j, e)| input(format!("es[{}]", j + 1), e.as_str()))
            .collect();
        v.push(input("b_locally_bounded", self.b_bounded.as_str()));
        v.push(input("chain_recurrent", self.recurrence_note.clone()));
        v
    }

    fn missing_standing(&self) -> String {
        let mut parts = Vec::new();
        let missing: Vec<usize> = (0..self.es.len())
            .filter(|&j| !self.es[j].is_true())
            .collect();
        if !missing.is_empty() {
            parts.push(format!(
                "ES not attested for regime(s) {}",
                regimes_list(&missing)
            ));
        }
        if !self.b_bounded.is_true() {
            parts.push("b bounded on compacts not attested".to_string());
        }
        parts.join("; ")
    }
}

/// A route decision on one side of `(0, ∞)`: all regimes divergent (`Holds`
/// route), some convergent regime with the needed hypotheses (`Fails`
/// route), or neither.
enum Side {
    AllDivergent,
    Convergent(Vec<usize>),
    Undetermined(Vec<usize>),
}

fn side(v: &[Convergence]) -> Side {
    let conv: Vec<usize> = (0..v.len())
        .filter(|&j| v[j] == Convergence::Convergent)
        .collect();
    if !conv.is_empty() {
        return Side::Convergent(conv);
    }
    let und: Vec<usize> = (0..v.len())
        .filter(|&j| v[j] == Convergence::Undetermined)
        .collect();
    if und.is_empty() {
        Side::AllDivergent
    } else {
        Side::Undetermined(und)
    }
}

fn side_inputs(name: &str, v: &[Convergence]) -> Vec<VerdictInput> {
    v.iter()
        .enumerate()
        .map(|(j, c)| input(format!("{name}[{}]", j + 1), conv_name(*c)))
        .collect()
}

/// Classifies a switching price market on `(0, ∞)` from the Feller-type
/// price tests `∫ z/σ²(z, j) dz` at both boundaries of every regime.
pub fn classify_switching_market(
    m: &SwitchingModel,
    cfg: &QuadConfig,
) -> Result<ArbitrageReport, ClassifyError> {
    validate(&MarketModel::SwitchingDiffusion(m.clone()))?;
    let tests: Vec<(BoundaryVerdict, BoundaryVerdict)> = (0..m.n())
        .into_par_iter()
        .map(|j| {
            Ok((
                feller_price_test(m, j, Boundary::Lower, cfg)?,
                feller_price_test(m, j, Boundary::Upper, cfg)?,
            ))
        })
        .collect::<Result<_, QuadError>>()?;
    let sides = SideTests {
        zero: tests.iter().map(|t| t.0.status).collect(),
        inf: tests.iter().map(|t| t.1.status).collect(),
    };
    let hyp = Hyp::of(m);
    let mut report = switching_report(&sides, &hyp);
    for (j, (z, i)) in tests.iter().enumerate() {
        report
            .boundary_tests
            .push(summary(format!("feller_zero[{}]", j + 1), z));
        report
            .boundary_tests
            .push(summary(format!("feller_infinity[{}]", j + 1), i));
    }
    Ok(report)
}

fn switching_report(t: &SideTests, h: &Hyp) -> ArbitrageReport {
    use Status::*;
    let base = h.inputs();
    let with = |extra: Vec<VerdictInput>| {
        let mut v = base.clone();
        v.extend(extra);
        v
    };
    let zero_in = side_inputs("feller_zero", &t.zero);
    let inf_in = side_inputs("feller_infinity", &t.inf);

    // Fails routes need ES for the offending regime; structure-preserving
    // verdicts (T3.9) need nothing else, the others also need recurrence.
    let es_conv = |js: &[usize]| js.iter().copied().find(|&j| h.es[j].is_true());

    let mlmm = match side(&t.zero) {
        Side::AllDivergent if h.standing() => Verdict::new(
            Holds,
            TheoremId::T3_6,
            with(zero_in.clone()),
            "∫₀¹ z/σ²(z, j) dz = ∞ for every regime",
        ),
        Side::AllDivergent => Verdict::new(
            Inconclusive,
            TheoremId::T3_6,
            with(zero_in.clone()),
            format!("zero-side tests diverge but {}", h.missing_standing()),
        ),
        Side::Convergent(js) => match es_conv(&js) {
            Some(j) if h.recurrent && h.b_bounded.is_true() => Verdict::new(
                Fails,
                TheoremId::T3_7,
                with(zero_in.clone()),
                format!("∫₀¹ z/σ²(z, {}) dz < ∞", j + 1),
            ),
            _ => Verdict::new(
                Inconclusive,
                TheoremId::T3_7,
                with(zero_in.clone()),
                format!(
                    "regime(s) {} converge at 0 but ES, b bounded on compacts or recurrence is not established",
                    regimes_list(&js)
                ),
            ),
        },
        Side::Undetermined(js) => Verdict::new(
            Inconclusive,
            TheoremId::C3_8,
            with(zero_in.clone()),
            format!("zero-side quadrature undetermined for regime(s) {}", regimes_list(&js)),
        ),
    };

    let smd = match side(&t.inf) {
        Side::AllDivergent if h.standing() => Verdict::new(
            Holds,
            TheoremId::T3_6,
            with(inf_in.clone()),
            "∫₁^∞ z/σ²(z, j) dz = ∞ for every regime, so Z is a SMD",
        ),
        Side::AllDivergent => Verdict::new(
            Inconclusive,
            TheoremId::T3_6,
            with(inf_in.clone()),
            format!("infinity-side tests diverge but {}", h.missing_standing()),
        ),
        Side::Convergent(js) => match es_conv(&js) {
            Some(j) if h.recurrent && h.b_bounded.is_true() => Verdict::new(
                Fails,
                TheoremId::T3_7,
                with(inf_in.clone()),
                format!("∫₁^∞ z/σ²(z, {}) dz < ∞, so Z is no SMD", j + 1),
            ),
            _ => Verdict::new(
                Inconclusive,
                TheoremId::T3_7,
                with(inf_in.clone()),
                format!(
                    "regime(s) {} converge at ∞ but ES, b bounded on compacts or recurrence is not established",
                    regimes_list(&js)
                ),
            ),
        },
        Side::Undetermined(js) => Verdict::new(
            Inconclusive,
            TheoremId::C3_8,
            with(inf_in.clone()),
            format!("infinity-side quadrature undetermined for regime(s) {}", regimes_list(&js)),
        ),
    };

    let mut both = zero_in.clone();
    both.extend(inf_in.clone());
    let emm = match (mlmm.status, smd.status) {
        (Holds, Holds) => Verdict::new(
            Holds,
            TheoremId::T3_6,
            with(both.clone()),
            "both price tests diverge in every regime, so the MLMM is an EMM",
        ),
        (Fails, _) => Verdict::new(
            Fails,
            TheoremId::T3_7,
            with(both.clone()),
            "the MLMM does not exist",
        ),
        (_, Fails) => Verdict::new(
            Fails,
            TheoremId::T3_7,
            with(both.clone()),
            "Z is no SMD, so the MMM does not exist",
        ),
        _ => Verdict::new(
            Inconclusive,
            TheoremId::C3_8,
            with(both.clone()),
            "MLMM or SMD verdict is inconclusive",
        ),
    };

    let bubble = bubble_verdict(&mlmm, &smd, &emm, TheoremId::C3_8);

    let z_mart = Verdict {
        reason: match mlmm.status {
            Holds => "Z is a martingale".to_string(),
            Fails => "Z is a strict local martingale".to_string(),
            Inconclusive => mlmm.reason.clone(),
        },
        ..mlmm.clone()
    };

    let zero_es_conv = match side(&t.zero) {
        Side::Convergent(js) => es_conv(&js),
        _ => None,
    };
    let inf_es_conv = match side(&t.inf) {
        Side::Convergent(js) => es_conv(&js),
        _ => None,
    };
    let sp_l = if let Some(j) = zero_es_conv {
        Verdict::new(
            Fails,
            TheoremId::T3_9,
            with(zero_in.clone()),
            format!("regime {} converges at 0 and satisfies ES", j + 1),
        )
    } else if mlmm.status == Holds && h.recurrent {
        Verdict::new(
            Holds,
            TheoremId::T5_2,
            with(zero_in.clone()),
            "the MLMM keeps the chain law, so it is structure preserving",
        )
    } else {
        Verdict::new(
            Inconclusive,
            TheoremId::T3_9,
            with(zero_in.clone()),
            "neither the MLMM route nor a convergent ES regime is established",
        )
    };
    let sp_m = if let Some(j) = inf_es_conv {
        Verdict::new(
            Fails,
            TheoremId::T3_9,
            with(both.clone()),
            format!("regime {} converges at ∞ and satisfies ES", j + 1),
        )
    } else if sp_l.status == Fails {
        Verdict::new(
            Fails,
            TheoremId::T3_9,
            with(both.clone()),
            "no structure-preserving ELMM exists, hence no such EMM",
        )
    } else if emm.status == Holds && h.recurrent {
        Verdict::new(
            Holds,
            TheoremId::T5_2,
            with(both.clone()),
            "the MMM keeps the chain law, so it is structure preserving",
        )
    } else {
        Verdict::new(
            Inconclusive,
            TheoremId::T3_9,
            with(both),
            "neither the MMM route nor a convergent ES regime is established",
        )
    };

    ArbitrageReport {
        model: "switching",
        smd,
        elmm_mlmm: mlmm,
        emm_mmm: emm,
        bubble,
        structure_preserving_l: Some(sp_l),
        structure_preserving_m: Some(sp_m),
        z_is_martingale: z_mart,
        boundary_tests: Vec::new(),
    }
}

/// Bubble in the Cox–Hobson sense: an ELMM exists but no SMD or no EMM.
fn bubble_verdict(elmm: &Verdict, smd: &Verdict, emm: &Verdict, id: TheoremId) -> Verdict {
    use Status::*;
    let no_smd = !smd.status;
    let no_emm = !emm.status;
    let status = elmm.status.and(no_smd.or(no_emm));
    let reason = match status {
        Holds if no_smd == Holds => "ELMM exists and no SMD exists".to_string(),
        Holds => "ELMM exists and no EMM exists".to_string(),
        Fails if elmm.status == Fails => "no ELMM exists".to_string(),
        Fails => "an EMM and a SMD exist".to_string(),
        Inconclusive => "ELMM, SMD or EMM verdict is inconclusive".to_string(),
    };
    let inputs = vec![
        input("elmm_mlmm", elmm.status.to_string()),
        input("smd", smd.status.to_string()),
        input("emm_mmm", emm.status.to_string()),
    ];
    Verdict::new(status, id, inputs, reason)
}

/// Analytic verdicts for the Markov-switching CEV model `σ(x, j) = x^β(j)`.
pub fn cev_closed_form(betas: &[f64]) -> ArbitrageReport {
    use Status::*;
    let min = betas.iter().copied().fold(f64::INFINITY, f64::min);
    let max = betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let inputs = vec![input(
        "beta",
        betas
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join(", "),
    )];
    let v = |holds: bool, reason: &str| {
        Verdict::new(
            if holds { Holds } else { Fails },
            TheoremId::Cev,
            inputs.clone(),
            reason,
        )
    };
    let mlmm = v(min >= 1.0, "MLMM exists iff β(j) ≥ 1 for all j");
    let mmm = v(
        betas.iter().all(|&b| b == 1.0),
        "MMM exists iff β(j) = 1 for all j",
    );
    let smd = v(max <= 1.0, "Z is a SMD iff β(j) ≤ 1 for all j");
    let bubble = bubble_verdict(&mlmm, &smd, &mmm, TheoremId::Cev);
    let sp_l = v(
        min >= 1.0,
        "structure-preserving ELMM iff β(j) ≥ 1 for all j",
    );
    let sp_m = v(
        min >= 1.0 && max <= 1.0,
        "structure-preserving EMM iff β(j) = 1 for all j",
    );
    ArbitrageReport {
        model: "switching",
        z_is_martingale: mlmm.clone(),
        smd,
        elmm_mlmm: mlmm,
        emm_mmm: mmm,
        bubble,
        structure_preserving_l: Some(sp_l),
        structure_preserving_m: Some(sp_m),
        boundary_tests: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Stochastic-exponential Itô markets

pub fn classify_ito_market(
    m: &ItoEnvelopeModel,
    cfg: &QuadConfig,
) -> Result<ArbitrageReport, ClassifyError> {
    use Status::*;
    validate(&MarketModel::StochasticExponentialIto(m.clone()))?;
    let a = &m.attestations;
    let mut tests = Vec::new();
    let upper = reduced_const_u_test(&m.upper_a, &m.interval, Boundary::Upper, cfg)?;
    tests.push(summary("reduced_upper_a_infinity".into(), &upper));
    let lower = match &m.lower_a {
        Some(la) => {
            let v = reduced_const_u_test(la, &m.interval, Boundary::Upper, cfg)?;
            tests.push(summary("reduced_lower_a_infinity".into(), &v));
            Some(v)
        }
        None => None,
    };

    let l_inputs = vec![
        input("localizing_sequence", a.localizing_sequence.as_str()),
        input("upper_envelope_bound", a.upper_envelope_bound.as_str()),
    ];
    let l_holds = a.localizing_sequence.is_true() && a.upper_envelope_bound.is_true();
    let elmm = if l_holds {
        Verdict::new(
            Holds,
            TheoremId::T3_2,
            l_inputs.clone(),
            "(L1) and (L2) attested",
        )
    } else {
        Verdict::new(
            Inconclusive,
            TheoremId::T3_2,
            l_inputs.clone(),
            "(L1) or (L2) not attested",
        )
    };

    let mut smd_in = l_inputs.clone();
    smd_in.push(input("reduced_upper_a_infinity", conv_name(upper.status)));
    let smd_holds = l_holds && upper.status == Convergence::Divergent;

    let t34_in = vec![
        input(
            "lower_a",
            if m.lower_a.is_some() {
                "given"
            } else {
                "absent"
            },
        ),
        input("yw_one_lower_a", a.yw_one_lower_a.as_str()),
        input("lower_envelope_bound", a.lower_envelope_bound.as_str()),
        input(
            "reduced_lower_a_infinity",
            lower
                .as_ref()
                .map(|v| conv_name(v.status))
                .unwrap_or("not run"),
        ),
    ];
    let smd_fails = lower
        .as_ref()
        .is_some_and(|v| v.status == Convergence::Convergent)
        && a.yw_one_lower_a.is_true()
        && a.lower_envelope_bound.is_true();

    if smd_holds && smd_fails {
        return Err(ClassifyError::Contradiction(
            "∫ dz/ā diverges while ∫ dz/a̲ converges, although a̲ ≤ ā".into(),
        ));
    }
    let mut all_in = smd_in.clone();
    all_in.extend(t34_in.clone());
    let (smd, emm) = if smd_holds {
        (
            Verdict::new(
                Holds,
                TheoremId::T3_2,
                smd_in.clone(),
                "∫₁^∞ dz/ā(z) = ∞, Z is a SMD",
            ),
            Verdict::new(
                Holds,
                TheoremId::T3_2,
                smd_in,
                "∫₁^∞ dz/ā(z) = ∞, the MLMM is an EMM",
            ),
        )
    } else if smd_fails {
        (
            Verdict::new(
                Fails,
                TheoremId::T3_4,
                t34_in.clone(),
                "∫₁^∞ dz/a̲(z) < ∞, no SMD exists",
            ),
            Verdict::new(
                Fails,
                TheoremId::T3_4,
                t34_in,
                "no SMD exists, hence no EMM exists",
            ),
        )
    } else {
        let reason =
            "neither the EMM route of (L1), (L2) and ∫ dz/ā = ∞ nor the no-SMD route closes";
        (
            Verdict::new(Inconclusive, TheoremId::T3_2, all_in.clone(), reason),
            Verdict::new(Inconclusive, TheoremId::T3_2, all_in, reason),
        )
    };
    let bubble = bubble_verdict(&elmm, &smd, &emm, TheoremId::T3_4);
    let z_mart = Verdict {
        reason: if elmm.status == Holds {
            "Z is a martingale".into()
        } else {
            elmm.reason.clone()
        },
        ..elmm.clone()
    };
    Ok(ArbitrageReport {
        model: "ito",
        smd,
        elmm_mlmm: elmm,
        emm_mmm: emm,
        bubble,
        structure_preserving_l: None,
        structure_preserving_m: None,
        z_is_martingale: z_mart,
        boundary_tests: tests,
    })
}

/// Classifies whichever market a model describes.
pub fn classify_market(
    m: &MarketModel,
    cfg: &QuadConfig,
) -> Result<ArbitrageReport, ClassifyError> {
    match m {
        MarketModel::SwitchingDiffusion(s) => classify_switching_market(s, cfg),
        MarketModel::StochasticExponentialIto(i) => classify_ito_market(i, cfg),
    }
}

// ---------------------------------------------------------------------------
// Martingale property of a stochastic exponential

/// Input for [`classify_exponential`].
#[derive(Debug, Clone, Copy)]
pub enum ExponentialInput<'a> {
    /// `Z = E(∫ c(S, ξ) dW)` with the model's kernel.
    Switching(&'a SwitchingModel),
    /// `Z` described through envelopes of an Itô process.
    Ito(&'a ItoEnvelopeModel),
}

/// Martingale (`Holds`) or strict local martingale (`Fails`) verdict for a
/// stochastic exponential.
pub fn classify_exponential(
    inp: ExponentialInput<'_>,
    cfg: &QuadConfig,
) -> Result<Verdict, ClassifyError> {
    match inp {
        ExponentialInput::Switching(m) => exponential_switching(m, cfg),
        ExponentialInput::Ito(m) => exponential_ito(m, cfg),
    }
}

fn exponential_switching(m: &SwitchingModel, cfg: &QuadConfig) -> Result<Verdict, ClassifyError> {
    use Status::*;
    validate(&MarketModel::SwitchingDiffusion(m.clone()))?;
    let tests: Vec<_> = (0..m.n())
        .into_par_iter()
        .map(|j| general_v_switching(m, j, cfg))
        .collect::<Result<_, QuadError>>()?;
    let hyp = Hyp::of(m);
    let att = &m.attestations;
    let mut inputs = hyp.inputs();
    inputs.push(input("c_locally_bounded", att.c_locally_bounded.as_str()));
    for (j, t) in tests.iter().enumerate() {
        inputs.push(input(
            format!("v_upper[{}]", j + 1),
            conv_name(t.at_upper.status),
        ));
        inputs.push(input(
            format!("v_lower[{}]", j + 1),
            conv_name(t.at_lower.status),
        ));
    }
    let all_div = tests.iter().all(|t| {
        t.at_upper.status == Convergence::Divergent && t.at_lower.status == Convergence::Divergent
    });
    let conv: Vec<usize> = (0..m.n())
        .filter(|&j| {
            tests[j].at_upper.status == Convergence::Convergent
                || tests[j].at_lower.status == Convergence::Convergent
        })
        .collect();
    let es_all = hyp.es_all();
    let iff = es_all && att.c_locally_bounded.is_true() && m.q.is_irreducible();

    if all_div {
        if es_all && att.c_locally_bounded.is_true() {
            let id = if iff {
                TheoremId::C2_8
            } else {
                TheoremId::T2_6i
            };
            return Ok(Verdict::new(
                Holds,
                id,
                inputs,
                "v diverges at both ends for every regime; Z is a martingale",
            ));
        }
        return Ok(Verdict::new(
            Inconclusive,
            TheoremId::T2_6i,
            inputs,
            "v diverges everywhere but ES for all regimes or local boundedness of c is not attested",
        ));
    }
    // Recurrence is not needed when the explosive regime is the initial one.
    let witness = conv
        .iter()
        .copied()
        .find(|&j| hyp.es[j].is_true() && (hyp.recurrent || j == m.regimes.initial));
    if let Some(j) = witness {
        let id = if iff {
            TheoremId::C2_8
        } else {
            TheoremId::T2_6ii
        };
        return Ok(Verdict::new(
            Fails,
            id,
            inputs,
            format!(
                "v is finite at a boundary for regime {}; Z is a strict local martingale",
                j + 1
            ),
        ));
    }
    let reason = if conv.is_empty() {
        "quadrature undetermined for some regime".to_string()
    } else {
        format!(
            "regime(s) {} have a finite boundary limit but ES or recurrence is not established",
            regimes_list(&conv)
        )
    };
    Ok(Verdict::new(
        Inconclusive,
        TheoremId::T2_6ii,
        inputs,
        reason,
    ))
}

fn exponential_ito(m: &ItoEnvelopeModel, cfg: &QuadConfig) -> Result<Verdict, ClassifyError> {
    use Status::*;
    validate(&MarketModel::StochasticExponentialIto(m.clone()))?;
    let a = &m.attestations;
    let si = |f: &expr::Expr, g: &expr::Expr| ScaleIntegrand {
        f: f.clone(),
        g: g.clone(),
        interval: m.interval,
    };
    let mut inputs = vec![
        input("localizing_sequence", a.localizing_sequence.as_str()),
        input("upper_envelope_bound", a.upper_envelope_bound.as_str()),
        input("lower_envelope_bound", a.lower_envelope_bound.as_str()),
        input("drift_lower_bound", a.drift_lower_bound.as_str()),
        input("drift_upper_bound", a.drift_upper_bound.as_str()),
        input("yw_lower_u_lower_a", a.yw_lower_u_lower_a.as_str()),
        input("yw_upper_u_lower_a", a.yw_upper_u_lower_a.as_str()),
    ];
    let run = |f: &Option<expr::Expr>,
               g: &Option<expr::Expr>,
               b: Boundary|
     -> Result<Option<Convergence>, QuadError> {
        match (f, g) {
            (Some(f), Some(g)) => Ok(Some(
                quad::classify_boundary_with(&si(f, g), b, cfg)?.status,
            )),
            _ => Ok(None),
        }
    };
    let ua = Some(m.upper_a.clone());
    let m3_r = run(&m.upper_u, &ua, Boundary::Upper)?;
    let m3_l = run(&m.lower_u, &ua, Boundary::Lower)?;
    let sl1 = run(&m.lower_u, &m.lower_a, Boundary::Upper)?;
    let sl2 = run(&m.upper_u, &m.lower_a, Boundary::Lower)?;
    let show = |c: Option<Convergence>| c.map(conv_name).unwrap_or("not run");
    inputs.push(input("v(ū, ā) at r", show(m3_r)));
    inputs.push(input("v(u̲, ā) at l", show(m3_l)));
    inputs.push(input("v(u̲, a̲) at r", show(sl1)));
    inputs.push(input("v(ū, a̲) at l", show(sl2)));

    let holds = a.localizing_sequence.is_true()
        && a.upper_envelope_bound.is_true()
        && a.drift_lower_bound.is_true()
        && a.drift_upper_bound.is_true()
        && m3_r == Some(Convergence::Divergent)
        && m3_l == Some(Convergence::Divergent);
    let sl1_ok = a.yw_lower_u_lower_a.is_true()
        && a.lower_envelope_bound.is_true()
        && a.drift_lower_bound.is_true()
        && sl1 == Some(Convergence::Convergent);
    let sl2_ok = a.yw_upper_u_lower_a.is_true()
        && a.lower_envelope_bound.is_true()
        && a.drift_upper_bound.is_true()
        && sl2 == Some(Convergence::Convergent);
    if holds && (sl1_ok || sl2_ok) {
        return Err(ClassifyError::Contradiction(
            "(M1)–(M3) and (SL1)/(SL2) are both established".into(),
        ));
    }
    if holds {
        return Ok(Verdict::new(
            Holds,
            TheoremId::T2_1,
            inputs,
            "(M1)–(M3) hold; Z is a martingale",
        ));
    }
    if sl1_ok || sl2_ok {
        let which = if sl1_ok { "(SL1)" } else { "(SL2)" };
        return Ok(Verdict::new(
            Fails,
            TheoremId::T2_3,
            inputs,
            format!("{which} holds; Z is a strict local martingale"),
        ));
    }
    Ok(Verdict::new(
        Inconclusive,
        TheoremId::T2_1,
        inputs,
        "neither (M1)–(M3) nor (SL1)/(SL2) is established",
    ))
}

//! Market model types, localization ladders and model validation.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::expr::{self, Expr};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(
        "invalid state interval: need lower < x0 < upper, got ({lower}, {upper}) with x0 = {x0}"
    )]
    Interval { lower: f64, upper: f64, x0: f64 },
    #[error("invalid Q-matrix: {0}")]
    QMatrix(String),
    #[error("invalid regime set: {0}")]
    Regimes(String),
    #[error(
        "localization level {level} is not representable in double precision for this interval"
    )]
    Ladder { level: u32 },
}

// ---------------------------------------------------------------------------
// State interval

/// Open interval `(lower, upper)` with an interior reference point `x0`.
/// Either endpoint may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateInterval {
    pub lower: f64,
    pub upper: f64,
    pub x0: f64,
}

impl StateInterval {
    pub fn new(lower: f64, upper: f64, x0: f64) -> Result<Self, ModelError> {
        let ok = !lower.is_nan()
            && !upper.is_nan()
            && x0.is_finite()
            && lower < x0
            && x0 < upper
            && lower != f64::INFINITY
            && upper != f64::NEG_INFINITY;
        if !ok {
            return Err(ModelError::Interval { lower, upper, x0 });
        }
        Ok(StateInterval { lower, upper, x0 })
    }

    /// `(0, ∞)` with reference point 1.
    pub fn positive() -> Self {
        StateInterval {
            lower: 0.0,
            upper: f64::INFINITY,
            x0: 1.0,
        }
    }

    /// The real line with reference point 0.
    pub fn real_line() -> Self {
        StateInterval {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            x0: 0.0,
        }
    }

    pub fn with_x0(&self, x0: f64) -> Result<Self, ModelError> {
        StateInterval::new(self.lower, self.upper, x0)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower < x && x < self.upper
    }

    /// Localization level `k >= 1`, i.e. the pair `(l_k, r_k)`.
    ///
    /// * finite `l`: `l_k = l + 2^-k · min(x0 - l, 1)`
    /// * finite `r`: `r_k = r - 2^-k · min(r - x0, 1)`
    /// * the real line: `(x0 - k, x0 + k)`
    /// * one finite endpoint `e`, other infinite: the infinite side doubles,
    ///   `r_k = l + 2^k · max(x0 - l, 1)` (mirrored for `l = -∞`)
    pub fn level(&self, k: u32) -> (f64, f64) {
        let kf = k as f64;
        let x0 = self.x0;
        let both_infinite = self.lower.is_infinite() && self.upper.is_infinite();
        let lo = if self.lower.is_finite() {
            self.lower + (-kf).exp2() * (x0 - self.lower).min(1.0)
        } else if both_infinite {
            x0 - kf
        } else {
            self.upper - kf.exp2() * (self.upper - x0).max(1.0)
        };
        let hi = if self.upper.is_finite() {
            self.upper - (-kf).exp2() * (self.upper - x0).min(1.0)
        } else if both_infinite {
            x0 + kf
        } else {
            self.lower + kf.exp2() * (x0 - self.lower).max(1.0)
        };
        (lo, hi)
    }

    /// The first `depth` localization levels, strictly nested.
    pub fn localization_ladder(&self, depth: u32) -> Result<Vec<(f64, f64)>, ModelError> {
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(depth as usize);
        for k in 1..=depth {
            let (l, r) = self.level(k);
            let nested = match out.last() {
                Some(&(pl, pr)) => self.lower < l && l < pl && pr < r && r < self.upper,
                None => self.lower < l && l < self.x0 && self.x0 < r && r < self.upper,
            };
            if !nested {
                return Err(ModelError::Ladder { level: k });
            }
            out.push((l, r));
        }
        Ok(out)
    }
}

impl fmt::Display for StateInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}) with x0 = {}", self.lower, self.upper, self.x0)
    }
}

// ---------------------------------------------------------------------------
// Regimes and Q-matrices

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSet {
    pub count: usize,
    /// Initial regime, zero based.
    pub initial: usize,
    #[serde(default)]
    pub labels: Vec<String>,
}

impl RegimeSet {
    pub fn new(count: usize, initial: usize) -> Result<Self, ModelError> {
        if count == 0 {
            return Err(ModelError::Regimes(
                "at least one regime is required".into(),
            ));
        }
        if initial >= count {
            return Err(ModelError::Regimes(format!(
                "initial regime {} outside 1..={count}",
                initial + 1
            )));
        }
        Ok(RegimeSet {
            count,
            initial,
            labels: Vec::new(),
        })
    }

    pub fn label(&self, j: usize) -> String {
        self.labels
            .get(j)
            .cloned()
            .unwrap_or_else(|| format!("{}", j + 1))
    }
}

/// Generator matrix of a finite continuous-time Markov chain.
///
/// Construction checks the generator structure (non-negative off-diagonal
/// rates, zero row sums). Irreducibility is reported separately by
/// [`QMatrix::is_irreducible`] so that one-way chains used for change-point
/// models can still be represented.
#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    rows: Vec<Vec<f64>>,
}

pub const ROW_SUM_TOL: f64 = 1e-12;

impl QMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let n = rows.len();
        if n == 0 {
            return Err(ModelError::QMatrix("empty matrix".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(ModelError::QMatrix(format!(
                    "row {} has {} entries, expected {n}",
                    i + 1,
                    row.len()
                )));
            }
            let mut sum = 0.0;
            let mut scale = 1.0f64;
            for (j, &q) in row.iter().enumerate() {
                if !q.is_finite() {
                    return Err(ModelError::QMatrix(format!(
                        "q[{},{}] is not finite",
                        i + 1,
                        j + 1
                    )));
                }
                if i != j && q < 0.0 {
                    return Err(ModelError::QMatrix(format!(
                        "off-diagonal rate q[{},{}] = {q} is negative",
                        i + 1,
                        j + 1
                    )));
                }
                sum += q;
                scale += q.abs();
            }
            if sum.abs() > ROW_SUM_TOL * scale {
                return Err(ModelError::QMatrix(format!(
                    "row {} sums to {sum}, not 0",
                    i + 1
                )));
            }
        }
        Ok(QMatrix { rows })
    }

    /// The trivial generator `[[0]]` of a one-regime model.
    pub fn single() -> Self {
        QMatrix {
            rows: vec![vec![0.0]],
        }
    }

    /// Two-state chain leaving state 1 at rate `a` and state 2 at rate `b`.
    pub fn two_state(a: f64, b: f64) -> Result<Self, ModelError> {
        QMatrix::new(vec![vec![-a, a], vec![b, -b]])
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Total exit rate `-q_ii`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.rows[i][i]
    }

    pub fn max_abs_row_sum(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.iter().sum::<f64>().abs())
            .fold(0.0, f64::max)
    }

    /// Strong connectivity of the rate graph `i -> j` for `q_ij > 0`.
    pub fn is_irreducible(&self) -> bool {
        let n = self.n();
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    let q = if forward {
                        self.rows[i][j]
                    } else {
                        self.rows[j][i]
                    };
                    if i != j && q > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }

    /// `(Q f)(i) = Σ_j q_ij f(j)`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().zip(f).map(|(q, v)| q * v).sum())
            .collect()
    }

    /// Transition matrix `exp(tQ)` by scaling and squaring a truncated series.
    pub fn transition_matrix(&self, t: f64) -> Vec<Vec<f64>> {
        let n = self.n();
        let norm: f64 = self
            .rows
            .iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
            * t;
        let mut s = 0u32;
        while norm / 2f64.powi(s as i32) > 0.5 {
            s += 1;
        }
        let h = t / 2f64.powi(s as i32);
        let a: Vec<Vec<f64>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(|v| v * h).collect())
            .collect();
        let mut result = identity(n);
        let mut term = identity(n);
        for k in 1..=30 {
            term = matmul(&term, &a);
            for row in term.iter_mut() {
                for v in row.iter_mut() {
                    *v /= k as f64;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    result[i][j] += term[i][j];
                }
            }
        }
        for _ in 0..s {
            result = matmul(&result, &result);
        }
        result
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

impl Serialize for QMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for QMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        QMatrix::new(rows).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Attestations

/// Three-valued attestation flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TriState {
    AssertedTrue,
    AssertedFalse,
    #[default]
    Unknown,
}

impl TriState {
    pub fn is_true(self) -> bool {
        self == TriState::AssertedTrue
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TriState::AssertedTrue => "true",
            TriState::AssertedFalse => "false",
            TriState::Unknown => "unknown",
        }
    }
}

impl From<bool> for TriState {
    fn from(b: bool) -> Self {
        if b {
            TriState::AssertedTrue
        } else {
            TriState::AssertedFalse
        }
    }
}

impl Serialize for TriState {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TriState::AssertedTrue => s.serialize_bool(true),
            TriState::AssertedFalse => s.serialize_bool(false),
            TriState::Unknown => s.serialize_str("unknown"),
        }
    }
}

impl<'de> Deserialize<'de> for TriState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Bool(bool),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Bool(b) => Ok(b.into()),
            Raw::Str(s) if s == "unknown" => Ok(TriState::Unknown),
            Raw::Str(s) if s == "true" => Ok(TriState::AssertedTrue),
            Raw::Str(s) if s == "false" => Ok(TriState::AssertedFalse),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "expected true, false or \"unknown\", got \"{s}\""
            ))),
        }
    }
}

/// Analytic hypotheses that cannot be decided from expressions alone.
/// Every flag defaults to `Unknown`; nothing is ever upgraded implicitly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularityAttestation {
    /// Engelbert–Schmidt conditions for `σ(·, j)`, one flag per regime.
    pub es: Vec<TriState>,
    /// `b` is bounded on compact subsets (standing assumption of price models).
    pub b_locally_bounded: TriState,
    /// `c` is bounded on compact subsets of `I × J`.
    pub c_locally_bounded: TriState,
    /// The exit times of the localization ladder localize `Z`.
    pub localizing_sequence: TriState,
    /// Recurrence of the regime chain. Implied by irreducibility for finite N.
    pub chain_recurrent: TriState,
    /// `σ_t² ≤ ζ(t) ā(S_t)`.
    pub upper_envelope_bound: TriState,
    /// `a̲(S_t) ≤ σ_t²`.
    pub lower_envelope_bound: TriState,
    /// `u̲(S_t) σ_t² ≤ b_t + c_t σ_t`.
    pub drift_lower_bound: TriState,
    /// `ū(S_t) σ_t² ≥ b_t + c_t σ_t`.
    pub drift_upper_bound: TriState,
    /// Yamada–Watanabe conditions for the pair `(u̲, a̲)`.
    pub yw_lower_u_lower_a: TriState,
    /// Yamada–Watanabe conditions for the pair `(ū, a̲)`.
    pub yw_upper_u_lower_a: TriState,
    /// Yamada–Watanabe conditions for the pair `(1, a̲)`.
    pub yw_one_lower_a: TriState,
}

impl RegularityAttestation {
    pub fn es_for(&self, j: usize) -> TriState {
        self.es.get(j).copied().unwrap_or_default()
    }

    /// Every flag asserted true, for `n` regimes.
    pub fn all_true(n: usize) -> Self {
        let t = TriState::AssertedTrue;
        RegularityAttestation {
            es: vec![t; n],
            b_locally_bounded: t,
            c_locally_bounded: t,
            localizing_sequence: t,
            chain_recurrent: t,
            upper_envelope_bound: t,
            lower_envelope_bound: t,
            drift_lower_bound: t,
            drift_upper_bound: t,
            yw_lower_u_lower_a: t,
            yw_upper_u_lower_a: t,
            yw_one_lower_a: t,
        }
    }
}

// ---------------------------------------------------------------------------
// Models

/// Switching diffusion `dS = b(S, ξ) dt + σ(S, ξ) dW` with a finite chain `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingModel {
    pub interval: StateInterval,
    pub regimes: RegimeSet,
    pub q: QMatrix,
    pub b: Vec<Expr>,
    pub sigma: Vec<Expr>,
    /// Exponent kernel; `None` means the MLMM kernel `-b/σ`.
    pub c: Option<Vec<Expr>>,
    pub p0: f64,
    pub horizon: f64,
    pub attestations: RegularityAttestation,
}

impl SwitchingModel {
    /// A model with `b`, `σ` per regime, kernel unset and no attestations.
    pub fn new(
        interval: StateInterval,
        q: QMatrix,
        b: Vec<Expr>,
        sigma: Vec<Expr>,
        p0: f64,
        horizon: f64,
    ) -> Result<Self, ModelError> {
        let n = q.n();
        if b.len() != n || sigma.len() != n {
            return Err(ModelError::Regimes(format!(
                "Q has {n} regimes but {} drifts and {} volatilities were given",
                b.len(),
                sigma.len()
            )));
        }
        Ok(SwitchingModel {
            interval,
            regimes: RegimeSet::new(n, 0)?,
            q,
            b,
            sigma,
            c: None,
            p0,
            horizon,
            attestations: RegularityAttestation::default(),
        })
    }

    /// Markov-switching CEV price model `σ(x, j) = x^β(j)`, `b = 0`, on `(0, ∞)`.
    /// Regimes switch symmetrically at unit rate; all attestations are set,
    /// since power volatilities satisfy the ES conditions.
    pub fn cev(betas: &[f64]) -> Self {
        let n = betas.len();
        let q = if n == 1 {
            QMatrix::single()
        } else {
            let rows = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| if i == j { -1.0 } else { 1.0 / (n - 1) as f64 })
                        .collect()
                })
                .collect();
            QMatrix::new(rows).expect("uniform generator")
        };
        let sigma = betas
            .iter()
            .map(|&b| {
                if b == 1.0 {
                    expr::var()
                } else {
                    expr::pow(expr::var(), expr::num(b))
                }
            })
            .collect();
        let mut m = SwitchingModel::new(
            StateInterval::positive(),
            q,
            vec![expr::num(0.0); n],
            sigma,
            1.0,
            1.0,
        )
        .expect("consistent sizes");
        m.attestations = RegularityAttestation::all_true(n);
        m
    }

    pub fn n(&self) -> usize {
        self.q.n()
    }

    /// Kernel per regime, falling back to the MLMM kernel.
    pub fn kernel(&self) -> Vec<Expr> {
        match &self.c {
            Some(c) => c.clone(),
            None => market_price_of_risk(self)
                .into_iter()
                .map(expr::neg)
                .collect(),
        }
    }

    /// Same model with one frozen regime `j` and the trivial chain.
    pub fn frozen(&self, j: usize) -> SwitchingModel {
        let mut att = self.attestations.clone();
        att.es = vec![self.attestations.es_for(j)];
        SwitchingModel {
            interval: self.interval,
            regimes: RegimeSet::new(1, 0).expect("one regime"),
            q: QMatrix::single(),
            b: vec![self.b[j].clone()],
            sigma: vec![self.sigma[j].clone()],
            c: self.c.as_ref().map(|c| vec![c[j].clone()]),
            p0: self.p0,
            horizon: self.horizon,
            attestations: att,
        }
    }
}

/// Stochastic exponential market described through envelope functions of
/// the latent Itô coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ItoEnvelopeModel {
    pub interval: StateInterval,
    pub upper_a: Expr,
    pub lower_a: Option<Expr>,
    pub upper_u: Option<Expr>,
    pub lower_u: Option<Expr>,
    /// Time envelope `ζ`, written as an expression in `x` standing for `t`.
    pub zeta: Expr,
    pub s0: f64,
    pub horizon: f64,
    pub attestations: RegularityAttestation,
}

impl ItoEnvelopeModel {
    pub fn new(upper_a: Expr) -> Self {
        ItoEnvelopeModel {
            interval: StateInterval::real_line(),
            upper_a,
            lower_a: None,
            upper_u: None,
            lower_u: None,
            zeta: expr::num(1.0),
            s0: 0.0,
            horizon: 1.0,
            attestations: RegularityAttestation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MarketModel {
    StochasticExponentialIto(ItoEnvelopeModel),
    SwitchingDiffusion(SwitchingModel),
}

impl MarketModel {
    pub fn horizon(&self) -> f64 {
        match self {
            MarketModel::StochasticExponentialIto(m) => m.horizon,
            MarketModel::SwitchingDiffusion(m) => m.horizon,
        }
    }

    pub fn interval(&self) -> &StateInterval {
        match self {
            MarketModel::StochasticExponentialIto(m) => &m.interval,
            MarketModel::SwitchingDiffusion(m) => &m.interval,
        }
    }
}

/// Market price of risk `θ(x, j) = b(x, j)/σ(x, j)` per regime.
pub fn market_price_of_risk(m: &SwitchingModel) -> Vec<Expr> {
    m.b.iter()
        .zip(&m.sigma)
        .map(|(b, s)| expr::div(b.clone(), s.clone()))
        .collect()
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    HeuristicPass,
    HeuristicFail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
    /// A failing fatal item makes the model unusable.
    pub fatal: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub items: Vec<CheckItem>,
}

impl ValidationReport {
    fn push(
        &mut self,
        name: impl Into<String>,
        status: CheckStatus,
        detail: impl Into<String>,
        fatal: bool,
    ) {
        self.items.push(CheckItem {
            name: name.into(),
            status,
            detail: detail.into(),
            fatal,
        });
    }

    fn check(&mut self, name: impl Into<String>, result: Result<String, String>) {
        match result {
            Ok(d) => self.push(name, CheckStatus::Pass, d, true),
            Err(d) => self.push(name, CheckStatus::Fail, d, true),
        }
    }

    pub fn passed(&self) -> bool {
        !self
            .items
            .iter()
            .any(|i| i.fatal && i.status == CheckStatus::Fail)
    }

    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for i in &self.items {
            let status = match i.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Fail => "FAIL",
                CheckStatus::HeuristicPass => "pass (heuristic)",
                CheckStatus::HeuristicFail => "fail (heuristic)",
            };
            s.push_str(&format!("{:<34} {:<18} {}\n", i.name, status, i.detail));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("model validation failed:\n{}", .report.to_table())]
pub struct ValidationError {
    pub report: ValidationReport,
}

/// Levels of the ladder sampled during validation.
const GRID_LEVELS: u32 = 12;

/// Interior grid used by the validation probes: dense near `x0`, and a
/// fixed number of points between consecutive localization levels.
pub fn validation_grid(i: &StateInterval) -> Vec<f64> {
    let mut pts = vec![i.x0];
    let mut levels = vec![(i.x0, i.x0)];
    for k in 1..=GRID_LEVELS {
        let (l, r) = i.level(k);
        if !(i.lower < l && r < i.upper) {
            break;
        }
        levels.push((l, r));
    }
    for w in levels.windows(2) {
        let ((pl, pr), (l, r)) = (w[0], w[1]);
        let per = if pl == pr { 64 } else { 16 };
        for s in 1..=per {
            let t = s as f64 / per as f64;
            pts.push(pl + (l - pl) * t);
            pts.push(pr + (r - pr) * t);
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

fn sample(e: &Expr, grid: &[f64]) -> Result<Vec<f64>, String> {
    e.differentiable_sample(grid)
        .map_err(|err| format!("at x = {}: {}", grid[err.index], err.source))
}

/// Heuristic Hölder-1/2 modulus of `e` on `[a, b]`: the ratio
/// `max |e(x') - e(x)| / sqrt|x' - x|` over neighbouring points of a uniform
/// grid, computed at two resolutions. A bounded modulus stays flat or
/// shrinks under refinement.
pub fn holder_half_probe(e: &Expr, a: f64, b: f64) -> Result<(f64, f64), String> {
    let ratio = |n: usize| -> Result<f64, String> {
        let grid: Vec<f64> = (0..=n).map(|k| a + (b - a) * k as f64 / n as f64).collect();
        let v = sample(e, &grid)?;
        let h = ((b - a) / n as f64).sqrt();
        Ok(v.windows(2)
            .map(|w| (w[1] - w[0]).abs() / h)
            .fold(0.0, f64::max))
    };
    Ok((ratio(256)?, ratio(4096)?))
}

fn holder_verdict(coarse: f64, fine: f64) -> bool {
    fine <= 2.0 * coarse.max(1e-300) || fine < 1e-12
}

fn sign_change(v: &[f64]) -> Option<usize> {
    v.windows(2).position(|w| w[0].signum() != w[1].signum())
}

pub fn validate(m: &MarketModel) -> Result<ValidationReport, ValidationError> {
    let mut r = ValidationReport::default();
    let interval = m.interval();
    r.check(
        "interval",
        StateInterval::new(interval.lower, interval.upper, interval.x0)
            .map(|i| format!("{i}"))
            .map_err(|e| e.to_string()),
    );
    r.check(
        "localization_nesting",
        interval
            .localization_ladder(GRID_LEVELS)
            .map(|_| format!("strictly nested to depth {GRID_LEVELS}"))
            .map_err(|e| e.to_string()),
    );
    let h = m.horizon();
    r.check(
        "horizon",
        if h.is_finite() && h > 0.0 {
            Ok(format!("T = {h}"))
        } else {
            Err(format!("T = {h} must be finite and positive"))
        },
    );
    let grid = validation_grid(interval);
    match m {
        MarketModel::SwitchingDiffusion(sm) => validate_switching(sm, &grid, &mut r),
        MarketModel::StochasticExponentialIto(im) => validate_ito(im, &grid, &mut r),
    }
    if r.passed() {
        Ok(r)
    } else {
        Err(ValidationError { report: r })
    }
}

fn validate_switching(m: &SwitchingModel, grid: &[f64], r: &mut ValidationReport) {
    let n = m.n();
    r.check(
        "regimes",
        if m.b.len() == n && m.sigma.len() == n && m.regimes.count == n && m.regimes.initial < n {
            Ok(format!("N = {n}, initial regime {}", m.regimes.initial + 1))
        } else {
            Err("regime count, coefficient lists and Q disagree".into())
        },
    );
    if let Some(c) = &m.c {
        if c.len() != n {
            r.check(
                "kernel",
                Err(format!("{} kernel expressions for {n} regimes", c.len())),
            );
        }
    }
    r.check("q_row_sums", {
        let e = m.q.max_abs_row_sum();
        if e <= ROW_SUM_TOL * (1.0 + m.q.rows().iter().flatten().map(|v| v.abs()).sum::<f64>()) {
            Ok(format!("max |row sum| = {e:e}"))
        } else {
            Err(format!("max |row sum| = {e:e}"))
        }
    });
    let irreducible = m.q.is_irreducible();
    r.push(
        "q_irreducible",
        if irreducible {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        if irreducible {
            "rate graph strongly connected"
        } else {
            "rate graph not strongly connected; recurrence must be attested"
        },
        false,
    );
    r.check(
        "p0",
        if m.interval.contains(m.p0) {
            Ok(format!("p0 = {}", m.p0))
        } else {
            Err(format!("p0 = {} outside the state interval", m.p0))
        },
    );
    if !r.passed() {
        return;
    }
    let kernel = m.kernel();
    for j in 0..n {
        let label = m.regimes.label(j);
        r.check(
            format!("sigma_nonzero[{label}]"),
            sample(&m.sigma[j], grid).and_then(|v| {
                if let Some(k) = v.iter().position(|s| *s == 0.0) {
                    return Err(format!("σ vanishes at x = {}", grid[k]));
                }
                if let Some(k) = sign_change(&v) {
                    return Err(format!(
                        "σ changes sign between {} and {}",
                        grid[k],
                        grid[k + 1]
                    ));
                }
                Ok(format!("non-zero on {} grid points", grid.len()))
            }),
        );
        r.check(
            format!("local_integrability[{label}]"),
            local_integrability(&m.b[j], &m.sigma[j], &m.interval),
        );
        r.check(
            format!("kernel_evaluable[{label}]"),
            sample(&kernel[j], grid).map(|_| "c/σ evaluable on grid".to_string()),
        );
        let (l, hi) = m.interval.level(4);
        match holder_half_probe(&m.sigma[j], l, hi) {
            Ok((c, f)) => r.push(
                format!("es_probe[{label}]"),
                if holder_verdict(c, f) {
                    CheckStatus::HeuristicPass
                } else {
                    CheckStatus::HeuristicFail
                },
                format!("Hölder-1/2 ratio {c:.3e} -> {f:.3e} under 16x refinement on [{l}, {hi}]"),
                false,
            ),
            Err(e) => r.push(
                format!("es_probe[{label}]"),
                CheckStatus::HeuristicFail,
                e,
                false,
            ),
        }
    }
}

/// Evaluates `(1 + |b|)/σ²` on compact sub-grids of the first levels.
fn local_integrability(b: &Expr, s: &Expr, i: &StateInterval) -> Result<String, String> {
    let mut total = 0.0;
    for k in 1..=6 {
        let (l, r) = i.level(k);
        let n = 512;
        let h = (r - l) / n as f64;
        for t in 0..=n {
            let x = l + h * t as f64;
            let bv = b.eval(x).map_err(|e| e.to_string())?;
            let sv = s.eval(x).map_err(|e| e.to_string())?;
            let v = (1.0 + bv.abs()) / (sv * sv);
            if !v.is_finite() {
                return Err(format!("(1 + |b|)/σ² not finite at x = {x}"));
            }
            total += v * h;
        }
    }
    Ok(format!(
        "finite Riemann sums on 6 compact levels (sum {total:.3e})"
    ))
}

fn validate_ito(m: &ItoEnvelopeModel, grid: &[f64], r: &mut ValidationReport) {
    let positive = |name: &str, e: &Expr| -> Result<Vec<f64>, String> {
        let v = sample(e, grid)?;
        if let Some(k) = v.iter().position(|a| *a <= 0.0) {
            return Err(format!(
                "{name} = {} is not positive at x = {}",
                v[k], grid[k]
            ));
        }
        Ok(v)
    };
    let upper = positive("ā", &m.upper_a);
    r.check(
        "upper_a_positive",
        upper.clone().map(|_| "ā > 0 on grid".to_string()),
    );
    if let Some(la) = &m.lower_a {
        let lower = positive("a̲", la);
        r.check(
            "lower_a_positive",
            lower.clone().map(|_| "a̲ > 0 on grid".to_string()),
        );
        if let (Ok(u), Ok(l)) = (&upper, &lower) {
            r.check(
                "lower_a_below_upper_a",
                match l.iter().zip(u).position(|(a, b)| a > b) {
                    None => Ok("a̲ ≤ ā on grid".into()),
                    Some(k) => Err(format!("a̲ > ā at x = {}", grid[k])),
                },
            );
        }
    }
    for (name, e) in [("upper_u", &m.upper_u), ("lower_u", &m.lower_u)] {
        if let Some(e) = e {
            r.check(
                format!("{name}_evaluable"),
                sample(e, grid).map(|_| "evaluable on grid".to_string()),
            );
        }
    }
    let tgrid: Vec<f64> = (0..=256).map(|k| m.horizon * k as f64 / 256.0).collect();
    r.check(
        "zeta_nonnegative",
        sample(&m.zeta, &tgrid).and_then(|v| match v.iter().position(|z| *z < 0.0) {
            None => Ok("ζ ≥ 0 on [0, T]".into()),
            Some(k) => Err(format!("ζ < 0 at t = {}", tgrid[k])),
        }),
    );
    r.check(
        "s0",
        if m.interval.contains(m.s0) {
            Ok(format!("s0 = {}", m.s0))
        } else {
            Err(format!("s0 = {} outside the state interval", m.s0))
        },
    );
}

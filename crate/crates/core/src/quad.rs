//! Scale integrals and boundary convergence classification.
//!
//! For a drift-ratio function `f` and a positive scale function `g` on an
//! interval `I` with reference point `x0`,
//!
//! ```text
//! v(f, g)(x) = ∫_{x0}^x exp(-∫_{x0}^y 2f) ∫_{x0}^y 2 exp(∫_{x0}^u 2f) / g(u) du dy.
//! ```
//!
//! `v` is evaluated as the solution of the linear system
//! `H' = 2/g - 2 f H`, `v' = H`, `H(x0) = v(x0) = 0`, integrated with an
//! L-stable three-stage Radau IIA scheme under step-doubling error control.
//! Boundary limits are classified by following `v` (or a single integral)
//! along a geometric ladder of cutoffs and inspecting the tail increments.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::expr::{self, Compiled, EvalError, Expr};
use crate::model::{StateInterval, SwitchingModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadError {
    #[error(transparent)]
    Domain(#[from] EvalError),
    #[error("scale function is not positive at x = {x} (g = {value})")]
    NonPositiveScale { x: f64, value: f64 },
    #[error("quadrature tolerance not met near x = {x} within {steps} steps")]
    QuadratureFailure { x: f64, steps: usize },
    #[error("point {x} is outside the state interval")]
    OutsideInterval { x: f64 },
    #[error("{0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Convergence {
    Divergent,
    Convergent,
    Undetermined,
}

/// Knobs of the boundary classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadConfig {
    /// Number of ladder rungs toward the boundary.
    pub depth: u32,
    /// Partial values above this threshold with monotone growth are divergent.
    pub divergence_threshold: f64,
    /// Relative Cauchy tolerance over the last three rungs.
    pub cauchy_tol: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Tail increments whose log2-ratio stays above `-growth_tol` are divergent.
    pub growth_tol: f64,
    /// Tail increments whose log2-ratio stays below `-decay_margin` are convergent.
    pub decay_margin: f64,
    pub max_steps: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig {
            depth: 24,
            divergence_threshold: 1e6,
            cauchy_tol: 1e-6,
            rel_tol: 1e-9,
            abs_tol: 1e-9,
            growth_tol: 1e-4,
            decay_margin: 0.015,
            max_steps: 200_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LadderPoint {
    pub cutoff: f64,
    pub partial: f64,
}

/// Least-squares slope of `ln(partial)` against `ln(distance)`, reported as
/// a diagnostic only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryVerdict {
    pub status: Convergence,
    pub boundary: Boundary,
    /// Last partial value computed.
    pub estimate: f64,
    pub cutoffs: Vec<LadderPoint>,
    pub exponent_fit: Option<ExponentFit>,
    /// Which rule produced the status.
    pub reason: String,
}

impl BoundaryVerdict {
    fn decided(status: Convergence, boundary: Boundary, reason: impl Into<String>) -> Self {
        BoundaryVerdict {
            status,
            boundary,
            estimate: f64::INFINITY,
            cutoffs: Vec::new(),
            exponent_fit: None,
            reason: reason.into(),
        }
    }

    /// `cutoff,partial` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cutoff,partial\n");
        for p in &self.cutoffs {
            let _ = writeln!(s, "{},{}", p.cutoff, p.partial);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleIntegrand {
    pub f: Expr,
    pub g: Expr,
    pub interval: StateInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VTestResult {
    pub at_upper: BoundaryVerdict,
    pub at_lower: BoundaryVerdict,
    pub x0_used: f64,
}

// ---------------------------------------------------------------------------
// Ladders

/// Cutoff points `s = 1..=depth` toward a boundary.
pub fn ladder(i: &StateInterval, which: Boundary, depth: u32) -> Vec<f64> {
    let x0 = i.x0;
    let b = match which {
        Boundary::Lower => i.lower,
        Boundary::Upper => i.upper,
    };
    (1..=depth)
        .map(|s| {
            let p = (s as f64).exp2();
            if b.is_finite() {
                x0 + (b - x0) * (1.0 - 1.0 / p)
            } else if which == Boundary::Upper && x0 > 0.0 || which == Boundary::Lower && x0 < 0.0 {
                x0 * p
            } else if which == Boundary::Upper {
                x0 + p
            } else {
                x0 - p
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Radau IIA solver for v

const SQ6: f64 = 2.449_489_742_783_178;

struct Radau {
    c: [f64; 3],
    a: [[f64; 3]; 3],
}

const RADAU: Radau = Radau {
    c: [(4.0 - SQ6) / 10.0, (4.0 + SQ6) / 10.0, 1.0],
    a: [
        [
            (88.0 - 7.0 * SQ6) / 360.0,
            (296.0 - 169.0 * SQ6) / 1800.0,
            (-2.0 + 3.0 * SQ6) / 225.0,
        ],
        [
            (296.0 + 169.0 * SQ6) / 1800.0,
            (88.0 + 7.0 * SQ6) / 360.0,
            (-2.0 - 3.0 * SQ6) / 225.0,
        ],
        [(16.0 - SQ6) / 36.0, (16.0 + SQ6) / 36.0, 1.0 / 9.0],
    ],
};

fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut y = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = r[row];
        for k in row + 1..3 {
            s -= m[row][k] * y[k];
        }
        y[row] = s / m[row][row];
    }
    y
}

/// Integrates `(H, v)` from `x0` outward, in either direction.
struct VSolver<'a> {
    f: Compiled,
    g: Compiled,
    cfg: &'a QuadConfig,
    x: f64,
    h_state: f64,
    v: f64,
    step: f64,
    steps: usize,
}

const OVERFLOW: f64 = 1e300;

impl<'a> VSolver<'a> {
    fn new(si: &ScaleIntegrand, cfg: &'a QuadConfig) -> Self {
        VSolver {
            f: si.f.compile(),
            g: si.g.compile(),
            cfg,
            x: si.interval.x0,
            h_state: 0.0,
            v: 0.0,
            step: 0.0,
            steps: 0,
        }
    }

    fn coeffs(&self, x: f64) -> Result<(f64, f64), QuadError> {
        let g = self.g.eval(x)?;
        if g <= 0.0 {
            return Err(QuadError::NonPositiveScale { x, value: g });
        }
        Ok((-2.0 * self.f.eval(x)?, 2.0 / g))
    }

    fn radau_step(&self, x: f64, hs: f64, v: f64, h: f64) -> Result<(f64, f64), QuadError> {
        let mut lam = [0.0; 3];
        let mut src = [0.0; 3];
        for i in 0..3 {
            let (l, s) = self.coeffs(x + RADAU.c[i] * h)?;
            lam[i] = l;
            src[i] = s;
        }
        let mut m = [[0.0; 3]; 3];
        let mut r = [hs; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = if i == j { 1.0 } else { 0.0 } - h * RADAU.a[i][j] * lam[j];
                r[i] += h * RADAU.a[i][j] * src[j];
            }
        }
        let y = solve3(m, r);
        let dv: f64 = (0..3).map(|j| RADAU.a[2][j] * y[j]).sum();
        Ok((y[2], v + h * dv))
    }

    /// Advances to `target`. Returns `false` once the solution overflows.
    fn advance_to(&mut self, target: f64) -> Result<bool, QuadError> {
        let dir = (target - self.x).signum();
        if self.step == 0.0 || self.step.signum() != dir {
            let span = (target - self.x).abs().max(1e-12);
            self.step = dir * span / 16.0;
        }
        while (target - self.x) * dir > 0.0 {
            let remaining = target - self.x;
            let last = self.step.abs() >= remaining.abs();
            let h = if last { remaining } else { self.step };
            let (h1, v1) = self.radau_step(self.x, self.h_state, self.v, h)?;
            let (hm, vm) = self.radau_step(self.x, self.h_state, self.v, h / 2.0)?;
            let (h2, v2) = self.radau_step(self.x + h / 2.0, hm, vm, h / 2.0)?;
            let sc = |a: f64, b: f64| self.cfg.abs_tol + self.cfg.rel_tol * a.abs().max(b.abs());
            let err =
                ((h2 - h1).abs() / sc(h2, self.h_state)).max((v2 - v1).abs() / sc(v2, self.v));
            self.steps += 1;
            if self.steps > self.cfg.max_steps {
                return Err(QuadError::QuadratureFailure {
                    x: self.x,
                    steps: self.steps,
                });
            }
            if !err.is_finite() {
                if !h2.is_finite() || !v2.is_finite() {
                    return Ok(false);
                }
                self.step = h / 8.0;
                continue;
            }
            if err <= 1.0 {
                self.x = if last { target } else { self.x + h };
                self.h_state = h2;
                self.v = v2;
                if self.v.abs() > OVERFLOW || self.h_state.abs() > OVERFLOW {
                    return Ok(false);
                }
                let grow = if err == 0.0 {
                    4.0
                } else {
                    (0.9 * err.powf(-1.0 / 6.0)).min(4.0)
                };
                if !last {
                    self.step = h * grow;
                }
            } else {
                self.step = h * (0.9 * err.powf(-1.0 / 6.0)).max(0.1);
                if self.step.abs() < 1e-15 * self.x.abs().max(1e-300) {
                    return Err(QuadError::QuadratureFailure {
                        x: self.x,
                        steps: self.steps,
                    });
                }
            }
        }
        Ok(true)
    }
}

/// Value of the scale integral `v(f, g)` at `x`.
pub fn v_value(si: &ScaleIntegrand, x: f64) -> Result<f64, QuadError> {
    v_value_with(si, x, &QuadConfig::default())
}

pub fn v_value_with(si: &ScaleIntegrand, x: f64, cfg: &QuadConfig) -> Result<f64, QuadError> {
    if !si.interval.contains(x) {
        return Err(QuadError::OutsideInterval { x });
    }
    let mut s = VSolver::new(si, cfg);
    if x == si.interval.x0 {
        return Ok(0.0);
    }
    if s.advance_to(x)? {
        Ok(s.v)
    } else {
        Ok(f64::INFINITY)
    }
}

// ---------------------------------------------------------------------------
// Adaptive Gauss–Kronrod (7, 15)

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> Result<f64, QuadError>>(
    f: &F,
    a: f64,
    b: f64,
) -> Result<(f64, f64), QuadError> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let d = h * XGK[i];
        let s = f(c - d)? + f(c + d)?;
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    Ok((k * h, ((k - g) * h).abs()))
}

/// Adaptive integral of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> Result<f64, QuadError>>(
    f: &F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<f64, QuadError> {
    fn rec<F: Fn(f64) -> Result<f64, QuadError>>(
        f: &F,
        a: f64,
        b: f64,
        whole: (f64, f64),
        tol: f64,
        depth: u32,
    ) -> Result<f64, QuadError> {
        let (val, err) = whole;
        if err <= tol || depth == 0 {
            if err > tol && err > 1e3 * tol {
                return Err(QuadError::QuadratureFailure {
                    x: 0.5 * (a + b),
                    steps: 60,
                });
            }
            return Ok(val);
        }
        let m = 0.5 * (a + b);
        let l = gk15(f, a, m)?;
        let r = gk15(f, m, b)?;
        Ok(rec(f, a, m, l, tol / 2f64.sqrt(), depth - 1)?
            + rec(f, m, b, r, tol / 2f64.sqrt(), depth - 1)?)
    }
    let whole = gk15(f, a, b)?;
    let tol = abs_tol.max(rel_tol * whole.0.abs());
    rec(f, a, b, whole, tol, 50)
}

// ---------------------------------------------------------------------------
// Tail classification

const FIT_WINDOW: usize = 8;

fn exponent_fit(points: &[LadderPoint], x0: f64, boundary: f64) -> Option<ExponentFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .rev()
        .take(FIT_WINDOW)
        .filter(|p| p.partial > 0.0 && p.partial.is_finite())
        .map(|p| {
            let d = if boundary.is_finite() {
                (boundary - p.cutoff).abs()
            } else {
                (p.cutoff - x0).abs()
            };
            (d.ln(), p.partial.ln())
        })
        .collect();
    let (slope, _, residual) = linfit(&pts)?;
    Some(ExponentFit { slope, residual })
}

/// Least squares `y = a + s x`; returns `(s, a, rms residual)`.
fn linfit(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = pts.len() as f64;
    if pts.len() < 3 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let s = sxy / sxx;
    let a = my - s * mx;
    let res = (pts.iter().map(|p| (p.1 - a - s * p.0).powi(2)).sum::<f64>() / n).sqrt();
    Some((s, a, res))
}

/// Applies the status rules to partial values along a ladder.
///
/// Rules, in order:
/// 1. Overflow or a partial above the divergence threshold, with strictly
///    increasing partials, is `Divergent`.
/// 2. Relative increments below the Cauchy tolerance on the last three rungs
///    give `Convergent`.
/// 3. Non-monotone tails are `Undetermined`.
/// 4. Otherwise the log2-ratios `λ_k` of consecutive increments over the last
///    rungs are examined. A stable `λ ≥ -growth_tol` means the increments do
///    not decay (`Divergent`); a stable `λ ≤ -decay_margin`, or a decay that
///    accelerates, means geometric decay (`Convergent`). When the decay slows
///    down, the increments are fitted as `Δ_k ∝ k^-q` (logarithmic tails):
///    `q ≥ 1.25` is `Convergent`, `q ≤ 1.05` is `Divergent`.
/// 5. Anything else is `Undetermined`.
fn classify_tail(partials: &[f64], overflowed: bool, cfg: &QuadConfig) -> (Convergence, String) {
    use Convergence::*;
    let inc: Vec<f64> = std::iter::once(partials[0])
        .chain(partials.windows(2).map(|w| w[1] - w[0]))
        .collect();
    let monotone = inc.iter().all(|d| *d > 0.0);
    let last = *partials.last().unwrap();
    if overflowed && monotone {
        return (
            Divergent,
            "partial values overflow with monotone growth".into(),
        );
    }
    if monotone && last > cfg.divergence_threshold {
        return (
            Divergent,
            format!(
                "partial {last:.4e} exceeds threshold {:.1e} with monotone growth",
                cfg.divergence_threshold
            ),
        );
    }
    let n = partials.len();
    if n >= 4 {
        let cauchy = (n - 3..n).all(|k| (inc[k] / partials[k]).abs() < cfg.cauchy_tol);
        if cauchy && last.is_finite() {
            return (
                Convergent,
                format!(
                    "relative increments below {:.0e} on the last 3 rungs",
                    cfg.cauchy_tol
                ),
            );
        }
    }
    let w = FIT_WINDOW.min(n);
    if w < 4 {
        return (Undetermined, "ladder too short for a tail fit".into());
    }
    let tail = &inc[n - w..];
    if !tail.iter().all(|d| *d > 0.0) {
        return (
            Undetermined,
            "increments change sign in the tail (oscillation)".into(),
        );
    }
    let lam: Vec<f64> = tail.windows(2).map(|p| (p[1] / p[0]).log2()).collect();
    let lmean = lam.iter().sum::<f64>() / lam.len() as f64;
    let (lmin, lmax) = lam
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let stable = lmax - lmin <= 0.1 * lmean.abs() + cfg.growth_tol;
    if stable {
        if lmean >= -cfg.growth_tol {
            return (
                Divergent,
                format!("tail increments do not decay (log2 ratio {lmean:.4})"),
            );
        }
        if lmean <= -cfg.decay_margin {
            return (
                Convergent,
                format!("geometric tail decay (log2 ratio {lmean:.4})"),
            );
        }
        return (
            Undetermined,
            format!("tail log2 ratio {lmean:.4} within the undecidable band"),
        );
    }
    if lmin >= -cfg.growth_tol {
        return (
            Divergent,
            format!("tail increments grow (log2 ratios {lmin:.4}..{lmax:.4})"),
        );
    }
    let first = lam[0];
    let last_l = *lam.last().unwrap();
    if last_l <= first && last_l <= -cfg.decay_margin {
        return (
            Convergent,
            format!("accelerating tail decay (log2 ratio down to {last_l:.4})"),
        );
    }
    // decay slows down: logarithmic tail Δ_k ∝ k^-q
    let pts: Vec<(f64, f64)> = (n - w..n)
        .map(|k| (((k + 1) as f64).ln(), inc[k].ln()))
        .collect();
    if let Some((s, _, _)) = linfit(&pts) {
        let q = -s;
        if q >= 1.25 {
            return (
                Convergent,
                format!("logarithmic tail with exponent q = {q:.3} > 1"),
            );
        }
        if q <= 1.05 {
            return (
                Divergent,
                format!("logarithmic tail with exponent q = {q:.3} ≤ 1"),
            );
        }
        return (
            Undetermined,
            format!("logarithmic tail exponent q = {q:.3} near 1"),
        );
    }
    (Undetermined, "no stable tail model".into())
}

fn verdict_from(
    partials: Vec<(f64, f64)>,
    overflowed: bool,
    which: Boundary,
    i: &StateInterval,
    cfg: &QuadConfig,
) -> BoundaryVerdict {
    let b = match which {
        Boundary::Lower => i.lower,
        Boundary::Upper => i.upper,
    };
    let cutoffs: Vec<LadderPoint> = partials
        .iter()
        .map(|&(cutoff, partial)| LadderPoint { cutoff, partial })
        .collect();
    let values: Vec<f64> = partials.iter().map(|p| p.1).collect();
    let (status, reason) = if values.is_empty() {
        if overflowed {
            (
                Convergence::Divergent,
                "overflow before the first rung".to_string(),
            )
        } else {
            (Convergence::Undetermined, "no rungs evaluated".to_string())
        }
    } else {
        classify_tail(&values, overflowed, cfg)
    };
    BoundaryVerdict {
        status,
        boundary: which,
        estimate: if overflowed {
            f64::INFINITY
        } else {
            values.last().copied().unwrap_or(0.0)
        },
        exponent_fit: exponent_fit(&cutoffs, i.x0, b),
        cutoffs,
        reason,
    }
}

/// Classifies `lim v(f, g)(x)` as `x` tends to the given boundary.
pub fn classify_boundary(
    si: &ScaleIntegrand,
    which: Boundary,
) -> Result<BoundaryVerdict, QuadError> {
    classify_boundary_with(si, which, &QuadConfig::default())
}

pub fn classify_boundary_with(
    si: &ScaleIntegrand,
    which: Boundary,
    cfg: &QuadConfig,
) -> Result<BoundaryVerdict, QuadError> {
    let mut solver = VSolver::new(si, cfg);
    let mut partials = Vec::new();
    let mut overflowed = false;
    for x in ladder(&si.interval, which, cfg.depth) {
        if !solver.advance_to(x)? {
            overflowed = true;
            break;
        }
        partials.push((x, solver.v));
        let monotone = partials.windows(2).all(|w| w[1].1 > w[0].1);
        if monotone && solver.v > cfg.divergence_threshold {
            break;
        }
    }
    Ok(verdict_from(partials, overflowed, which, &si.interval, cfg))
}

/// Both boundary limits of `v(f, g)`, evaluated concurrently.
pub fn v_test(si: &ScaleIntegrand, cfg: &QuadConfig) -> Result<VTestResult, QuadError> {
    let (up, lo) = rayon::join(
        || classify_boundary_with(si, Boundary::Upper, cfg),
        || classify_boundary_with(si, Boundary::Lower, cfg),
    );
    Ok(VTestResult {
        at_upper: up?,
        at_lower: lo?,
        x0_used: si.interval.x0,
    })
}

/// Classifies a single improper integral `∫ w(u) du` from `x0` toward a
/// boundary, with `w ≥ 0`.
pub fn classify_single<F: Fn(f64) -> Result<f64, QuadError> + Sync>(
    w: F,
    interval: &StateInterval,
    which: Boundary,
    cfg: &QuadConfig,
) -> Result<BoundaryVerdict, QuadError> {
    let mut partials = Vec::new();
    let mut acc = 0.0;
    let mut prev = interval.x0;
    let mut overflowed = false;
    for x in ladder(interval, which, cfg.depth) {
        let (a, b) = if x > prev { (prev, x) } else { (x, prev) };
        let piece = integrate(&w, a, b, cfg.rel_tol * 1e-1, cfg.abs_tol * 1e-3)?;
        acc += piece;
        prev = x;
        if !acc.is_finite() || acc > OVERFLOW {
            overflowed = true;
            break;
        }
        partials.push((x, acc));
        let monotone = partials.windows(2).all(|w| w[1].1 > w[0].1);
        if monotone && acc > cfg.divergence_threshold {
            break;
        }
    }
    Ok(verdict_from(partials, overflowed, which, interval, cfg))
}

/// The limit of `v(1, a)` at a boundary, reduced by Fubini to one integral:
/// `∫ du/a(u)` toward `+∞`, `∫ |u - B| / a(u) du` toward a finite boundary
/// `B`, and always infinite toward `-∞`.
pub fn reduced_const_u_test(
    a: &Expr,
    interval: &StateInterval,
    which: Boundary,
    cfg: &QuadConfig,
) -> Result<BoundaryVerdict, QuadError> {
    let b = match which {
        Boundary::Lower => interval.lower,
        Boundary::Upper => interval.upper,
    };
    if b == f64::NEG_INFINITY {
        return Ok(BoundaryVerdict::decided(
            Convergence::Divergent,
            which,
            "exp(-2y) is not integrable toward -∞",
        ));
    }
    let a = a.compile();
    let positive = |x: f64| -> Result<f64, QuadError> {
        let v = a.eval(x)?;
        if v <= 0.0 {
            return Err(QuadError::NonPositiveScale { x, value: v });
        }
        Ok(v)
    };
    if b.is_infinite() {
        classify_single(|u| Ok(1.0 / positive(u)?), interval, which, cfg)
    } else {
        classify_single(|u| Ok((u - b).abs() / positive(u)?), interval, which, cfg)
    }
}

/// Feller-type price test: `∫ z/σ²(z, j) dz` toward 0 (on `(0, 1]`) or toward
/// `∞` (on `[1, ∞)`). The model must live on `(0, ∞)`.
pub fn feller_price_test(
    m: &SwitchingModel,
    j: usize,
    which: Boundary,
    cfg: &QuadConfig,
) -> Result<BoundaryVerdict, QuadError> {
    if m.interval.lower != 0.0 || m.interval.upper != f64::INFINITY {
        return Err(QuadError::Unsupported(format!(
            "the price test needs the state interval (0, ∞), got {}",
            m.interval
        )));
    }
    let sigma = m.sigma[j].compile();
    let interval = StateInterval::positive();
    classify_single(
        |z| {
            let s = sigma.eval(z)?;
            if s == 0.0 {
                return Err(QuadError::NonPositiveScale { x: z, value: 0.0 });
            }
            Ok(z / (s * s))
        },
        &interval,
        which,
        cfg,
    )
}

/// The switching scale integrand of regime `j`: drift ratio
/// `(b + cσ)/σ²` and scale `σ²`, with the model's kernel `c`.
pub fn switching_integrand(m: &SwitchingModel, j: usize) -> ScaleIntegrand {
    let c = m.kernel();
    let s = m.sigma[j].clone();
    let drift = expr::add(m.b[j].clone(), expr::mul(c[j].clone(), s.clone()));
    let g = expr::pow(s, expr::num(2.0));
    ScaleIntegrand {
        f: expr::div(drift, g.clone()),
        g,
        interval: m.interval,
    }
}

/// Both boundary limits of the switching scale integral for regime `j`.
pub fn general_v_switching(
    m: &SwitchingModel,
    j: usize,
    cfg: &QuadConfig,
) -> Result<VTestResult, QuadError> {
    v_test(&switching_integrand(m, j), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn si(f: &str, g: &str, i: StateInterval) -> ScaleIntegrand {
        ScaleIntegrand {
            f: parse(f).unwrap(),
            g: parse(g).unwrap(),
            interval: i,
        }
    }

    /// Brute-force nested trapezoid sums, independent of the ODE route.
    fn riemann_v(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, x0: f64, x: f64, n: usize) -> f64 {
        let h = (x - x0) / n as f64;
        let ys: Vec<f64> = (0..=n).map(|k| x0 + h * k as f64).collect();
        let mut big_f = vec![0.0; n + 1];
        for k in 1..=n {
            big_f[k] = big_f[k - 1] + h * (f(ys[k - 1]) + f(ys[k]));
        }
        let mut inner = vec![0.0; n + 1];
        for k in 1..=n {
            let a = 2.0 * big_f[k - 1].exp() / g(ys[k - 1]);
            let b = 2.0 * big_f[k].exp() / g(ys[k]);
            inner[k] = inner[k - 1] + 0.5 * h * (a + b);
        }
        (1..=n)
            .map(|k| {
                0.5 * h * ((-big_f[k - 1]).exp() * inner[k - 1] + (-big_f[k]).exp() * inner[k])
            })
            .sum()
    }

    #[test]
    fn v_of_zero_drift_unit_scale_is_square() {
        let s = si("0", "1", StateInterval::real_line());
        for x in [-3.0, -0.5, 0.5, 1.0, 2.0, 10.0] {
            let v = v_value(&s, x).unwrap();
            assert!((v - x * x).abs() <= 1e-9 * x * x, "x = {x}: {v}");
        }
    }

    #[test]
    fn v_of_unit_drift_closed_form() {
        let s = si("1", "1", StateInterval::real_line());
        for x in [0.5f64, 1.0, 2.0] {
            let want = x - (1.0 - (-2.0 * x).exp()) / 2.0;
            let v = v_value(&s, x).unwrap();
            assert!((v - want).abs() < 1e-9, "x = {x}: {v} vs {want}");
            let rs = riemann_v(|_| 1.0, |_| 1.0, 0.0, x, 200_000);
            assert!((rs - want).abs() < 1e-6);
        }
    }

    #[test]
    fn cev_v_matches_riemann_oracle() {
        let s = si("0", "x^2", StateInterval::positive());
        let v = v_value(&s, 2.0).unwrap();
        let oracle = riemann_v(|_| 0.0, |z| z * z, 1.0, 2.0, 400_000);
        assert!((v - oracle).abs() < 1e-6, "{v} vs {oracle}");
        // closed form 2(x - 1) - 2 ln x
        assert!(
            (v - 2.0 * (1.0 - 2f64.ln())).abs() < 1e-9,
            "{}",
            v - 2.0 * (1.0 - 2f64.ln())
        );
    }

    #[test]
    fn v_is_nondecreasing_right_of_reference() {
        let s = si("abs(x) - 1", "1 + x^2", StateInterval::real_line());
        let mut prev = 0.0;
        for k in 1..60 {
            let v = v_value(&s, 0.1 * k as f64).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn unit_scale_on_real_line_diverges() {
        let s = si("0", "1", StateInterval::real_line());
        let v = classify_boundary(&s, Boundary::Upper).unwrap();
        assert_eq!(v.status, Convergence::Divergent);
    }

    #[test]
    fn constant_drift_quadratic_scale_converges() {
        let s = si("1", "x^2", StateInterval::positive());
        assert_eq!(
            classify_boundary(&s, Boundary::Upper).unwrap().status,
            Convergence::Convergent
        );
    }

    #[test]
    fn cev_scale_boundary_examples() {
        // The CEV pattern (β = 1.5 convergent, β = 1 divergent) belongs to the
        // price drift ratio 1/x; with f ≡ 1 the limit is ∫ dz/z^{2β}, finite
        // for every β > 1/2.
        let s = si("1/x", "x^(2*1.5)", StateInterval::positive());
        assert_eq!(
            classify_boundary(&s, Boundary::Upper).unwrap().status,
            Convergence::Convergent
        );
        let s = si("1/x", "x^(2*1.0)", StateInterval::positive());
        assert_eq!(
            classify_boundary(&s, Boundary::Upper).unwrap().status,
            Convergence::Divergent
        );
        let s = si("1", "x^(2*1.0)", StateInterval::positive());
        assert_eq!(
            classify_boundary(&s, Boundary::Upper).unwrap().status,
            Convergence::Convergent
        );
        let s = si("1", "x^(2*0.5)", StateInterval::positive());
        assert_eq!(
            classify_boundary(&s, Boundary::Upper).unwrap().status,
            Convergence::Divergent
        );
    }

    #[test]
    fn reduced_examples() {
        let cfg = QuadConfig::default();
        let i = StateInterval::positive();
        let t = |a: &str| {
            reduced_const_u_test(&parse(a).unwrap(), &i, Boundary::Upper, &cfg)
                .unwrap()
                .status
        };
        assert_eq!(t("x^2"), Convergence::Convergent);
        assert_eq!(t("x"), Convergence::Divergent);
        assert_eq!(t("x*log(1+x)^2"), Convergence::Convergent);
        assert_eq!(t("x*log(1+x)"), Convergence::Divergent);
    }

    #[test]
    fn log_squared_partials_match_antiderivative() {
        // ∫ du/(u log(1+u)^2) has no elementary antiderivative; the pure
        // u log(u)^2 version does: -1/log u.
        let cfg = QuadConfig::default();
        let i = StateInterval::new(0.0, f64::INFINITY, 2.0).unwrap();
        let v =
            reduced_const_u_test(&parse("x*log(x)^2").unwrap(), &i, Boundary::Upper, &cfg).unwrap();
        assert_eq!(v.status, Convergence::Convergent);
        for p in &v.cutoffs {
            let exact = 1.0 / 2f64.ln() - 1.0 / p.cutoff.ln();
            assert!((p.partial - exact).abs() < 1e-9 * exact.abs().max(1.0));
        }
    }

    #[test]
    fn feller_examples() {
        let cfg = QuadConfig::default();
        let m = SwitchingModel::cev(&[1.0, 1.5, 0.5]);
        assert_eq!(
            feller_price_test(&m, 0, Boundary::Lower, &cfg)
                .unwrap()
                .status,
            Convergence::Divergent
        );
        assert_eq!(
            feller_price_test(&m, 0, Boundary::Upper, &cfg)
                .unwrap()
                .status,
            Convergence::Divergent
        );
        assert_eq!(
            feller_price_test(&m, 1, Boundary::Upper, &cfg)
                .unwrap()
                .status,
            Convergence::Convergent
        );
        let low = feller_price_test(&m, 2, Boundary::Lower, &cfg).unwrap();
        assert_eq!(low.status, Convergence::Convergent);
        assert!((low.estimate - 1.0).abs() < 1e-6);
    }

    #[test]
    fn switching_v_examples() {
        let cfg = QuadConfig::default();
        let mut m = SwitchingModel::cev(&[1.0]);
        m.c = Some(vec![parse("0").unwrap()]);
        let r = general_v_switching(&m, 0, &cfg).unwrap();
        assert_eq!(r.at_upper.status, Convergence::Divergent);
        assert_eq!(r.at_lower.status, Convergence::Divergent);

        let mut m = SwitchingModel::cev(&[2.0]);
        m.c = Some(vec![parse("0").unwrap()]);
        let r = general_v_switching(&m, 0, &cfg).unwrap();
        assert_eq!(r.at_lower.status, Convergence::Divergent);
    }

    #[test]
    fn mlmm_kernel_gives_zero_drift_ratio() {
        let mut m = SwitchingModel::cev(&[1.5]);
        m.b[0] = parse("0.1*x").unwrap();
        let si = switching_integrand(&m, 0);
        assert!(si.f.is_zero());
    }

    #[test]
    fn sigma_kernel_matches_feller_at_zero() {
        let cfg = QuadConfig::default();
        for beta in [0.5, 0.75, 1.0, 1.5, 2.0] {
            let mut m = SwitchingModel::cev(&[beta]);
            m.c = Some(vec![m.sigma[0].clone()]);
            let r = general_v_switching(&m, 0, &cfg).unwrap();
            let fel = feller_price_test(&m, 0, Boundary::Lower, &cfg).unwrap();
            assert_eq!(r.at_lower.status, fel.status, "beta = {beta}");
        }
    }

    #[test]
    fn mlmm_and_price_kernels_split_the_feller_test() {
        // Z (drift ratio 0) sees the zero side, ZP (drift ratio 1/x) the
        // infinity side; the other side always diverges.
        let cfg = QuadConfig::default();
        for beta in [0.5, 0.75, 1.0, 1.25, 1.5, 2.0] {
            let m = SwitchingModel::cev(&[beta]);
            let z = general_v_switching(&m, 0, &cfg).unwrap();
            let mut mp = m.clone();
            mp.c = Some(vec![expr::div(m.sigma[0].clone(), expr::var())]);
            let zp = general_v_switching(&mp, 0, &cfg).unwrap();
            let fel0 = feller_price_test(&m, 0, Boundary::Lower, &cfg)
                .unwrap()
                .status;
            let fel_inf = feller_price_test(&m, 0, Boundary::Upper, &cfg)
                .unwrap()
                .status;
            assert_eq!(z.at_lower.status, fel0, "beta = {beta}");
            assert_eq!(z.at_upper.status, Convergence::Divergent, "beta = {beta}");
            assert_eq!(zp.at_upper.status, fel_inf, "beta = {beta}");
            assert_eq!(zp.at_lower.status, Convergence::Divergent, "beta = {beta}");
        }
    }

    #[test]
    fn power_law_families() {
        let cfg = QuadConfig::default();
        for p in [0.5, 0.9, 0.98, 1.0, 1.02, 1.1, 2.0, 3.0] {
            let want = if p > 1.0 {
                Convergence::Convergent
            } else {
                Convergence::Divergent
            };
            let up = classify_single(
                |z: f64| Ok(z.powf(-p)),
                &StateInterval::positive(),
                Boundary::Upper,
                &cfg,
            )
            .unwrap();
            let down = classify_single(
                |z: f64| Ok(z.powf(p - 2.0)),
                &StateInterval::positive(),
                Boundary::Lower,
                &cfg,
            )
            .unwrap();
            let full = classify_boundary(
                &si("1", &format!("x^{p}"), StateInterval::positive()),
                Boundary::Upper,
            )
            .unwrap();
            assert_eq!(up.status, want, "upper p = {p}: {}", up.reason);
            assert_eq!(down.status, want, "lower p = {p}: {}", down.reason);
            assert_eq!(full.status, want, "v(1, z^p) p = {p}: {}", full.reason);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = si("0", "1", StateInterval::real_line());
        let v = classify_boundary(&s, Boundary::Upper).unwrap();
        let csv = v.to_csv();
        assert!(csv.starts_with("cutoff,partial\n"));
        assert_eq!(csv.lines().count(), v.cutoffs.len() + 1);
    }

    #[test]
    fn domain_error_propagates() {
        let s = si("log(x - 2)", "1", StateInterval::positive());
        assert!(matches!(v_value(&s, 3.0), Err(QuadError::Domain(_))));
    }
}

//! Monte Carlo engine: chain sampling, switching-diffusion paths built by
//! concatenating frozen-regime solutions, stochastic exponentials, and the
//! two estimators of `E[Z_T]` (direct, and survival under the tilted law).
//!
//! Every path `i` draws from its own ChaCha8 streams keyed by `(seed, i)`,
//! so results never depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, Compiled, EvalError};
use crate::model::{validate, MarketModel, ModelError, QMatrix, SwitchingModel, ValidationError};

pub const Z95: f64 = 1.96;
pub const Z99: f64 = 2.575829303549;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("coefficient evaluation failed inside the state interval: {0}")]
    Eval(#[from] EvalError),
    #[error("invalid simulation setting: {0}")]
    Config(String),
}

// ---------------------------------------------------------------------------
// RNG streams

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Purpose {
    Chain = 0,
    Brownian = 1,
    Oracle = 2,
}

/// The stream for path `index` and one purpose.
pub(crate) fn stream(seed: u64, index: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index * 4 + purpose as u64);
    r
}

/// Runs `f` on a pool with `workers` threads, or on the global pool.
pub(crate) fn with_workers<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, SimError> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(SimError::Config("workers must be positive".into())),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map(|p| p.install(f))
            .map_err(|e| SimError::Config(e.to_string())),
    }
}

/// Pairwise summation in index order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

// ---------------------------------------------------------------------------
// Regime paths

/// A chain trajectory on `[0, T]`: `states[k]` holds on `[jump_times[k], jump_times[k+1])`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimePath {
    pub jump_times: Vec<f64>,
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl RegimePath {
    pub fn constant(j: usize, horizon: f64) -> Self {
        RegimePath {
            jump_times: vec![0.0],
            states: vec![j],
            horizon,
        }
    }

    pub fn n_jumps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&g| g <= t);
        self.states[k.max(1) - 1]
    }

    pub fn terminal_state(&self) -> usize {
        *self.states.last().expect("nonempty")
    }

    /// Fraction of `[0, T]` spent in each state.
    pub fn occupation(&self, n: usize) -> Vec<f64> {
        let mut occ = vec![0.0; n];
        for (k, &s) in self.states.iter().enumerate() {
            let end = self.jump_times.get(k + 1).copied().unwrap_or(self.horizon);
            occ[s] += end - self.jump_times[k];
        }
        occ.iter().map(|o| o / self.horizon).collect()
    }

    /// `counts[i][j]`: number of `i → j` jumps.
    pub fn transition_counts(&self, n: usize) -> Vec<Vec<u32>> {
        let mut c = vec![vec![0u32; n]; n];
        for w in self.states.windows(2) {
            c[w[0]][w[1]] += 1;
        }
        c
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.jump_times.first() != Some(&0.0) || self.jump_times.len() != self.states.len() {
            return Err("malformed jump list".into());
        }
        if self.jump_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err("jump times not strictly increasing".into());
        }
        if self.states.windows(2).any(|w| w[0] == w[1]) {
            return Err("consecutive states coincide".into());
        }
        if self.jump_times.last().is_some_and(|&t| t > self.horizon) {
            return Err("jump after the horizon".into());
        }
        Ok(())
    }
}

/// Gillespie sampling: holding times `Exp(-q_jj)`, next state with
/// probability `q_ji / (-q_jj)`. Absorbing states never jump again.
pub fn sample_chain<R: Rng + ?Sized>(
    q: &QMatrix,
    j0: usize,
    horizon: f64,
    rng: &mut R,
) -> RegimePath {
    let mut path = RegimePath::constant(j0, horizon);
    let mut t = 0.0;
    let mut j = j0;
    loop {
        let lam = q.exit_rate(j);
        if lam <= 0.0 {
            break;
        }
        let hold: f64 = Exp::new(lam).expect("positive rate").sample(rng);
        t += hold;
        if t >= horizon {
            break;
        }
        let u = rng.random::<f64>() * lam;
        let mut acc = 0.0;
        let mut next = j;
        for i in 0..q.n() {
            let r = q.rate(j, i);
            if i == j || r <= 0.0 {
                continue;
            }
            acc += r;
            next = i;
            if u < acc {
                break;
            }
        }
        path.jump_times.push(t);
        path.states.push(next);
        j = next;
    }
    path
}

// ---------------------------------------------------------------------------
// Settings and results

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DtPolicy {
    /// Fixed step `T/steps`, refined so that every chain jump is a grid point.
    Uniform { steps: u32 },
    /// Step `min(T/steps, κ s²/σ², κ s/|b|, κ/c²)` with `s` the local state
    /// scale, so that each step moves the state by a bounded relative amount.
    Adaptive { steps: u32, kappa: f64 },
}

impl Default for DtPolicy {
    fn default() -> Self {
        DtPolicy::Uniform { steps: 1 << 12 }
    }
}

impl DtPolicy {
    pub fn steps(&self) -> u32 {
        match *self {
            DtPolicy::Uniform { steps } | DtPolicy::Adaptive { steps, .. } => steps,
        }
    }

    /// Same policy with the base step halved.
    pub fn halved(&self) -> Self {
        match *self {
            DtPolicy::Uniform { steps } => DtPolicy::Uniform { steps: steps * 2 },
            DtPolicy::Adaptive { steps, kappa } => DtPolicy::Adaptive {
                steps: steps * 2,
                kappa: kappa / 2.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Euler,
    Milstein,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: DtPolicy,
    pub scheme: Scheme,
    /// Deepest localization level; leaving it absorbs the path.
    pub depth: u32,
    /// Bound on `|x|` and on `Z`.
    pub overflow: f64,
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: DtPolicy::default(),
            scheme: Scheme::Euler,
            depth: 24,
            overflow: 1e12,
            workers: None,
        }
    }
}

impl SimConfig {
    fn check(&self) -> Result<(), SimError> {
        let steps = self.dt.steps();
        if steps == 0 {
            return Err(SimError::Config("dt policy needs at least one step".into()));
        }
        if let DtPolicy::Adaptive { kappa, .. } = self.dt {
            if !(kappa > 0.0 && kappa.is_finite()) {
                return Err(SimError::Config("kappa must be positive".into()));
            }
        }
        if self.depth == 0 {
            return Err(SimError::Config("ladder depth must be positive".into()));
        }
        if self.overflow.is_nan() || self.overflow <= 0.0 {
            return Err(SimError::Config("overflow guard must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchemeMeta {
    pub scheme: Scheme,
    pub dt: DtPolicy,
    pub depth: u32,
}

impl From<&SimConfig> for SchemeMeta {
    fn from(c: &SimConfig) -> Self {
        SchemeMeta {
            scheme: c.scheme,
            dt: c.dt,
            depth: c.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// `None` for exact (non-discretized) samplers.
    pub scheme: Option<SchemeMeta>,
    /// Paths that ended absorbed or overflowed.
    pub flagged: usize,
    pub warnings: Vec<String>,
}

impl MCEstimate {
    pub fn from_samples(samples: &[f64], seed: u64, scheme: Option<SchemeMeta>) -> Self {
        let n = samples.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            pairwise_sum(samples) / n as f64
        };
        let stderr = if n < 2 {
            0.0
        } else {
            let dev: Vec<f64> = samples.iter().map(|x| (x - mean) * (x - mean)).collect();
            (pairwise_sum(&dev) / (n - 1) as f64 / n as f64).sqrt()
        };
        MCEstimate {
            mean,
            stderr,
            ci95_low: mean - Z95 * stderr,
            ci95_high: mean + Z95 * stderr,
            n_paths: n,
            seed,
            scheme,
            flagged: 0,
            warnings: Vec::new(),
        }
    }

    pub fn ci99(&self) -> (f64, f64) {
        (self.mean - Z99 * self.stderr, self.mean + Z99 * self.stderr)
    }

    pub fn ci95_contains(&self, v: f64) -> bool {
        self.ci95_low <= v && v <= self.ci95_high
    }

    pub fn ci99_contains(&self, v: f64) -> bool {
        let (lo, hi) = self.ci99();
        lo <= v && v <= hi
    }

    /// `|a - b| / sqrt(se_a² + se_b²)`.
    pub fn z_score(&self, other_mean: f64, other_stderr: f64) -> f64 {
        let s = self.stderr.hypot(other_stderr);
        if s == 0.0 {
            if self.mean == other_mean {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - other_mean).abs() / s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathStatus {
    Alive,
    AbsorbedAt { level: u32, time: f64 },
    NumericOverflow { time: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplePath {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Regime in force on the step that ends at each grid point.
    pub regimes: Vec<usize>,
    pub regime: RegimePath,
    pub z_values: Vec<f64>,
    pub status: PathStatus,
}

/// Summary of one simulated path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathOutcome {
    pub x_t: f64,
    pub z_t: f64,
    pub status: PathStatus,
    pub min_x: f64,
    pub max_x: f64,
    /// `W_T` along the path.
    pub w_t: f64,
    /// `∫₀ᵀ c(S_t, ξ_t) dt`.
    pub int_c: f64,
    pub steps: u64,
}

// ---------------------------------------------------------------------------
// Engine

/// Coefficients compiled once, shared read-only by all paths.
pub struct Engine {
    q: QMatrix,
    initial: usize,
    x0: f64,
    horizon: f64,
    lower: f64,
    upper: f64,
    b: Vec<Compiled>,
    sigma: Vec<Compiled>,
    c: Vec<Compiled>,
    b_zero: Vec<bool>,
    c_zero: Vec<bool>,
    levels: Vec<(f64, f64)>,
    cfg: SimConfig,
}

// Floor on adaptive steps, in ulps of the current time, so time always advances.
const MIN_STEP_ULPS: f64 = 4.0;

impl Engine {
    /// Builds an engine for `m`; the kernel is `m.kernel()`.
    pub fn new(m: &SwitchingModel, cfg: &SimConfig) -> Result<Self, SimError> {
        cfg.check()?;
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            return Err(SimError::Config("horizon must be positive".into()));
        }
        let start = m.interval.with_x0(m.p0)?;
        let levels = start.localization_ladder(cfg.depth)?;
        let kernel = m.kernel();
        Ok(Engine {
            q: m.q.clone(),
            initial: m.regimes.initial,
            x0: m.p0,
            horizon: m.horizon,
            lower: m.interval.lower,
            upper: m.interval.upper,
            b_zero: m.b.iter().map(|e| e.is_zero()).collect(),
            c_zero: kernel.iter().map(|e| e.is_zero()).collect(),
            b: m.b.iter().map(|e| e.compile()).collect(),
            sigma: m.sigma.iter().map(|e| e.compile()).collect(),
            c: kernel.iter().map(|e| e.compile()).collect(),
            levels,
            cfg: cfg.clone(),
        })
    }

    pub fn levels(&self) -> &[(f64, f64)] {
        &self.levels
    }

    fn scale(&self, x: f64) -> f64 {
        let mut s = x.abs().max(1.0);
        if self.lower.is_finite() {
            s = s.min(x - self.lower);
        }
        if self.upper.is_finite() {
            s = s.min(self.upper - x);
        }
        s
    }

    fn sigma_prime(&self, j: usize, x: f64) -> f64 {
        let h = 1e-5 * x.abs().max(1.0);
        match (self.sigma[j].eval(x + h), self.sigma[j].eval(x - h)) {
            (Ok(a), Ok(b)) => (a - b) / (2.0 * h),
            _ => 0.0,
        }
    }

    /// Simulates one path along `chain`, optionally recording every grid point.
    pub fn run_path(
        &self,
        chain: &RegimePath,
        rng: &mut ChaCha8Rng,
        mut rec: Option<&mut SamplePath>,
    ) -> Result<PathOutcome, SimError> {
        let t_end = self.horizon;
        let base = t_end / self.cfg.dt.steps() as f64;
        let (l_d, r_d) = *self.levels.last().expect("depth > 0");
        let lz_max = self.cfg.overflow.ln();
        let milstein = self.cfg.scheme == Scheme::Milstein;

        let mut t = 0.0;
        let mut x = self.x0;
        let mut lz = 0.0f64;
        let mut w = 0.0;
        let mut int_c = 0.0;
        let mut grid_k: u64 = 0;
        let mut next_jump_idx = 1;
        let mut j = chain.states[0];
        let (mut min_x, mut max_x) = (x, x);
        let mut status = PathStatus::Alive;
        let mut steps = 0u64;
        if let Some(r) = rec.as_deref_mut() {
            r.grid.push(0.0);
            r.values.push(x);
            r.regimes.push(j);
            r.z_values.push(1.0);
        }

        while t < t_end {
            let next_jump = chain
                .jump_times
                .get(next_jump_idx)
                .copied()
                .unwrap_or(f64::INFINITY);
            let sig = self.sigma[j].eval(x)?;
            let drift = if self.b_zero[j] {
                0.0
            } else {
                self.b[j].eval(x)?
            };
            let cc = if self.c_zero[j] {
                0.0
            } else {
                self.c[j].eval(x)?
            };
            let grid_next = ((grid_k + 1) as f64 * base).min(t_end);
            let mut t_next = match self.cfg.dt {
                DtPolicy::Uniform { .. } => grid_next,
                DtPolicy::Adaptive { kappa, .. } => {
                    let s = self.scale(x);
                    let mut h = base;
                    if sig != 0.0 {
                        h = h.min(kappa * s * s / (sig * sig));
                    }
                    if drift != 0.0 {
                        h = h.min(kappa * s / drift.abs());
                    }
                    if cc != 0.0 {
                        h = h.min(kappa / (cc * cc));
                    }
                    (t + h.max(MIN_STEP_ULPS * f64::EPSILON * t.max(base))).min(t_end)
                }
            };
            let jumped = next_jump <= t_next;
            if jumped {
                t_next = next_jump;
            }
            let h = t_next - t;
            let z: f64 = rng.sample(StandardNormal);
            let dw = h.sqrt() * z;
            let mut xn = x + drift * h + sig * dw;
            if milstein && sig != 0.0 {
                xn += 0.5 * sig * self.sigma_prime(j, x) * (dw * dw - h);
            }
            if cc != 0.0 {
                lz += cc * dw - 0.5 * cc * cc * h;
                int_c += cc * h;
            }
            w += dw;
            t = t_next;
            steps += 1;
            if t_next >= grid_next {
                grid_k += 1;
            }
            let seg = j;
            if jumped {
                j = chain.states[next_jump_idx];
                next_jump_idx += 1;
            }

            if xn.is_nan() || xn.abs() > self.cfg.overflow || lz > lz_max {
                status = PathStatus::NumericOverflow { time: t };
                if xn.is_nan() {
                    xn = x;
                }
            } else if !(xn > l_d && xn < r_d) {
                status = PathStatus::AbsorbedAt {
                    level: self.cfg.depth,
                    time: t,
                };
                if !(xn > self.lower && xn < self.upper) {
                    xn = if xn <= l_d { l_d } else { r_d };
                }
            }
            x = xn;
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            if let Some(r) = rec.as_deref_mut() {
                r.grid.push(t);
                r.values.push(x);
                r.regimes.push(seg);
                r.z_values.push(lz.exp());
            }
            if status != PathStatus::Alive {
                break;
            }
        }
        Ok(PathOutcome {
            x_t: x,
            z_t: lz.exp(),
            status,
            min_x,
            max_x,
            w_t: w,
            int_c,
            steps,
        })
    }

    /// Deepest level `n` (1-based) whose interval the path left, if any.
    /// Levels are nested, so the path also left every shallower level.
    pub fn deepest_exit_level(&self, o: &PathOutcome) -> Option<u32> {
        let k = self
            .levels
            .partition_point(|&(l, r)| !(o.min_x > l && o.max_x < r));
        (k > 0).then_some(k as u32)
    }

    /// Simulates `n_paths` paths and maps each through `f`, in index order.
    pub fn map_paths<T, F>(&self, n_paths: usize, seed: u64, f: F) -> Result<Vec<T>, SimError>
    where
        T: Send,
        F: Fn(&RegimePath, &PathOutcome) -> T + Sync + Send,
    {
        with_workers(self.cfg.workers, || {
            (0..n_paths as u64)
                .into_par_iter()
                .map(|i| {
                    let chain = sample_chain(
                        &self.q,
                        self.initial,
                        self.horizon,
                        &mut stream(seed, i, Purpose::Chain),
                    );
                    let o = self.run_path(&chain, &mut stream(seed, i, Purpose::Brownian), None)?;
                    Ok(f(&chain, &o))
                })
                .collect::<Result<Vec<T>, SimError>>()
        })?
    }

    /// Full recorded paths; intended for dumps and small samples.
    pub fn sample_paths(&self, n_paths: usize, seed: u64) -> Result<Vec<SamplePath>, SimError> {
        with_workers(self.cfg.workers, || {
            (0..n_paths as u64)
                .into_par_iter()
                .map(|i| {
                    let chain = sample_chain(
                        &self.q,
                        self.initial,
                        self.horizon,
                        &mut stream(seed, i, Purpose::Chain),
                    );
                    let mut p = SamplePath {
                        grid: Vec::new(),
                        values: Vec::new(),
                        regimes: Vec::new(),
                        regime: chain.clone(),
                        z_values: Vec::new(),
                        status: PathStatus::Alive,
                    };
                    let o = self.run_path(
                        &chain,
                        &mut stream(seed, i, Purpose::Brownian),
                        Some(&mut p),
                    )?;
                    p.status = o.status;
                    Ok(p)
                })
                .collect::<Result<Vec<_>, SimError>>()
        })?
    }
}

fn validated(m: &SwitchingModel) -> Result<(), SimError> {
    validate(&MarketModel::SwitchingDiffusion(m.clone()))?;
    Ok(())
}

/// Simulates one path of `m` along a given chain path.
pub fn simulate_switching_sde(
    m: &SwitchingModel,
    chain: &RegimePath,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SamplePath, SimError> {
    let e = Engine::new(m, cfg)?;
    let mut p = SamplePath {
        grid: Vec::new(),
        values: Vec::new(),
        regimes: Vec::new(),
        regime: chain.clone(),
        z_values: Vec::new(),
        status: PathStatus::Alive,
    };
    let o = e.run_path(chain, rng, Some(&mut p))?;
    p.status = o.status;
    Ok(p)
}

pub fn simulate_paths(
    m: &SwitchingModel,
    cfg: &SimConfig,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<SamplePath>, SimError> {
    validated(m)?;
    Engine::new(m, cfg)?.sample_paths(n_paths, seed)
}

/// CSV dump with columns `path_id,t,regime,state,z`. Regimes are 1-based.
pub fn paths_to_csv(paths: &[SamplePath]) -> String {
    let mut s = String::from("path_id,t,regime,state,z\n");
    for (i, p) in paths.iter().enumerate() {
        for k in 0..p.grid.len() {
            s.push_str(&format!(
                "{i},{},{},{},{}\n",
                p.grid[k],
                p.regimes[k] + 1,
                p.values[k],
                p.z_values[k]
            ));
        }
    }
    s
}

/// Plain single-regime Euler scheme on the uniform grid `T/steps`, absorbed
/// at the deepest level. Independent of the switching engine.
pub fn euler_terminal_values(
    m: &SwitchingModel,
    j: usize,
    steps: u32,
    depth: u32,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>, SimError> {
    let b = m.b[j].compile();
    let s = m.sigma[j].compile();
    let levels = m.interval.with_x0(m.p0)?.localization_ladder(depth)?;
    let (l, r) = *levels.last().expect("depth > 0");
    let h = m.horizon / steps as f64;
    (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i, Purpose::Brownian);
            let mut x = m.p0;
            for _ in 0..steps {
                let z: f64 = rng.sample(StandardNormal);
                let xn = x + b.eval(x)? * h + s.eval(x)? * h.sqrt() * z;
                if !(xn > l && xn < r) {
                    break;
                }
                x = xn;
            }
            Ok(x)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Estimators

/// The model under `Q` with density `Z = E(∫ c dW)`: drift `b + cσ`, same `σ`,
/// kernel cleared to zero.
pub fn girsanov_tilt(m: &SwitchingModel) -> SwitchingModel {
    let c = m.kernel();
    let mut out = m.clone();
    out.b =
        m.b.iter()
            .zip(&m.sigma)
            .zip(&c)
            .map(|((b, s), c)| expr::add(b.clone(), expr::mul(c.clone(), s.clone())))
            .collect();
    out.c = Some(vec![expr::num(0.0); m.n()]);
    out
}

fn flag_warning(est: &mut MCEstimate) {
    if est.flagged as f64 > 0.01 * est.n_paths as f64 {
        est.warnings.push(format!(
            "{} of {} paths were absorbed or overflowed and kept their last value",
            est.flagged, est.n_paths
        ));
    }
}

/// Direct estimate of `E[Z_T]` for `Z = E(∫ c(S, ξ) dW)` with the model's kernel.
pub fn martingale_defect_direct(
    m: &SwitchingModel,
    cfg: &SimConfig,
    n_paths: usize,
    seed: u64,
) -> Result<MCEstimate, SimError> {
    validated(m)?;
    let e = Engine::new(m, cfg)?;
    let out = e.map_paths(n_paths, seed, |_, o| (o.z_t, o.status != PathStatus::Alive))?;
    let z: Vec<f64> = out.iter().map(|p| p.0).collect();
    let mut est = MCEstimate::from_samples(&z, seed, Some(cfg.into()));
    est.flagged = out.iter().filter(|p| p.1).count();
    flag_warning(&mut est);
    Ok(est)
}

/// Estimate of `E[S_T]`.
pub fn terminal_state_estimate(
    m: &SwitchingModel,
    cfg: &SimConfig,
    n_paths: usize,
    seed: u64,
) -> Result<MCEstimate, SimError> {
    validated(m)?;
    let e = Engine::new(m, cfg)?;
    let out = e.map_paths(n_paths, seed, |_, o| (o.x_t, o.status != PathStatus::Alive))?;
    let x: Vec<f64> = out.iter().map(|p| p.0).collect();
    let mut est = MCEstimate::from_samples(&x, seed, Some(cfg.into()));
    est.flagged = out.iter().filter(|p| p.1).count();
    flag_warning(&mut est);
    Ok(est)
}

pub fn estimate_functional<F: Fn(&SamplePath) -> f64>(
    paths: &[SamplePath],
    seed: u64,
    f: F,
) -> MCEstimate {
    let v: Vec<f64> = paths.iter().map(f).collect();
    MCEstimate::from_samples(&v, seed, None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelSurvival {
    pub level: u32,
    pub lower: f64,
    pub upper: f64,
    pub exits: usize,
    pub survival: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplosionStats {
    pub levels: Vec<LevelSurvival>,
    /// Survival at the deepest level, the duality estimate of `E[Z_T]`.
    pub estimate: MCEstimate,
    pub plateaued: bool,
    pub warnings: Vec<String>,
}

/// Survival probabilities `Qⁿ(τ_n > T)` per level for a tilted model. The
/// kernel of `m_tilted` is ignored.
pub fn explosion_probability(
    m_tilted: &SwitchingModel,
    cfg: &SimConfig,
    n_paths: usize,
    seed: u64,
) -> Result<ExplosionStats, SimError> {
    validated(m_tilted)?;
    let mut m = m_tilted.clone();
    m.c = Some(vec![expr::num(0.0); m.n()]);
    let e = Engine::new(&m, cfg)?;
    let exits = e.map_paths(n_paths, seed, |_, o| e.deepest_exit_level(o))?;
    let n = n_paths as f64;
    let levels: Vec<LevelSurvival> = e
        .levels()
        .iter()
        .enumerate()
        .map(|(k, &(lower, upper))| {
            let level = k as u32 + 1;
            let ex = exits
                .iter()
                .filter(|x| x.is_some_and(|x| x >= level))
                .count();
            let p = 1.0 - ex as f64 / n;
            LevelSurvival {
                level,
                lower,
                upper,
                exits: ex,
                survival: p,
                stderr: (p * (1.0 - p) / n).sqrt(),
            }
        })
        .collect();
    let depth = cfg.depth;
    let deepest: Vec<f64> = exits
        .iter()
        .map(|x| {
            if x.is_some_and(|x| x >= depth) {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    let mut estimate = MCEstimate::from_samples(&deepest, seed, Some(cfg.into()));
    estimate.flagged = exits
        .iter()
        .filter(|x| x.is_some_and(|x| x >= depth))
        .count();
    let mut warnings = Vec::new();
    let plateaued = match levels.as_slice() {
        [.., a, b] => (b.survival - a.survival).abs() <= 2.0 * b.stderr.max(a.stderr),
        _ => true,
    };
    if !plateaued {
        warnings.push(format!(
            "survival has not plateaued by level {}; increase the ladder depth",
            levels.len()
        ));
    }
    Ok(ExplosionStats {
        levels,
        estimate,
        plateaued,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub direct: MCEstimate,
    pub explosion: ExplosionStats,
    pub gap: f64,
    pub combined_stderr: f64,
    pub agree: bool,
}

/// Direct `E[Z_T]` against the survival plateau of the tilted model; agreement
/// means a gap of at most 3 combined standard errors.
pub fn duality_check(
    m: &SwitchingModel,
    cfg: &SimConfig,
    n_paths: usize,
    seed: u64,
) -> Result<DualityReport, SimError> {
    let direct = martingale_defect_direct(m, cfg, n_paths, seed)?;
    let explosion = explosion_probability(&girsanov_tilt(m), cfg, n_paths, seed.wrapping_add(1))?;
    let gap = direct.mean - explosion.estimate.mean;
    let combined_stderr = direct.stderr.hypot(explosion.estimate.stderr);
    let agree = gap.abs() <= 3.0 * combined_stderr || gap == 0.0;
    Ok(DualityReport {
        direct,
        explosion,
        gap,
        combined_stderr,
        agree,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasCheck {
    pub coarse: MCEstimate,
    pub fine: MCEstimate,
    pub difference: f64,
    pub tolerance: f64,
    pub biased: bool,
}

/// Reruns the direct defect estimator with the step halved and flags a
/// difference larger than one combined standard error.
pub fn dt_halving_check(
    m: &SwitchingModel,
    cfg: &SimConfig,
    n_paths: usize,
    seed: u64,
) -> Result<BiasCheck, SimError> {
    let coarse = martingale_defect_direct(m, cfg, n_paths, seed)?;
    let mut fine_cfg = cfg.clone();
    fine_cfg.dt = cfg.dt.halved();
    let fine = martingale_defect_direct(m, &fine_cfg, n_paths, seed)?;
    let difference = fine.mean - coarse.mean;
    let tolerance = coarse.stderr.hypot(fine.stderr);
    Ok(BiasCheck {
        biased: difference.abs() > tolerance,
        coarse,
        fine,
        difference,
        tolerance,
    })
}

/// `E[1/R_T]` for `R = |(1,0,0) + B|` a three-dimensional Bessel process
/// from 1, sampled exactly from Gaussians.
pub fn bessel3_inverse_oracle(
    horizon: f64,
    n: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<MCEstimate, SimError> {
    let sd = horizon.sqrt();
    let v = with_workers(workers, || {
        (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let mut r = stream(seed, i, Purpose::Oracle);
                let g: [f64; 3] = [
                    r.sample(StandardNormal),
                    r.sample(StandardNormal),
                    r.sample(StandardNormal),
                ];
                let x = 1.0 + sd * g[0];
                let y = sd * g[1];
                let z = sd * g[2];
                1.0 / (x * x + y * y + z * z).sqrt()
            })
            .collect::<Vec<f64>>()
    })?;
    Ok(MCEstimate::from_samples(&v, seed, None))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    }
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = sign * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// The six-model regression suite for the duality check: two martingales,
/// two strict local martingales, two switching models.
pub fn regression_suite() -> Vec<(&'static str, SwitchingModel)> {
    let p = |s: &str| expr::parse(s).expect("fixture expression");
    let gbm = {
        let mut m = SwitchingModel::cev(&[1.0]);
        m.sigma = vec![p("0.2*x")];
        m.c = Some(vec![p("0.5")]);
        m
    };
    let ou = {
        let mut m = SwitchingModel::new(
            crate::model::StateInterval::real_line(),
            QMatrix::single(),
            vec![p("-x")],
            vec![p("1")],
            0.0,
            1.0,
        )
        .expect("fixture");
        m.attestations = crate::model::RegularityAttestation::all_true(1);
        m.c = Some(vec![p("1")]);
        m
    };
    let inv_bessel = {
        let mut m = SwitchingModel::cev(&[2.0]);
        m.c = Some(vec![p("x")]);
        m
    };
    let gbm_strict = {
        let mut m = SwitchingModel::cev(&[1.0]);
        m.c = Some(vec![p("x")]);
        m
    };
    let sw_mart = {
        let mut m = SwitchingModel::cev(&[1.0, 1.0]);
        m.sigma = vec![p("0.5*x"), p("1.5*x")];
        m.c = Some(vec![p("0.5"), p("1.5")]);
        m
    };
    let sw_strict = {
        let mut m = SwitchingModel::cev(&[1.0, 2.0]);
        m.c = Some(vec![p("1"), p("x")]);
        m
    };
    vec![
        ("gbm_constant_kernel", gbm),
        ("ou_constant_kernel", ou),
        ("inverse_bessel", inv_bessel),
        ("gbm_state_kernel", gbm_strict),
        ("switching_cev_1_1", sw_mart),
        ("switching_cev_1_2", sw_strict),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn cfg(steps: u32) -> SimConfig {
        SimConfig {
            dt: DtPolicy::Uniform { steps },
            ..SimConfig::default()
        }
    }

    #[test]
    fn single_state_chain_never_jumps() {
        let q = QMatrix::single();
        let mut r = stream(1, 0, Purpose::Chain);
        for _ in 0..100 {
            assert_eq!(sample_chain(&q, 0, 10.0, &mut r).n_jumps(), 0);
        }
    }

    #[test]
    fn holding_time_mean() {
        let lam = 2.5;
        // absorbing second state, so one jump per draw
        let q = QMatrix::new(vec![vec![-lam, lam], vec![0.0, 0.0]]).unwrap();
        let mut r = stream(7, 0, Purpose::Chain);
        let n = 100_000;
        let holds: Vec<f64> = (0..n)
            .map(|_| {
                let p = sample_chain(&q, 0, 1e9, &mut r);
                p.jump_times[1]
            })
            .collect();
        let est = MCEstimate::from_samples(&holds, 7, None);
        assert!((est.mean - 1.0 / lam).abs() < 3.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn transition_law_matches_matrix_exponential() {
        let q = QMatrix::new(vec![
            vec![-1.0, 0.6, 0.4],
            vec![0.5, -1.5, 1.0],
            vec![0.2, 0.3, -0.5],
        ])
        .unwrap();
        let p = q.transition_matrix(1.0);
        let n = 40_000;
        for i in 0..3 {
            let ends: Vec<usize> = (0..n as u64)
                .map(|k| {
                    let mut r = stream(11 + i as u64, k, Purpose::Chain);
                    let path = sample_chain(&q, i, 1.0, &mut r);
                    path.check_invariants().unwrap();
                    path.terminal_state()
                })
                .collect();
            for j in 0..3 {
                let freq = ends.iter().filter(|&&e| e == j).count() as f64 / n as f64;
                let se = (p[i][j] * (1.0 - p[i][j]) / n as f64).sqrt();
                assert!(
                    (freq - p[i][j]).abs() < 3.0 * se + 1e-12,
                    "{i}->{j}: {freq} vs {}",
                    p[i][j]
                );
            }
        }
    }

    #[test]
    fn regime_path_helpers() {
        let p = RegimePath {
            jump_times: vec![0.0, 0.25, 0.5],
            states: vec![0, 1, 0],
            horizon: 1.0,
        };
        p.check_invariants().unwrap();
        assert_eq!(p.state_at(0.0), 0);
        assert_eq!(p.state_at(0.3), 1);
        assert_eq!(p.state_at(0.5), 0);
        assert_eq!(p.occupation(2), vec![0.75, 0.25]);
        assert_eq!(p.transition_counts(2), vec![vec![0, 1], vec![1, 0]]);
    }

    #[test]
    fn jump_times_are_grid_points_and_regimes_freeze() {
        let m = SwitchingModel::cev(&[1.0, 2.0]);
        let chain = RegimePath {
            jump_times: vec![0.0, 0.3001],
            states: vec![0, 1],
            horizon: 1.0,
        };
        let p = simulate_switching_sde(&m, &chain, &cfg(16), &mut stream(3, 0, Purpose::Brownian))
            .unwrap();
        assert!(p.grid.contains(&0.3001));
        let k = p.grid.iter().position(|&t| t == 0.3001).unwrap();
        assert_eq!(p.regimes[k], 0);
        assert_eq!(p.regimes[k + 1], 1);
        assert_eq!(p.z_values[0], 1.0);
        assert!(p.grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn frozen_chain_matches_plain_scheme_path_for_path() {
        let mut m = SwitchingModel::cev(&[1.0]);
        m.sigma = vec![parse("0.3*x").unwrap()];
        m.b = vec![parse("0.1*x").unwrap()];
        let plain = euler_terminal_values(&m, 0, 64, 24, 50, 5).unwrap();
        let e = Engine::new(&m, &cfg(64)).unwrap();
        let sw = e.map_paths(50, 5, |_, o| o.x_t).unwrap();
        for (a, b) in plain.iter().zip(&sw) {
            assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn frozen_chain_distribution_ks() {
        let mut m = SwitchingModel::cev(&[1.0]);
        m.sigma = vec![parse("0.3*x").unwrap()];
        let plain = euler_terminal_values(&m, 0, 64, 24, 10_000, 100).unwrap();
        let e = Engine::new(&m, &cfg(64)).unwrap();
        let sw = e.map_paths(10_000, 200, |_, o| o.x_t).unwrap();
        let ks = ks_two_sample(&plain, &sw);
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn ks_detects_shift() {
        let a: Vec<f64> = (0..2000).map(|i| i as f64 / 2000.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.2).collect();
        assert!(ks_two_sample(&a, &b).p_value < 1e-6);
        assert!(ks_two_sample(&a, &a).p_value > 0.99);
    }

    #[test]
    fn driftless_gbm_is_a_martingale() {
        let mut m = SwitchingModel::cev(&[1.0]);
        m.sigma = vec![parse("0.2*x").unwrap()];
        let est = terminal_state_estimate(&m, &cfg(64), 20_000, 9).unwrap();
        assert!((est.mean - 1.0).abs() < 3.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn zero_kernel_gives_exactly_one() {
        let mut m = SwitchingModel::cev(&[1.0, 1.0]);
        m.c = Some(vec![parse("0").unwrap(); 2]);
        let est = martingale_defect_direct(&m, &cfg(32), 1000, 1).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn girsanov_tilt_examples() {
        let mut m = SwitchingModel::cev(&[1.0]);
        m.b = vec![parse("0.3*x").unwrap()];
        assert!(girsanov_tilt(&m).b[0].is_zero());
        let mut m0 = SwitchingModel::cev(&[1.5]);
        m0.c = Some(vec![parse("0").unwrap()]);
        let t = girsanov_tilt(&m0);
        assert_eq!(t.b[0].eval(2.0).unwrap(), 0.0);
        assert_eq!(t.sigma, m0.sigma);
        let mut m1 = SwitchingModel::cev(&[1.5]);
        m1.c = Some(m1.sigma.clone());
        let t = girsanov_tilt(&m1);
        for x in [0.5, 1.0, 3.0] {
            let s: f64 = x * f64::sqrt(x);
            assert!((t.b[0].eval(x).unwrap() - s * s).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_across_workers() {
        let m = regression_suite().swap_remove(5).1;
        let mut c = cfg(64);
        let mut ests = Vec::new();
        for w in [1, 4, 8] {
            c.workers = Some(w);
            ests.push(martingale_defect_direct(&m, &c, 300, 42).unwrap());
        }
        assert_eq!(ests[0], ests[1]);
        assert_eq!(ests[0], ests[2]);
    }

    #[test]
    fn survival_is_monotone_in_level() {
        let m = girsanov_tilt(&regression_suite()[2].1);
        let c = SimConfig {
            dt: DtPolicy::Adaptive {
                steps: 64,
                kappa: 0.02,
            },
            ..SimConfig::default()
        };
        let s = explosion_probability(&m, &c, 2000, 3).unwrap();
        assert!(s.levels.windows(2).all(|w| w[0].survival <= w[1].survival));
        assert!(s.estimate.mean < 0.9);
    }

    #[test]
    fn bounded_tilt_survives() {
        let m = girsanov_tilt(&regression_suite()[0].1);
        let s = explosion_probability(&m, &cfg(64), 2000, 3).unwrap();
        assert_eq!(s.estimate.mean, 1.0);
        assert!(s.plateaued);
    }

    #[test]
    fn csv_dump_shape() {
        let m = SwitchingModel::cev(&[1.0, 1.0]);
        let paths = simulate_paths(&m, &cfg(8), 2, 1).unwrap();
        let csv = paths_to_csv(&paths);
        assert!(csv.starts_with("path_id,t,regime,state,z\n"));
        let rows = csv.lines().count() - 1;
        assert_eq!(rows, paths.iter().map(|p| p.grid.len()).sum::<usize>());
    }

    #[test]
    fn estimate_invariants() {
        let e = MCEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0], 0, None);
        assert_eq!(e.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((e.stderr - sd / 2.0).abs() < 1e-15);
        assert!((e.ci95_high - e.mean - 1.96 * e.stderr).abs() < 1e-15);
    }
}

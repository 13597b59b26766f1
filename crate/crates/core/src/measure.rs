//! Minimal martingale measure toolkit: Q-matrix tilting, chain exponential
//! martingales, and Monte Carlo checks of the tilted chain law and of the
//! MLMM's preservation of the chain.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::classify::{TheoremCitation, TheoremId};
use crate::expr;
use crate::model::{ModelError, QMatrix, SwitchingModel};
use crate::sim::{
    girsanov_tilt, sample_chain, stream, with_workers, Engine, MCEstimate, Purpose, RegimePath,
    SimConfig, SimError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasureError {
    #[error("tilt vector entry {index} is {value}; entries must be positive and finite")]
    NonPositive { index: usize, value: f64 },
    #[error("tilt vector has {got} entries, the chain has {expected} states")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Positive weights `f ∈ (0, ∞)^N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TiltVector(Vec<f64>);

impl TiltVector {
    pub fn new(f: Vec<f64>) -> Result<Self, MeasureError> {
        if let Some((index, &value)) = f
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(MeasureError::NonPositive { index, value });
        }
        Ok(TiltVector(f))
    }

    pub fn ones(n: usize) -> Self {
        TiltVector(vec![1.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Entrywise product.
    pub fn product(&self, o: &TiltVector) -> TiltVector {
        TiltVector(self.0.iter().zip(&o.0).map(|(a, b)| a * b).collect())
    }

    fn check(&self, n: usize) -> Result<(), MeasureError> {
        if self.0.len() != n {
            return Err(MeasureError::Dimension {
                expected: n,
                got: self.0.len(),
            });
        }
        Ok(())
    }
}

/// `q*_ij = q_ij f(j)/f(i)` off the diagonal, rows completed to sum to zero.
pub fn tilt_qmatrix(q: &QMatrix, f: &TiltVector) -> Result<QMatrix, MeasureError> {
    f.check(q.n())?;
    let f = f.values();
    let n = q.n();
    let rows = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        q.rate(i, j) * (f[j] / f[i])
                    }
                })
                .collect();
            row[i] = -row.iter().sum::<f64>();
            row
        })
        .collect();
    Ok(QMatrix::new(rows)?)
}

/// `Z_t = f(ξ_t)/f(ξ_0) · exp(-∫₀ᵗ (Qf)(ξ_s)/f(ξ_s) ds)`, evaluated exactly at
/// the jump times and the horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainExponential {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// `(Qf)(j)/f(j)` per state.
    rates: Vec<f64>,
    chain: RegimePath,
}

impl ChainExponential {
    /// `Z_t` for any `t ∈ [0, T]`.
    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.chain.jump_times.partition_point(|&g| g <= t).max(1) - 1;
        let s = self.chain.states[k];
        self.values[k] * (-self.rates[s] * (t - self.chain.jump_times[k])).exp()
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("nonempty")
    }
}

fn generator_rates(q: &QMatrix, f: &[f64]) -> Vec<f64> {
    q.apply(f).iter().zip(f).map(|(qf, fj)| qf / fj).collect()
}

pub fn chain_exponential(
    q: &QMatrix,
    f: &TiltVector,
    chain: &RegimePath,
) -> Result<ChainExponential, MeasureError> {
    f.check(q.n())?;
    let fv = f.values().to_vec();
    let rates = generator_rates(q, &fv);
    let mut times = vec![0.0];
    let mut values = vec![1.0];
    let mut lz = 0.0;
    for k in 0..chain.states.len() {
        let s = chain.states[k];
        let end = chain
            .jump_times
            .get(k + 1)
            .copied()
            .unwrap_or(chain.horizon);
        lz -= rates[s] * (end - chain.jump_times[k]);
        if let Some(&next) = chain.states.get(k + 1) {
            lz += (fv[next] / fv[s]).ln();
        }
        times.push(end);
        values.push(lz.exp());
    }
    Ok(ChainExponential {
        times,
        values,
        rates,
        chain: chain.clone(),
    })
}

/// `E[Z_t]` at each requested time, over `n` chains started in `j0`.
#[allow(clippy::too_many_arguments)]
pub fn chain_exponential_means(
    q: &QMatrix,
    f: &TiltVector,
    j0: usize,
    horizon: f64,
    times: &[f64],
    n: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<Vec<MCEstimate>, MeasureError> {
    f.check(q.n())?;
    let rows: Vec<Vec<f64>> = with_workers(workers, || {
        (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let chain = sample_chain(q, j0, horizon, &mut stream(seed, i, Purpose::Chain));
                let z = chain_exponential(q, f, &chain)?;
                Ok(times.iter().map(|&t| z.value_at(t)).collect())
            })
            .collect::<Result<Vec<_>, MeasureError>>()
    })??;
    Ok((0..times.len())
        .map(|k| {
            let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            MCEstimate::from_samples(&col, seed, None)
        })
        .collect())
}

/// Fixtures for the chain exponential martingale check.
pub fn chain_fixtures() -> Vec<(QMatrix, TiltVector)> {
    vec![
        (
            QMatrix::new(vec![vec![-1.0, 1.0], vec![2.0, -2.0]]).expect("fixture"),
            TiltVector(vec![1.0, 3.0]),
        ),
        (
            QMatrix::new(vec![
                vec![-1.0, 0.5, 0.5],
                vec![0.3, -0.8, 0.5],
                vec![1.0, 1.0, -2.0],
            ])
            .expect("fixture"),
            TiltVector(vec![0.5, 1.0, 4.0]),
        ),
        (
            QMatrix::new(vec![vec![-3.0, 3.0], vec![0.0, 0.0]]).expect("fixture"),
            TiltVector(vec![2.0, 0.25]),
        ),
    ]
}

// ---------------------------------------------------------------------------
// Comparisons

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatComparison {
    pub name: String,
    pub reweighted: MCEstimate,
    pub direct: MCEstimate,
    pub z_score: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub statistics: Vec<StatComparison>,
    pub passed: bool,
    pub certificate: TheoremCitation,
    pub failures: Vec<String>,
}

impl ComparisonReport {
    fn build(statistics: Vec<StatComparison>, id: TheoremId) -> Self {
        let failures: Vec<String> = statistics
            .iter()
            .filter(|s| !s.passed)
            .map(|s| {
                format!(
                    "{}: {:.6} vs {:.6} ({:.2} combined stderr)",
                    s.name, s.reweighted.mean, s.direct.mean, s.z_score
                )
            })
            .collect();
        ComparisonReport {
            passed: failures.is_empty(),
            statistics,
            certificate: id.into(),
            failures,
        }
    }

    pub fn stat(&self, name: &str) -> Option<&StatComparison> {
        self.statistics.iter().find(|s| s.name == name)
    }
}

fn compare(name: String, reweighted: MCEstimate, direct: MCEstimate) -> StatComparison {
    let z_score = reweighted.z_score(direct.mean, direct.stderr);
    StatComparison {
        name,
        passed: z_score <= 3.0,
        reweighted,
        direct,
        z_score,
    }
}

/// Chain statistics: occupation fraction per state, then `i→j` counts.
fn chain_stats(chain: &RegimePath, n: usize) -> Vec<f64> {
    let mut v = chain.occupation(n);
    let c = chain.transition_counts(n);
    for (i, row) in c.iter().enumerate() {
        for (j, &k) in row.iter().enumerate() {
            if i != j {
                v.push(k as f64);
            }
        }
    }
    v
}

fn stat_names(n: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..n).map(|j| format!("occupation[{}]", j + 1)).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                names.push(format!("transitions[{}->{}]", i + 1, j + 1));
            }
        }
    }
    names
}

fn column_estimates(rows: &[Vec<f64>], seed: u64) -> Vec<MCEstimate> {
    let k = rows.first().map_or(0, |r| r.len());
    (0..k)
        .map(|c| {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            MCEstimate::from_samples(&col, seed, None)
        })
        .collect()
}

/// Importance-sampling check of the tilted chain law: statistics under `Q`
/// weighted by the chain exponential `Z_T` against direct simulation of `Q*`.
pub fn verify_tilt_law(
    q: &QMatrix,
    f: &TiltVector,
    j0: usize,
    horizon: f64,
    n_paths: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<ComparisonReport, MeasureError> {
    let n = q.n();
    let q_star = tilt_qmatrix(q, f)?;
    let (weighted, direct) = with_workers(workers, || {
        let weighted = (0..n_paths as u64)
            .into_par_iter()
            .map(|i| {
                let chain = sample_chain(q, j0, horizon, &mut stream(seed, i, Purpose::Chain));
                let z = chain_exponential(q, f, &chain)?.terminal();
                let mut row = vec![z];
                row.extend(chain_stats(&chain, n).into_iter().map(|s| z * s));
                Ok(row)
            })
            .collect::<Result<Vec<_>, MeasureError>>();
        let direct: Vec<Vec<f64>> = (0..n_paths as u64)
            .into_par_iter()
            .map(|i| {
                let chain =
                    sample_chain(&q_star, j0, horizon, &mut stream(seed, i, Purpose::Oracle));
                let mut row = vec![1.0];
                row.extend(chain_stats(&chain, n));
                row
            })
            .collect();
        (weighted, direct)
    })?;
    let weighted = weighted?;
    let mut names = vec!["mass".to_string()];
    names.extend(stat_names(n));
    let stats = names
        .into_iter()
        .zip(column_estimates(&weighted, seed))
        .zip(column_estimates(&direct, seed))
        .map(|((name, w), d)| compare(name, w, d))
        .collect();
    Ok(ComparisonReport::build(stats, TheoremId::T5_3))
}

// ---------------------------------------------------------------------------
// MLMM

/// The MLMM density `Z = E(-∫ θ dW)` and the dynamics under it.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmmKernel {
    /// Original model with kernel `c = -b/σ`.
    pub density_model: SwitchingModel,
    /// Driftless dynamics under the MLMM; the chain keeps its Q-matrix.
    pub tilted: SwitchingModel,
    pub chain_law_unchanged: TheoremCitation,
}

pub fn mlmm_kernel(m: &SwitchingModel) -> MlmmKernel {
    let mut density_model = m.clone();
    density_model.c = Some(
        m.b.iter()
            .zip(&m.sigma)
            .map(|(b, s)| expr::neg(expr::div(b.clone(), s.clone())))
            .collect(),
    );
    let tilted = girsanov_tilt(&density_model);
    MlmmKernel {
        density_model,
        tilted,
        chain_law_unchanged: TheoremId::T5_2.into(),
    }
}

/// Checks that the MLMM keeps the chain law: transition counts weighted by
/// the MLMM density against an independent untilted chain sample, and the
/// covariance under the MLMM between the occupation of regime 1 and the
/// indicator `{W^Q_T > 0}` of the new Brownian motion.
pub fn verify_mlmm_preservation(
    m: &SwitchingModel,
    cfg: &SimConfig,
    n_paths: usize,
    seed: u64,
) -> Result<ComparisonReport, MeasureError> {
    let k = mlmm_kernel(m);
    let n = m.n();
    let engine = Engine::new(&k.density_model, cfg)?;
    let rows = engine.map_paths(n_paths, seed, |chain, o| {
        let wq = o.w_t - o.int_c;
        let mut row = vec![
            o.z_t,
            o.z_t * chain.occupation(n)[0],
            o.z_t * f64::from(u8::from(wq > 0.0)),
        ];
        row.extend(chain_stats(chain, n)[n..].iter().map(|s| o.z_t * s));
        row
    })?;
    let untilted: Vec<Vec<f64>> = with_workers(cfg.workers, || {
        (0..n_paths as u64)
            .into_par_iter()
            .map(|i| {
                let chain = sample_chain(
                    &m.q,
                    m.regimes.initial,
                    m.horizon,
                    &mut stream(seed, i, Purpose::Oracle),
                );
                let mut row = vec![1.0];
                row.extend(chain_stats(&chain, n)[n..].iter().copied());
                row
            })
            .collect()
    })?;

    let w = column_estimates(&rows, seed);
    let mut stats = vec![compare(
        "mass".into(),
        w[0].clone(),
        column_estimates(&untilted, seed)[0].clone(),
    )];
    let names = stat_names(n);
    let d = column_estimates(&untilted, seed);
    for (c, name) in names[n..].iter().enumerate() {
        stats.push(compare(name.clone(), w[3 + c].clone(), d[1 + c].clone()));
    }

    // covariance under the MLMM, centered at the weighted means
    let (ef, eg) = (w[1].mean / w[0].mean, w[2].mean / w[0].mean);
    let cov: Vec<f64> = rows
        .iter()
        .map(|r| {
            if r[0] == 0.0 {
                return 0.0;
            }
            (r[1] / r[0] - ef) * (r[2] / r[0] - eg) * r[0]
        })
        .collect();
    let zero = MCEstimate::from_samples(&[0.0, 0.0], seed, None);
    stats.push(compare(
        "independence_probe".into(),
        MCEstimate::from_samples(&cov, seed, None),
        zero,
    ));
    Ok(ComparisonReport::build(stats, TheoremId::T5_2))
}

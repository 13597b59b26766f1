//! TOML run configuration.
//!
//! A config file has the sections `[model]`, `[regimes]`, `[q]`,
//! `[coefficients]`, `[attestations]` and `[run]`. Coefficients are
//! expression strings in `x`. Regimes are numbered from 1 in the file.
//!
//! ```toml
//! [model]
//! kind = "switching"     # or "ito"
//! lower = 0.0
//! upper = inf
//! initial_value = 1.0    # p0, or s0 for "ito"
//! horizon = 1.0
//!
//! [regimes]
//! count = 2
//! initial = 1
//!
//! [q]
//! rows = [[-1.0, 1.0], [1.0, -1.0]]
//!
//! [coefficients]
//! b = ["0", "0"]
//! sigma = ["x", "x^1.5"]
//!
//! [attestations]
//! es = [true, true]
//! b_locally_bounded = true
//!
//! [run]
//! seed = 42
//! paths = 100000
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Expr;
use crate::model::{
    ItoEnvelopeModel, MarketModel, ModelError, QMatrix, RegimeSet, RegularityAttestation,
    StateInterval, SwitchingModel,
};
use crate::quad::QuadConfig;
use crate::sim::{DtPolicy, Scheme, SimConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn field(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Switching,
    Ito,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub lower: f64,
    pub upper: f64,
    /// Initial state `p0` (switching) or `s0` (Itô).
    pub initial_value: f64,
    /// Reference point of the interval; defaults to `initial_value`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(default = "one")]
    pub horizon: f64,
}

fn one() -> f64 {
    1.0
}

fn first() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimesSection {
    pub count: usize,
    /// One-based initial regime.
    #[serde(default = "first")]
    pub initial: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QSection {
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Expr>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Expr>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<Expr>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_a: Option<Expr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_a: Option<Expr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_u: Option<Expr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_u: Option<Expr>,
    /// Time envelope, written in `x` standing for `t`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<Expr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtKind {
    Uniform,
    Adaptive,
}

/// Command parameters. Every knob is optional; CLI flags override them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<u32>,
    /// Base time step; the step count is `round(T/dt)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_policy: Option<DtKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    /// Tilt vector for the `tilt` command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tilt: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad: Option<QuadConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regimes: Option<RegimesSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<QSection>,
    pub coefficients: CoefficientsSection,
    #[serde(default)]
    pub attestations: RegularityAttestation,
    #[serde(default)]
    pub run: RunSection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Canonical TOML text: fixed section order, defaults made explicit.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("config values are always representable")
    }

    pub fn to_model(&self) -> Result<MarketModel, ConfigError> {
        let m = &self.model;
        let x0 = m.x0.unwrap_or(m.initial_value);
        let interval = StateInterval::new(m.lower, m.upper, x0)?;
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            return Err(field("model.horizon", "must be positive and finite"));
        }
        let co = &self.coefficients;
        match m.kind {
            ModelKind::Switching => {
                for (name, present) in [
                    ("upper_a", co.upper_a.is_some()),
                    ("lower_a", co.lower_a.is_some()),
                    ("upper_u", co.upper_u.is_some()),
                    ("lower_u", co.lower_u.is_some()),
                    ("zeta", co.zeta.is_some()),
                ] {
                    if present {
                        return Err(field(
                            &format!("coefficients.{name}"),
                            "only valid for kind = \"ito\"",
                        ));
                    }
                }
                let b = co
                    .b
                    .clone()
                    .ok_or_else(|| field("coefficients.b", "required for kind = \"switching\""))?;
                let sigma = co.sigma.clone().ok_or_else(|| {
                    field("coefficients.sigma", "required for kind = \"switching\"")
                })?;
                let n = b.len();
                let q = match &self.q {
                    Some(q) => {
                        QMatrix::new(q.rows.clone()).map_err(|e| field("q.rows", e.to_string()))?
                    }
                    None if n == 1 => QMatrix::single(),
                    None => return Err(field("q.rows", format!("required for {n} regimes"))),
                };
                let mut sm = SwitchingModel::new(interval, q, b, sigma, m.initial_value, m.horizon)
                    .map_err(|e| field("coefficients", e.to_string()))?;
                if let Some(c) = &co.c {
                    if c.len() != n {
                        return Err(field(
                            "coefficients.c",
                            format!("{} kernels for {n} regimes", c.len()),
                        ));
                    }
                    sm.c = Some(c.clone());
                }
                if let Some(r) = &self.regimes {
                    if r.count != n {
                        return Err(field(
                            "regimes.count",
                            format!(
                                "{} regimes declared but {n} coefficient sets given",
                                r.count
                            ),
                        ));
                    }
                    if r.initial == 0 {
                        return Err(field("regimes.initial", "regimes are numbered from 1"));
                    }
                    let mut rs = RegimeSet::new(n, r.initial - 1)
                        .map_err(|e| field("regimes.initial", e.to_string()))?;
                    if !r.labels.is_empty() && r.labels.len() != n {
                        return Err(field("regimes.labels", format!("expected {n} labels")));
                    }
                    rs.labels = r.labels.clone();
                    sm.regimes = rs;
                }
                if self.attestations.es.len() > n {
                    return Err(field(
                        "attestations.es",
                        format!("{} entries for {n} regimes", self.attestations.es.len()),
                    ));
                }
                sm.attestations = self.attestations.clone();
                Ok(MarketModel::SwitchingDiffusion(sm))
            }
            ModelKind::Ito => {
                for (name, present) in [
                    ("b", co.b.is_some()),
                    ("sigma", co.sigma.is_some()),
                    ("c", co.c.is_some()),
                ] {
                    if present {
                        return Err(field(
                            &format!("coefficients.{name}"),
                            "only valid for kind = \"switching\"",
                        ));
                    }
                }
                if self.regimes.is_some() || self.q.is_some() {
                    return Err(field("regimes", "Itô envelope models have no regimes"));
                }
                let upper_a = co
                    .upper_a
                    .clone()
                    .ok_or_else(|| field("coefficients.upper_a", "required for kind = \"ito\""))?;
                let mut im = ItoEnvelopeModel::new(upper_a);
                im.interval = interval;
                im.lower_a = co.lower_a.clone();
                im.upper_u = co.upper_u.clone();
                im.lower_u = co.lower_u.clone();
                if let Some(z) = &co.zeta {
                    im.zeta = z.clone();
                }
                im.s0 = m.initial_value;
                im.horizon = m.horizon;
                im.attestations = self.attestations.clone();
                Ok(MarketModel::StochasticExponentialIto(im))
            }
        }
    }

    /// The config describing `m`, with the given run section.
    pub fn from_model(m: &MarketModel, run: RunSection) -> Self {
        match m {
            MarketModel::SwitchingDiffusion(s) => ConfigFile {
                model: ModelSection {
                    kind: ModelKind::Switching,
                    lower: s.interval.lower,
                    upper: s.interval.upper,
                    initial_value: s.p0,
                    x0: (s.interval.x0 != s.p0).then_some(s.interval.x0),
                    horizon: s.horizon,
                },
                regimes: Some(RegimesSection {
                    count: s.n(),
                    initial: s.regimes.initial + 1,
                    labels: s.regimes.labels.clone(),
                }),
                q: Some(QSection {
                    rows: s.q.rows().to_vec(),
                }),
                coefficients: CoefficientsSection {
                    b: Some(s.b.clone()),
                    sigma: Some(s.sigma.clone()),
                    c: s.c.clone(),
                    ..Default::default()
                },
                attestations: s.attestations.clone(),
                run,
            },
            MarketModel::StochasticExponentialIto(i) => ConfigFile {
                model: ModelSection {
                    kind: ModelKind::Ito,
                    lower: i.interval.lower,
                    upper: i.interval.upper,
                    initial_value: i.s0,
                    x0: (i.interval.x0 != i.s0).then_some(i.interval.x0),
                    horizon: i.horizon,
                },
                regimes: None,
                q: None,
                coefficients: CoefficientsSection {
                    upper_a: Some(i.upper_a.clone()),
                    lower_a: i.lower_a.clone(),
                    upper_u: i.upper_u.clone(),
                    lower_u: i.lower_u.clone(),
                    zeta: Some(i.zeta.clone()),
                    ..Default::default()
                },
                attestations: i.attestations.clone(),
                run,
            },
        }
    }

    /// The config after a parse of its canonical form.
    pub fn canonicalize(&self) -> Result<Self, ConfigError> {
        Ok(Self::from_model(&self.to_model()?, self.run.clone()))
    }
}

impl RunSection {
    pub fn check(&self) -> Result<(), ConfigError> {
        let pos = |name: &str, v: Option<f64>| match v {
            Some(v) if !(v > 0.0 && v.is_finite()) => {
                Err(field(&format!("run.{name}"), "must be positive"))
            }
            _ => Ok(()),
        };
        pos("dt", self.dt)?;
        pos("kappa", self.kappa)?;
        if self.paths == Some(0) {
            return Err(field("run.paths", "must be positive"));
        }
        if self.depth == Some(0) {
            return Err(field("run.depth", "must be positive"));
        }
        if let Some(t) = &self.tilt {
            if let Some(v) = t.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(field("run.tilt", format!("entry {v} is not positive")));
            }
        }
        if let Some(q) = &self.quad {
            if !(q.rel_tol > 0.0
                && q.abs_tol > 0.0
                && q.cauchy_tol > 0.0
                && q.divergence_threshold > 0.0)
                || q.depth == 0
                || q.max_steps == 0
            {
                return Err(field("run.quad", "all numeric knobs must be positive"));
            }
        }
        Ok(())
    }

    /// Simulation settings for horizon `t`.
    pub fn sim_config(&self, horizon: f64) -> SimConfig {
        let mut c = SimConfig::default();
        let steps = self
            .dt
            .map(|dt| ((horizon / dt).round() as u32).max(1))
            .unwrap_or(c.dt.steps());
        c.dt = match self.dt_policy.unwrap_or(DtKind::Uniform) {
            DtKind::Uniform => DtPolicy::Uniform { steps },
            DtKind::Adaptive => DtPolicy::Adaptive {
                steps,
                kappa: self.kappa.unwrap_or(0.01),
            },
        };
        if let Some(d) = self.depth {
            c.depth = d;
        }
        if let Some(s) = self.scheme {
            c.scheme = s;
        }
        c
    }

    pub fn quad_config(&self) -> QuadConfig {
        let mut q = self.quad.unwrap_or_default();
        if let Some(d) = self.depth {
            q.depth = d;
        }
        q
    }
}

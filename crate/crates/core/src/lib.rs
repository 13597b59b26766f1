//! Integral tests and Monte Carlo cross-checks for arbitrage, martingale
//! measures and bubbles in one-asset continuous market models.
//!
//! The crate is organised bottom-up:
//!
//! * [`expr`] parses and evaluates coefficient expressions in `x`.
//! * [`model`] holds state intervals, Q-matrices, switching and Itô-envelope
//!   models, regularity attestations and model validation.
//! * [`quad`] evaluates the scale integral `v(f, g)` and classifies its
//!   boundary behaviour as divergent, convergent or undetermined.
//! * [`classify`] turns boundary verdicts and attestations into an
//!   [`classify::ArbitrageReport`] with a theorem citation on every verdict.
//! * [`sim`] simulates Markov chains, switching diffusions and stochastic
//!   exponentials, and estimates martingale defects two independent ways.
//! * [`measure`] tilts Q-matrices, evaluates chain exponentials and checks
//!   law preservation under the minimal martingale measure.
//! * [`config`] reads and writes the TOML run configuration.
//! * [`cli`] is the `noarb` command line built on all of the above.

pub mod classify;
pub mod cli;
pub mod config;
pub mod expr;
pub mod measure;
pub mod model;
pub mod quad;
pub mod sim;

pub use classify::{ArbitrageReport, Status, Verdict};
pub use expr::{parse, Expr};
pub use model::{ItoEnvelopeModel, MarketModel, QMatrix, StateInterval, SwitchingModel};
pub use quad::{BoundaryVerdict, Convergence};
pub use sim::MCEstimate;

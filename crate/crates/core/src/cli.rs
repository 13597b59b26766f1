//! The `noarb` command line: config ingestion, subcommand dispatch, report
//! and CSV emission.
//!
//! Exit codes: 0 when every verdict is decided, 2 when some verdict is
//! inconclusive or a Monte Carlo check disagrees, 1 on any error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::classify::{
    classify_exponential, classify_market, ArbitrageReport, ExponentialInput, Status, Verdict,
};
use crate::config::{ConfigFile, RunSection};
use crate::measure::{tilt_qmatrix, verify_tilt_law, ComparisonReport, TiltVector};
use crate::model::{validate, CheckStatus, MarketModel, SwitchingModel};
use crate::sim::{
    duality_check, paths_to_csv, simulate_paths, terminal_state_estimate, DualityReport,
    MCEstimate, SimConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "noarb",
    version,
    about = "Arbitrage, martingale measure and bubble tests for one-asset markets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify SMD, ELMM/MLMM, EMM/MMM and bubble existence.
    Classify(RunArgs),
    /// Estimate E[Z_T] directly and through the tilted survival plateau.
    Defect(RunArgs),
    /// Tilt the Q-matrix by a positive vector and print the tilted config.
    Tilt(TiltArgs),
    /// Dump simulated paths as CSV.
    Simulate(RunArgs),
    /// Validate the model and print the check table.
    Validate(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Write the JSON report (or CSV / TOML, per command) here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// CSV diagnostics destination.
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    /// Localization ladder depth.
    #[arg(long)]
    pub depth: Option<u32>,
    /// Base time step.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Omit timestamps and worker counts from reports.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TiltArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Tilt vector, comma separated; overrides `run.tilt`.
    #[arg(long, value_delimiter = ',')]
    pub tilt: Option<Vec<f64>>,
    /// Run the importance-sampling check of the tilted chain law.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Serialize)]
struct Meta {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    workers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_unix: Option<u64>,
}

fn meta(command: &'static str, a: &RunArgs, seed: Option<u64>) -> Meta {
    let generated_unix = (!a.deterministic).then(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    Meta {
        tool: "noarb",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        workers: if a.deterministic { None } else { a.workers },
        generated_unix,
    }
}

type CmdResult = Result<i32, String>;

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let res = match &cli.command {
        Command::Classify(a) => cmd_classify(a),
        Command::Defect(a) => cmd_defect(a),
        Command::Tilt(a) => cmd_tilt(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match res {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

struct Loaded {
    file: ConfigFile,
    model: MarketModel,
    run: RunSection,
}

fn load(a: &RunArgs) -> Result<Loaded, String> {
    let file = ConfigFile::load(&a.config).map_err(|e| e.to_string())?;
    let mut run = file.run.clone();
    if a.seed.is_some() {
        run.seed = a.seed;
    }
    if a.paths.is_some() {
        run.paths = a.paths;
    }
    if a.depth.is_some() {
        run.depth = a.depth;
    }
    if a.dt.is_some() {
        run.dt = a.dt;
    }
    run.check().map_err(|e| e.to_string())?;
    let model = file.to_model().map_err(|e| e.to_string())?;
    Ok(Loaded { file, model, run })
}

fn sim_settings(l: &Loaded, a: &RunArgs) -> Result<(SimConfig, u64, usize), String> {
    let seed = l
        .run
        .seed
        .ok_or("a seed is required for simulation; set run.seed or pass --seed")?;
    let mut cfg = l.run.sim_config(l.model.horizon());
    cfg.workers = a.workers;
    Ok((cfg, seed, l.run.paths.unwrap_or(10_000)))
}

fn switching(l: &Loaded, what: &str) -> Result<SwitchingModel, String> {
    match &l.model {
        MarketModel::SwitchingDiffusion(m) => Ok(m.clone()),
        MarketModel::StochasticExponentialIto(_) => Err(format!(
            "{what} needs a switching model; Itô envelope models cannot be simulated"
        )),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn emit_json<T: Serialize>(a: &RunArgs, value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())? + "\n";
    match &a.out {
        Some(p) => write_file(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// classify

#[derive(Serialize)]
struct ClassifyOutput {
    meta: Meta,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<ArbitrageReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel_exponential: Option<Verdict>,
    notes: Vec<String>,
}

fn cmd_classify(a: &RunArgs) -> CmdResult {
    let l = load(a)?;
    let qcfg = l.run.quad_config();
    if let Err(e) = validate(&l.model) {
        eprint!("{}", e.report.to_table());
        return Err(e.to_string());
    }
    let mut notes = Vec::new();
    let on_positive = l.model.interval().lower == 0.0 && l.model.interval().upper == f64::INFINITY;
    let report = match &l.model {
        MarketModel::SwitchingDiffusion(_) if !on_positive => {
            notes.push("market verdicts need the price interval (0, ∞); only the kernel verdict is reported".into());
            None
        }
        m => Some(classify_market(m, &qcfg).map_err(|e| e.to_string())?),
    };
    let kernel_exponential = match &l.model {
        MarketModel::SwitchingDiffusion(m) if m.c.is_some() || report.is_none() => Some(
            classify_exponential(ExponentialInput::Switching(m), &qcfg)
                .map_err(|e| e.to_string())?,
        ),
        MarketModel::StochasticExponentialIto(m) if m.upper_u.is_some() || m.lower_u.is_some() => {
            Some(classify_exponential(ExponentialInput::Ito(m), &qcfg).map_err(|e| e.to_string())?)
        }
        _ => None,
    };
    if let Some(r) = &report {
        r.check_consistency()
            .map_err(|e| format!("inconsistent report: {e}"))?;
        print!("{}", r.to_table());
    }
    if let Some(v) = &kernel_exponential {
        println!(
            "{:<24} {:<13} {:<7} {}",
            "kernel_exponential",
            v.status.to_string(),
            v.certificate.id.label(),
            v.reason
        );
    }
    if let (Some(p), Some(r)) = (&a.csv, &report) {
        let mut s = String::from("name,status,estimate\n");
        for b in &r.boundary_tests {
            s.push_str(&format!("{},{:?},{}\n", b.name, b.status, b.estimate));
        }
        write_file(p, &s)?;
    }
    let inconclusive = report.as_ref().is_some_and(|r| r.any_inconclusive())
        || kernel_exponential
            .as_ref()
            .is_some_and(|v| v.status == Status::Inconclusive);
    let out = ClassifyOutput {
        meta: meta("classify", a, None),
        report,
        kernel_exponential,
        notes,
    };
    if a.out.is_some() {
        emit_json(a, &out)?;
    } else {
        println!();
        emit_json(a, &out)?;
    }
    Ok(if inconclusive { 2 } else { 0 })
}

// ---------------------------------------------------------------------------
// defect

#[derive(Serialize)]
struct DefectOutput {
    meta: Meta,
    duality: DualityReport,
    terminal_state: MCEstimate,
    warnings: Vec<String>,
}

fn cmd_defect(a: &RunArgs) -> CmdResult {
    let l = load(a)?;
    let m = switching(&l, "defect")?;
    let (cfg, seed, n) = sim_settings(&l, a)?;
    let duality = duality_check(&m, &cfg, n, seed).map_err(|e| e.to_string())?;
    let terminal_state = terminal_state_estimate(&m, &cfg, n, seed).map_err(|e| e.to_string())?;
    let mut warnings = duality.direct.warnings.clone();
    warnings.extend(duality.explosion.warnings.iter().cloned());
    if !duality.agree {
        warnings.push(format!(
            "duality gap {:.6} exceeds 3 combined stderr ({:.6})",
            duality.gap,
            3.0 * duality.combined_stderr
        ));
    }
    let d = &duality.direct;
    let e = &duality.explosion.estimate;
    println!(
        "direct     E[Z_T] = {:.6} ± {:.6} (95% CI [{:.6}, {:.6}])",
        d.mean, d.stderr, d.ci95_low, d.ci95_high
    );
    println!("survival   E[Z_T] = {:.6} ± {:.6}", e.mean, e.stderr);
    println!(
        "gap = {:.6}, combined stderr = {:.6}",
        duality.gap, duality.combined_stderr
    );
    println!(
        "E[S_T] = {:.6} ± {:.6} (S_0 = {})",
        terminal_state.mean, terminal_state.stderr, m.p0
    );
    if !warnings.is_empty() {
        println!("warnings:");
        for w in &warnings {
            println!("  - {w}");
        }
    }
    if let Some(p) = &a.csv {
        let mut s = String::from("level,lower,upper,exits,survival,stderr\n");
        for v in &duality.explosion.levels {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                v.level, v.lower, v.upper, v.exits, v.survival, v.stderr
            ));
        }
        write_file(p, &s)?;
    }
    let undecided = !duality.agree || !duality.explosion.plateaued;
    let out = DefectOutput {
        meta: meta("defect", a, Some(seed)),
        duality,
        terminal_state,
        warnings,
    };
    if a.out.is_some() {
        emit_json(a, &out)?;
    }
    Ok(if undecided { 2 } else { 0 })
}

// ---------------------------------------------------------------------------
// tilt

#[derive(Serialize)]
struct TiltSummary {
    meta: Meta,
    tilt: Vec<f64>,
    q_star: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verification: Option<ComparisonReport>,
}

fn cmd_tilt(t: &TiltArgs) -> CmdResult {
    let a = &t.run;
    let l = load(a)?;
    let m = switching(&l, "tilt")?;
    let f = t
        .tilt
        .clone()
        .or_else(|| l.run.tilt.clone())
        .ok_or("a tilt vector is required; set run.tilt or pass --tilt")?;
    let f = TiltVector::new(f).map_err(|e| e.to_string())?;
    let q_star = tilt_qmatrix(&m.q, &f).map_err(|e| e.to_string())?;
    let mut tilted = m.clone();
    tilted.q = q_star.clone();
    let cfg_text =
        ConfigFile::from_model(&MarketModel::SwitchingDiffusion(tilted), l.file.run.clone())
            .to_canonical();

    let verification = if t.verify {
        let seed = l
            .run
            .seed
            .ok_or("--verify needs a seed; set run.seed or pass --seed")?;
        let n = l.run.paths.unwrap_or(100_000);
        Some(
            verify_tilt_law(&m.q, &f, m.regimes.initial, m.horizon, n, seed, a.workers)
                .map_err(|e| e.to_string())?,
        )
    } else {
        None
    };
    match &a.out {
        Some(p) => write_file(p, &cfg_text)?,
        None => print!("{cfg_text}"),
    }
    let mut err = std::io::stderr();
    let _ = writeln!(err, "Q* rows:");
    for row in q_star.rows() {
        let _ = writeln!(err, "  {row:?}");
    }
    let mut code = 0;
    if let Some(v) = &verification {
        let _ = writeln!(
            err,
            "tilt law verification: {}",
            if v.passed { "passed" } else { "FAILED" }
        );
        for s in &v.statistics {
            let _ = writeln!(
                err,
                "  {:<22} reweighted {:.6} direct {:.6} z {:.2}",
                s.name, s.reweighted.mean, s.direct.mean, s.z_score
            );
        }
        if !v.passed {
            code = 2;
        }
    }
    if let Some(p) = &a.csv {
        let summary = TiltSummary {
            meta: meta("tilt", a, l.run.seed.filter(|_| t.verify)),
            tilt: f.values().to_vec(),
            q_star: q_star.rows().to_vec(),
            verification,
        };
        let text = serde_json::to_string_pretty(&summary).map_err(|e| e.to_string())? + "\n";
        write_file(p, &text)?;
    }
    Ok(code)
}

// ---------------------------------------------------------------------------
// simulate and validate

fn cmd_simulate(a: &RunArgs) -> CmdResult {
    let l = load(a)?;
    let m = switching(&l, "simulate")?;
    let (cfg, seed, _) = sim_settings(&l, a)?;
    let n = l.run.paths.unwrap_or(10);
    let paths = simulate_paths(&m, &cfg, n, seed).map_err(|e| e.to_string())?;
    let csv = paths_to_csv(&paths);
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

fn cmd_validate(a: &RunArgs) -> CmdResult {
    let l = load(a)?;
    let (report, code) = match validate(&l.model) {
        Ok(r) => {
            let soft_fail = r
                .items
                .iter()
                .any(|i| matches!(i.status, CheckStatus::Fail | CheckStatus::HeuristicFail));
            (r, if soft_fail { 2 } else { 0 })
        }
        Err(e) => (e.report, 1),
    };
    print!("{}", report.to_table());
    if a.out.is_some() {
        #[derive(Serialize)]
        struct Out<'a> {
            meta: Meta,
            checks: &'a crate::model::ValidationReport,
        }
        emit_json(
            a,
            &Out {
                meta: meta("validate", a, None),
                checks: &report,
            },
        )?;
    }
    Ok(code)
}

//! Command-line driver: `simulate`, `audit` and `bounds`.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 bad arguments or
//! configuration, 3 audit refusal. Every failure prints one line
//! `ERR:<code>:<field>: <message>` to stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ConfigDocument, Experiment, Model, Scale};
use crate::lab::{iid_theta_star, run_assumption_audit, run_consistency, run_corollary1_split, LabError, RunOptions};
use crate::par::{map_indexed, stream_seed, Execution};
use crate::posterior::{
    denominator_growth, increasing_from, numerator_decay_diag, numerator_n1_exact, numerator_setup, simulate_iid,
    simulate_inid, GridPosterior,
};
use crate::truth::{g_alpha, kl_gap, ALPHA_GRID};

pub const SEED_ENV: &str = "QUANTLAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "quantlab", version, about = "Posterior consistency lab for asymmetric-Laplace quantile estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Smoke,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Which {
    Prop1,
    Prop2,
    Corollary1,
    Galpha,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Configuration JSON, or a run manifest written by `simulate`.
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config and the environment.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "full")]
    scale: ScaleArg,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the consistency experiment and write experiment.csv.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Run even when the audit fails.
        #[arg(long)]
        override_audit: bool,
        /// Fill the runtime_ms column (output is then no longer reproducible).
        #[arg(long)]
        timing: bool,
        /// Disable the data-parallel path.
        #[arg(long)]
        sequential: bool,
    },
    /// Check every assumption and write audit.json.
    Audit {
        #[command(flatten)]
        common: Common,
    },
    /// Emit one diagnostic table as bounds_<which>.json.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        which: Which,
    },
}

/// A failure with its exit code and diagnostic line.
#[derive(Debug)]
pub struct Failure {
    pub exit_code: i32,
    pub kind: &'static str,
    pub field: String,
    pub message: String,
}

impl Failure {
    fn new(exit_code: i32, kind: &'static str, field: impl Into<String>, message: impl Into<String>) -> Self {
        Failure { exit_code, kind, field: field.into(), message: message.into() }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::new(1, "io", path.display().to_string(), e.to_string())
    }

    pub fn line(&self) -> String {
        let msg = self.message.replace('\n', " ");
        format!("ERR:{}:{}: {}", self.kind, self.field, msg)
    }
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match &e {
            LabError::AuditRefused { number, .. } => Failure::new(3, "audit", format!("A{number}"), e.to_string()),
            LabError::Scenario(_) => Failure::new(2, "config", "scenario", e.to_string()),
            _ => Failure::new(1, "internal", "-", e.to_string()),
        }
    }
}

fn clap_failure(e: &clap::Error) -> Failure {
    let field = match e.get(ContextKind::InvalidArg) {
        Some(ContextValue::String(s)) => s.trim_start_matches('-').split([' ', '=']).next().unwrap_or("-").to_string(),
        _ => "-".to_string(),
    };
    let msg = e.to_string();
    let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
    Failure::new(2, "args", field, first)
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprintln!("{}", clap_failure(&e).line());
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.line());
            f.exit_code
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { common, override_audit, timing, sequential } => {
            let exec = if sequential { Execution::Sequential } else { Execution::default() };
            cmd_simulate(&common, RunOptions { exec, override_audit, timing })
        }
        Command::Audit { common } => cmd_audit(&common),
        Command::Bounds { common, which } => cmd_bounds(&common, which),
    }
}

struct Loaded {
    doc: ConfigDocument,
    exp: Experiment,
    source_sha256: String,
    scale: Scale,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn load(common: &Common) -> Result<Loaded, Failure> {
    let path = &common.config;
    let bytes = fs::read(path)
        .map_err(|e| Failure::new(2, "config", path.display().to_string(), format!("cannot read: {e}")))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Failure::new(2, "config", path.display().to_string(), "not valid UTF-8"))?;
    // a run manifest carries the effective config it was produced from
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::new(2, "config", "-", format!("malformed JSON: {e}")))?;
    let config_text = match value.get("effective_config") {
        Some(inner) if value.get("config_sha256").is_some() => inner.to_string(),
        _ => text,
    };
    let mut doc = ConfigDocument::from_json(&config_text).map_err(|e| Failure::new(2, "config", e.field, e.message))?;
    let scale = match common.scale {
        ScaleArg::Smoke => Scale::Smoke,
        ScaleArg::Full => Scale::Full,
    };
    doc.apply_scale(scale);
    if let Some(seed) = common.seed {
        doc.seed = seed;
    } else if let Ok(raw) = std::env::var(SEED_ENV) {
        doc.seed = raw
            .trim()
            .parse()
            .map_err(|_| Failure::new(2, "env", SEED_ENV, format!("not an unsigned 64-bit integer: {raw:?}")))?;
    }
    let exp = doc.validate().map_err(|e| Failure::new(2, "config", e.field, e.message))?;
    Ok(Loaded { doc, exp, source_sha256: sha256_hex(&bytes), scale })
}

fn out_dir(common: &Common) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("quantlab-out"));
    fs::create_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(1, "internal", "-", e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config_path: String,
    config_sha256: String,
    effective_config_sha256: String,
    seed: u64,
    scale: Scale,
    parallel_feature: bool,
    outputs: Vec<&'static str>,
    effective_config: &'a ConfigDocument,
}

fn cmd_simulate(common: &Common, opts: RunOptions) -> Result<(), Failure> {
    let loaded = load(common)?;
    let dir = out_dir(common)?;
    let result = run_consistency(&loaded.exp, &opts)?;

    let csv_path = dir.join("experiment.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Failure::io(&csv_path, e))?;
    result.write_csv(file).map_err(|e| Failure::new(1, "io", csv_path.display().to_string(), e.to_string()))?;

    let mut outputs = vec!["experiment.csv", "summary.json"];
    if let Model::Inid { design, .. } = &loaded.exp.model {
        let p = dir.join("design.csv");
        let n = *loaded.exp.n_grid.last().expect("validated");
        let file = fs::File::create(&p).map_err(|e| Failure::io(&p, e))?;
        design.write_csv(file, n).map_err(|e| Failure::new(1, "io", p.display().to_string(), e.to_string()))?;
        outputs.push("design.csv");
    }
    write_json(
        &dir.join("summary.json"),
        &json!({ "scenario": result.scenario, "medians": result.medians, "verdict": result.verdict }),
    )?;
    let effective = loaded.doc.to_json();
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            config_path: common.config.display().to_string(),
            config_sha256: loaded.source_sha256,
            effective_config_sha256: sha256_hex(effective.as_bytes()),
            seed: loaded.doc.seed,
            scale: loaded.scale,
            parallel_feature: cfg!(feature = "parallel"),
            outputs,
            effective_config: &loaded.doc,
        },
    )?;
    println!("wrote {} rows to {}", result.rows.len(), csv_path.display());
    Ok(())
}

fn cmd_audit(common: &Common) -> Result<(), Failure> {
    let loaded = load(common)?;
    let dir = out_dir(common)?;
    let report = run_assumption_audit(&loaded.exp)?;
    let path = dir.join("audit.json");
    write_json(&path, &report)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn iid_only(exp: &Experiment, which: Which) -> Result<&crate::truth::TrueDensity, Failure> {
    match &exp.model {
        Model::Iid { truth } => Ok(truth),
        Model::Inid { .. } => Err(Failure::new(
            2,
            "config",
            "scenario",
            format!("--which {} is defined for scenario \"iid\"", which.to_possible_value().expect("named").get_name()),
        )),
    }
}

fn cmd_bounds(common: &Common, which: Which) -> Result<(), Failure> {
    let loaded = load(common)?;
    let exp = &loaded.exp;
    let internal = |e: String| Failure::new(1, "internal", "-", e);
    let table = match which {
        Which::Galpha => {
            let truth = iid_only(exp, which)?;
            let (theta_star, _) = iid_theta_star(truth, exp.tau).map_err(|e| internal(e.to_string()))?;
            let t = exp.diagnostics.t1.unwrap_or(theta_star + 2.0 * exp.eps);
            let gap = kl_gap(truth, t, theta_star, exp.tau).map_err(|e| internal(e.to_string()))?;
            let mut rows = Vec::new();
            for &alpha in ALPHA_GRID.iter() {
                let g = g_alpha(truth, t, theta_star, alpha, exp.tau).map_err(|e| internal(e.to_string()))?;
                rows.push(json!({ "alpha": alpha, "g_alpha": g, "kl_gap_minus_g": gap - g }));
            }
            let gs: Vec<f64> = rows.iter().map(|r| r["g_alpha"].as_f64().expect("number")).collect();
            json!({
                "which": which,
                "t": t,
                "t_prime": theta_star,
                "kl_gap": gap,
                "rows": rows,
                "nondecreasing_as_alpha_decreases": gs.windows(2).all(|w| w[1] >= w[0]),
                "bounded_by_kl_gap": gs.iter().all(|g| *g <= gap),
            })
        }
        Which::Prop2 => {
            let truth = iid_only(exp, which)?;
            let (theta_star, _) = iid_theta_star(truth, exp.tau).map_err(|e| internal(e.to_string()))?;
            let t1 = exp.diagnostics.t1.unwrap_or(theta_star + 2.0 * exp.eps);
            let setup = numerator_setup(truth, &exp.prior, theta_star, t1, exp.eps, exp.tau)
                .map_err(|e| Failure::new(2, "config", "diagnostics.t1", e.to_string()))?;
            let rows = numerator_decay_diag(
                truth,
                &setup,
                theta_star,
                exp.tau,
                &exp.n_grid,
                exp.replications,
                exp.seed,
                Execution::default(),
            )
            .map_err(|e| internal(e.to_string()))?;
            let n1 = numerator_n1_exact(truth, &setup, theta_star, exp.tau).map_err(|e| internal(e.to_string()))?;
            json!({
                "which": which,
                "t1": t1,
                "delta": setup.delta,
                "alpha_prime": setup.alpha_prime,
                "alpha": setup.alpha,
                "a_range": [setup.a_range.0, setup.a_range.1],
                "replications": exp.replications,
                "rows": rows.iter().map(|r| json!({
                    "n": r.n, "empirical_mean": r.mean, "se": r.se, "bound": r.bound, "passes": r.passes,
                })).collect::<Vec<_>>(),
                "n1_quadrature": n1,
            })
        }
        Which::Prop1 => {
            let beta_rate = exp.diagnostics.beta_rate;
            let n_max = *exp.n_grid.last().expect("validated");
            let per_rep: Vec<Result<serde_json::Value, String>> = match &exp.model {
                Model::Iid { truth } => {
                    let (theta_star, _) = iid_theta_star(truth, exp.tau).map_err(|e| internal(e.to_string()))?;
                    let post = GridPosterior::iid(&exp.prior, theta_star, exp.eps, exp.tau)
                        .map_err(|e| internal(e.to_string()))?;
                    map_indexed(exp.replications, Execution::default(), |r| {
                        let ys = simulate_iid(truth, stream_seed(exp.seed, r as u64), n_max);
                        let rows = denominator_growth(&post, None, &ys, beta_rate, &exp.n_grid, Execution::Sequential)
                            .map_err(|e| e.to_string())?;
                        Ok(json!({ "replication": r, "increasing_from_index": increasing_from(&rows), "rows": rows }))
                    })
                }
                Model::Inid { truth, family, design, beta_star, sup_resolution } => {
                    let slots: Vec<Vec<f64>> = design.slots().iter().map(|x| x.to_vec()).collect();
                    let post =
                        GridPosterior::inid(&exp.prior, family, beta_star, &slots, exp.eps, exp.tau, *sup_resolution)
                            .map_err(|e| internal(e.to_string()))?;
                    map_indexed(exp.replications, Execution::default(), |r| {
                        let (slot_of, ys) = simulate_inid(truth, design, stream_seed(exp.seed, r as u64), n_max);
                        let rows = denominator_growth(
                            &post,
                            Some(&slot_of),
                            &ys,
                            beta_rate,
                            &exp.n_grid,
                            Execution::Sequential,
                        )
                        .map_err(|e| e.to_string())?;
                        Ok(json!({ "replication": r, "increasing_from_index": increasing_from(&rows), "rows": rows }))
                    })
                }
            };
            let reps: Vec<serde_json::Value> = per_rep.into_iter().collect::<Result<_, _>>().map_err(internal)?;
            let eventually = reps.iter().filter(|r| !r["increasing_from_index"].is_null()).count();
            json!({ "which": which, "beta_rate": beta_rate, "eventually_increasing": eventually, "replications": reps })
        }
        Which::Corollary1 => {
            iid_only(exp, which)?;
            let rep = run_corollary1_split(exp, None, &RunOptions { override_audit: true, ..Default::default() })?;
            serde_json::to_value(rep).map_err(|e| internal(e.to_string()))?
        }
    };
    let dir = out_dir(common)?;
    let name = format!("bounds_{}.json", which.to_possible_value().expect("named").get_name());
    let path = dir.join(name);
    write_json(&path, &table)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failure_line_is_single_line() {
        let f = Failure::new(2, "config", "tau", "bad\nvalue");
        assert_eq!(f.line(), "ERR:config:tau: bad value");
    }

    #[test]
    fn unknown_which_is_an_argument_error() {
        let e = Cli::try_parse_from(["quantlab", "bounds", "c.json", "--which", "prop9"]).unwrap_err();
        let f = clap_failure(&e);
        assert_eq!(f.exit_code, 2);
        assert_eq!(f.field, "which");
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["quantlab", "--help"]), 0);
    }
}

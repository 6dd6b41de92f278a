//! The `auxgmm` command line: `estimate`, `bounds` and `simulate`.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::{default_simulation_config, RunConfig};
use crate::data::{load_dataset, Case, Dataset};
use crate::error::{Error, ErrorClass, Result};
use crate::estimators::{estimate, plugin_bounds, Estimate, EstimatorFamily};
use crate::moments::MomentSpec;
use crate::report::{format_report, Provenance, ReportStyle};
use crate::simulate::{format_mc_table, oracle_for, run_monte_carlo};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const DEFAULT_SIM_N: usize = 2000;
const DEFAULT_SIM_REPS: usize = 500;

#[derive(Debug, Parser)]
#[command(name = "auxgmm", version, about = "GMM estimation with an auxiliary sample")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate parameters from a data file.
    Estimate(CommonArgs),
    /// Plug-in bounds from data, or exact bounds for a preset process.
    Bounds(CommonArgs),
    /// Monte Carlo study on a simulated process.
    Simulate(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV data file (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Named data-generating process (dgp-a, dgp-a-constant, dgp-b).
    #[arg(long)]
    preset: Option<String>,
    /// Sample size per replication.
    #[arg(long)]
    n: Option<usize>,
    /// Number of replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Sampling case (overrides the config).
    #[arg(long, value_parser = parse_case)]
    case: Option<Case>,
    #[arg(long, value_enum, default_value = "json")]
    format: ReportStyle,
}

fn parse_case(s: &str) -> std::result::Result<Case, String> {
    s.parse::<Case>().map_err(|e| e.to_string())
}

/// Output of a command; a `failure` still writes the output but exits numerical.
struct Outcome {
    text: String,
    out: Option<PathBuf>,
    failure: Option<Value>,
}

fn error_json(err: &Error) -> Value {
    let class = match err.class() {
        ErrorClass::Usage => "usage",
        ErrorClass::Data => "data",
        ErrorClass::Numerical => "numerical",
    };
    let mut v = json!({ "error": err.kind(), "class": class, "message": err.to_string() });
    if let Error::Io { path, .. } = err {
        v["path"] = json!(path.display().to_string());
    }
    v
}

fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Usage => EXIT_USAGE,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Numerical => EXIT_NUMERICAL,
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let informational = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let rendered = e.render().to_string();
            if informational {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return if informational { EXIT_OK } else { EXIT_USAGE };
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(err) => {
            let _ = writeln!(stderr, "{}", error_json(&err));
            return exit_code(err.class());
        }
    };
    if let Err(err) = emit(&outcome, stdout) {
        let _ = writeln!(stderr, "{}", error_json(&err));
        return exit_code(err.class());
    }
    match outcome.failure {
        Some(v) => {
            let _ = writeln!(stderr, "{v}");
            EXIT_NUMERICAL
        }
        None => EXIT_OK,
    }
}

fn emit(outcome: &Outcome, stdout: &mut dyn Write) -> Result<()> {
    match &outcome.out {
        Some(path) => std::fs::write(path, &outcome.text).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        }),
        None => stdout.write_all(outcome.text.as_bytes()).map_err(|source| Error::Io {
            path: PathBuf::from("<stdout>"),
            source,
        }),
    }
}

fn load_config(args: &CommonArgs) -> Result<Option<RunConfig>> {
    let Some(path) = &args.config else {
        return Ok(None);
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(case) = args.case {
        cfg.case = case;
        cfg.validate()?;
    }
    Ok(Some(cfg))
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_dataset(file, cfg.columns.as_ref(), cfg.case)
}

fn row_labels(moment: &MomentSpec) -> Option<Vec<String>> {
    match moment {
        MomentSpec::Cdf { thresholds } => Some(thresholds.iter().map(|t| format!("y={t}")).collect()),
        _ => None,
    }
}

fn data_run(args: &CommonArgs) -> Result<(RunConfig, Dataset)> {
    let mut cfg = load_config(args)?.unwrap_or_default();
    if args.config.is_none() {
        if let Some(case) = args.case {
            cfg.case = case;
        }
    }
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    let path = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no data file: pass --data or set `data` in the config".into()))?;
    let ds = load_data(&path, &cfg)?;
    Ok((cfg, ds))
}

fn non_converged(estimates: &[Estimate]) -> Option<Value> {
    let bad: Vec<&str> = estimates
        .iter()
        .filter(|e| !e.diagnostics.converged)
        .map(|e| e.label.as_str())
        .collect();
    (!bad.is_empty()).then(|| {
        json!({
            "error": "NoConvergence",
            "class": "numerical",
            "message": "optimizer hit its iteration cap",
            "estimators": bad,
        })
    })
}

fn cmd_estimate(args: &CommonArgs) -> Result<Outcome> {
    let (cfg, ds) = data_run(args)?;
    let configs = cfg.estimator_configs(ds.d_y())?;
    let estimates = configs.iter().map(|c| estimate(c, &ds)).collect::<Result<Vec<_>>>()?;
    let prov = Provenance::new(cfg.seed, cfg.hash());
    let labels = row_labels(&cfg.moment);
    let text = format_report(&estimates, args.format, &prov, labels.as_deref())?;
    Ok(Outcome {
        text,
        out: args.out.clone().or(cfg.output.clone()),
        failure: non_converged(&estimates),
    })
}

fn render_json(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s
}

fn cmd_bounds(args: &CommonArgs) -> Result<Outcome> {
    let from_process = args.preset.is_some()
        || (args.data.is_none() && {
            let cfg = load_config(args)?;
            cfg.as_ref().is_none_or(|c| c.data.is_none())
        });
    if !from_process {
        let (cfg, ds) = data_run(args)?;
        let c = cfg
            .estimator_configs(ds.d_y())?
            .into_iter()
            .next()
            .expect("validated non-empty");
        let b = plugin_bounds(&c, &ds)?;
        let prov = Provenance::new(cfg.seed, cfg.hash());
        let text = match args.format {
            ReportStyle::Json => render_json(&json!({ "plugin": b, "provenance": prov })),
            ReportStyle::Table => {
                let mut s = format!("case={} n={}\n", b.case.as_str(), b.n);
                for e in &b.entries {
                    let diag: Vec<String> = (0..e.bound.len()).map(|i| format!("{:.6}", e.bound[i][i])).collect();
                    s.push_str(&format!("{:<14} {}\n", e.kind, diag.join(" ")));
                }
                s
            }
        };
        return Ok(Outcome {
            text,
            out: args.out.clone().or(cfg.output.clone()),
            failure: None,
        });
    }

    let case = args.case.unwrap_or(Case::VerifyOut);
    let mut cfg = match load_config(args)? {
        Some(c) => c,
        None => default_simulation_config(args.preset.as_deref().unwrap_or("dgp-a"), case)?,
    };
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    let dgp = cfg.dgp(args.preset.as_deref())?;
    let param = cfg.oracle_param(&dgp);
    let oracle = oracle_for(&dgp, &cfg.moment, param.as_ref())?;
    let families = [
        EstimatorFamily::Cep,
        EstimatorFamily::Ipw,
        EstimatorFamily::CepParametricP,
        EstimatorFamily::CepKnownP,
        EstimatorFamily::IpwParametricP,
        EstimatorFamily::IpwKnownP,
    ];
    let bounds: serde_json::Map<String, Value> = families
        .iter()
        .filter_map(|f| {
            oracle
                .bound(*f)
                .map(|b| (f.as_str().to_string(), json!(crate::linalg::to_rows(&b))))
        })
        .collect();
    let prov = Provenance::new(cfg.seed, cfg.hash());
    let text = match args.format {
        ReportStyle::Json => render_json(&json!({
            "dgp": dgp.name,
            "oracle": oracle,
            "bounds": bounds,
            "provenance": prov,
        })),
        ReportStyle::Table => {
            let mut s = format!(
                "dgp={} case={} beta0={:?}\n",
                dgp.name,
                oracle.case.as_str(),
                oracle.beta0
            );
            for (k, v) in &bounds {
                let rows: Vec<Vec<f64>> = serde_json::from_value(v.clone()).expect("matrix");
                let diag: Vec<String> = (0..rows.len()).map(|i| format!("{:.6}", rows[i][i])).collect();
                s.push_str(&format!("{k:<18} {}\n", diag.join(" ")));
            }
            s
        }
    };
    Ok(Outcome {
        text,
        out: args.out.clone().or(cfg.output.clone()),
        failure: None,
    })
}

fn cmd_simulate(args: &CommonArgs) -> Result<Outcome> {
    let case = args.case.unwrap_or(Case::VerifyOut);
    let mut cfg = match load_config(args)? {
        Some(c) => c,
        None => default_simulation_config(args.preset.as_deref().unwrap_or("dgp-a"), case)?,
    };
    let mut sim = cfg.simulate.clone().unwrap_or_default();
    if args.preset.is_some() {
        sim.preset = args.preset.clone();
        sim.dgp = None;
    }
    sim.n = Some(args.n.or(sim.n).unwrap_or(DEFAULT_SIM_N));
    sim.reps = Some(args.reps.or(sim.reps).unwrap_or(DEFAULT_SIM_REPS));
    cfg.seed = Some(args.seed.or(cfg.seed).unwrap_or(0));
    cfg.simulate = Some(sim.clone());
    cfg.validate()?;

    let dgp = cfg.dgp(None)?;
    let configs = cfg.estimator_configs(dgp.d_y())?;
    let param = cfg.oracle_param(&dgp);
    let seed = cfg.seed.expect("set above");
    let report = run_monte_carlo(
        &dgp,
        &cfg.moment,
        &configs,
        sim.n.expect("set above"),
        sim.reps.expect("set above"),
        seed,
        param.as_ref(),
        None,
    )?;
    let prov = Provenance::new(Some(seed), cfg.hash());
    let text = match args.format {
        ReportStyle::Json => {
            let mut v = serde_json::to_value(&report).expect("report serializes");
            v["provenance"] = serde_json::to_value(&prov).expect("provenance serializes");
            render_json(&v)
        }
        ReportStyle::Table => format_mc_table(&report),
    };
    Ok(Outcome {
        text,
        out: args.out.clone().or(cfg.output.clone()),
        failure: None,
    })
}

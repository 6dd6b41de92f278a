//! Replicated estimation on simulated data, aggregated against oracle values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Case;
use crate::error::{Error, Result};
use crate::estimators::{estimate, Estimate, EstimatorConfig, EstimatorFamily};
use crate::moments::MomentSpec;
use crate::simulate::dgp::{generate, DgpSpec, XLaw};
use crate::simulate::oracle::{exact_oracle_discrete, quadrature_oracle, Oracle, OracleParam};

pub const THREADS_ENV: &str = "AUXGMM_THREADS";
/// Two-sided 95% normal critical value.
const Z95: f64 = 1.959_963_984_540_054;
/// Largest excluded share of replications before the run is rejected.
const MAX_EXCLUDED: f64 = 0.01;

pub const BIAS_BAND_MC_SE: f64 = 2.0;
pub const VAR_RATIO_BAND: (f64, f64) = (0.85, 1.15);
pub const COVERAGE_BAND: (f64, f64) = (0.92, 0.975);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `r`; depends only on `(base_seed, r)`.
pub fn replication_seed(base_seed: u64, r: usize) -> u64 {
    splitmix64(base_seed.wrapping_add((r as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Worker count from `AUXGMM_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|t| *t > 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub index: usize,
    pub beta0: f64,
    pub mean_estimate: f64,
    pub mean_bias: f64,
    /// Monte Carlo standard error of the mean estimate.
    pub mc_se: f64,
    /// Empirical variance of `√n(β̂ − β₀)`.
    pub empirical_var: f64,
    /// Mean of `n · se²` across replications.
    pub mean_plugin_var: f64,
    pub oracle_var: Option<f64>,
    pub var_ratio: Option<f64>,
    pub coverage: f64,
    pub median_abs_error: f64,
    pub bias_ok: bool,
    pub var_ratio_ok: Option<bool>,
    pub coverage_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub label: String,
    pub family: EstimatorFamily,
    pub case: Case,
    pub used: usize,
    pub excluded: usize,
    pub components: Vec<ComponentSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub dgp: String,
    pub case: Case,
    pub n: usize,
    pub reps: usize,
    pub base_seed: u64,
    pub beta0: Vec<f64>,
    /// Tolerance bands applied by the `*_ok` flags.
    pub tolerances: Vec<String>,
    pub estimators: Vec<EstimatorSummary>,
}

impl McReport {
    pub fn estimator(&self, label: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.label == label)
    }
}

/// Oracle for the DGP: enumeration if discrete, quadrature otherwise.
pub fn oracle_for(spec: &DgpSpec, moment: &MomentSpec, param: Option<&OracleParam>) -> Result<Oracle> {
    match spec.x_law {
        XLaw::DiscreteUniform { .. } => exact_oracle_discrete(spec, moment, spec.case, param),
        _ => quadrature_oracle(spec, moment, spec.case, param),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn summarize(cfg: &EstimatorConfig, draws: &[Option<Estimate>], oracle: &Oracle, n: usize) -> EstimatorSummary {
    let ok: Vec<&Estimate> = draws.iter().flatten().collect();
    let used = ok.len();
    let nf = n as f64;
    let rf = used as f64;
    let bound = oracle.bound(cfg.family);
    let components = oracle
        .beta0
        .iter()
        .enumerate()
        .map(|(k, &b0)| {
            let vals: Vec<f64> = ok.iter().map(|e| e.beta[k]).collect();
            let mean = vals.iter().sum::<f64>() / rf;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (rf - 1.0);
            let mc_se = (var / rf).sqrt();
            let empirical_var = nf * var;
            let mean_plugin_var = ok.iter().map(|e| nf * e.se[k] * e.se[k]).sum::<f64>() / rf;
            let coverage = ok.iter().filter(|e| (e.beta[k] - b0).abs() <= Z95 * e.se[k]).count() as f64 / rf;
            let oracle_var = bound.as_ref().map(|b| b[(k, k)]);
            let var_ratio = oracle_var.map(|o| empirical_var / o);
            let mean_bias = mean - b0;
            ComponentSummary {
                index: k,
                beta0: b0,
                mean_estimate: mean,
                mean_bias,
                mc_se,
                empirical_var,
                mean_plugin_var,
                oracle_var,
                var_ratio,
                coverage,
                median_abs_error: median(vals.iter().map(|v| (v - b0).abs()).collect()),
                bias_ok: mean_bias.abs() <= BIAS_BAND_MC_SE * mc_se,
                var_ratio_ok: var_ratio.map(|r| (VAR_RATIO_BAND.0..=VAR_RATIO_BAND.1).contains(&r)),
                coverage_ok: (COVERAGE_BAND.0..=COVERAGE_BAND.1).contains(&coverage),
            }
        })
        .collect();
    EstimatorSummary {
        label: cfg.label(),
        family: cfg.family,
        case: cfg.case,
        used,
        excluded: draws.len() - used,
        components,
    }
}

/// Runs `reps` replications of every estimator on fresh draws of size `n`.
///
/// All estimators in a replication share one dataset. Results are identical
/// for any worker count: each replication has its own seed and aggregation
/// runs in replication order.
#[allow(clippy::too_many_arguments)]
pub fn run_monte_carlo(
    spec: &DgpSpec,
    moment: &MomentSpec,
    configs: &[EstimatorConfig],
    n: usize,
    reps: usize,
    base_seed: u64,
    param: Option<&OracleParam>,
    threads: Option<usize>,
) -> Result<McReport> {
    if reps < 2 {
        return Err(Error::MonteCarlo("need at least two replications".into()));
    }
    if configs.is_empty() {
        return Err(Error::MonteCarlo("no estimators to simulate".into()));
    }
    for c in configs {
        if c.case != spec.case {
            return Err(Error::Config(format!(
                "estimator `{}` is configured for {} but the DGP is {}",
                c.label(),
                c.case.as_str(),
                spec.case.as_str()
            )));
        }
        c.validate()?;
    }
    spec.validate()?;
    let oracle = oracle_for(spec, moment, param)?;

    let one = |r: usize| -> Vec<Option<Estimate>> {
        match generate(spec, n, replication_seed(base_seed, r)) {
            Ok(ds) => configs
                .iter()
                .map(|c| estimate(c, &ds).ok().filter(|e| e.diagnostics.converged))
                .collect(),
            Err(_) => vec![None; configs.len()],
        }
    };
    let threads = threads.or_else(threads_from_env).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::MonteCarlo(format!("thread pool: {e}")))?;
    let results: Vec<Vec<Option<Estimate>>> = pool.install(|| (0..reps).into_par_iter().map(one).collect());

    let mut estimators = Vec::with_capacity(configs.len());
    for (j, cfg) in configs.iter().enumerate() {
        let draws: Vec<Option<Estimate>> = results.iter().map(|r| r[j].clone()).collect();
        let excluded = draws.iter().filter(|d| d.is_none()).count();
        if excluded as f64 > MAX_EXCLUDED * reps as f64 || reps - excluded < 2 {
            return Err(Error::MonteCarlo(format!(
                "estimator `{}` failed in {excluded} of {reps} replications",
                cfg.label()
            )));
        }
        estimators.push(summarize(cfg, &draws, &oracle, n));
    }
    Ok(McReport {
        dgp: spec.name.clone(),
        case: spec.case,
        n,
        reps,
        base_seed,
        beta0: oracle.beta0.clone(),
        tolerances: vec![
            format!("|mean bias| <= {BIAS_BAND_MC_SE} MC se"),
            format!(
                "empirical var / oracle bound in [{}, {}]",
                VAR_RATIO_BAND.0, VAR_RATIO_BAND.1
            ),
            format!("95% coverage in [{}, {}]", COVERAGE_BAND.0, COVERAGE_BAND.1),
        ],
        estimators,
    })
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

/// Fixed-width text rendering of a report.
pub fn format_mc_table(report: &McReport) -> String {
    let mut s = format!(
        "dgp={} case={} n={} reps={} seed={}\n",
        report.dgp,
        report.case.as_str(),
        report.n,
        report.reps,
        report.base_seed
    );
    for t in &report.tolerances {
        s.push_str(&format!("# {t}\n"));
    }
    s.push_str(&format!(
        "{:<20} {:>3} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}\n",
        "estimator", "k", "beta0", "bias", "mc_se", "emp_var", "plugin", "oracle", "ratio", "cover"
    ));
    for e in &report.estimators {
        for c in &e.components {
            s.push_str(&format!(
                "{:<20} {:>3} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10} {:>8} {:>8.4}\n",
                e.label,
                c.index,
                c.beta0,
                c.mean_bias,
                c.mc_se,
                c.empirical_var,
                c.mean_plugin_var,
                opt(c.oracle_var, 6),
                opt(c.var_ratio, 4),
                c.coverage
            ));
        }
    }
    s
}

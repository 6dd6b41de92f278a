//! Simulation: data-generating processes, population oracles and the
//! Monte Carlo engine.

pub mod dgp;
pub mod monte_carlo;
pub mod oracle;

pub use dgp::{generate, DgpSpec, MixtureComponent, XLaw, YCell, YLaw, PRESETS};
pub use monte_carlo::{
    format_mc_table, oracle_for, replication_seed, run_monte_carlo, threads_from_env, ComponentSummary,
    EstimatorSummary, McReport, THREADS_ENV,
};
pub use oracle::{exact_oracle_discrete, quadrature_oracle, Oracle, OracleCell, OracleParam};

//! JSON run configuration shared by the CLI and the Python bindings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Case, ColumnSpec};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, EstimatorFamily, Weighting};
use crate::moments::MomentSpec;
use crate::optimize::OptimizerSpec;
use crate::propensity::{Link, ParametricFamily, PropensitySpec};
use crate::sieve::BasisSpec;
use crate::simulate::{DgpSpec, OracleParam};

/// One estimator in a run; unset fields fall back to the run-level values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorEntry {
    pub family: EstimatorFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<PropensitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denominator: Option<PropensitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighting: Option<Weighting>,
}

impl EstimatorEntry {
    pub fn new(family: EstimatorFamily) -> Self {
        Self {
            family,
            label: None,
            basis: None,
            propensity: None,
            denominator: None,
            weighting: None,
        }
    }

    pub fn labelled(family: EstimatorFamily, label: &str) -> Self {
        Self {
            label: Some(label.into()),
            ..Self::new(family)
        }
    }
}

/// The five-column lineup of the CDF report table.
pub fn table_lineup() -> Vec<EstimatorEntry> {
    vec![
        EstimatorEntry::labelled(EstimatorFamily::Unadjusted, "Unadjusted"),
        EstimatorEntry::labelled(EstimatorFamily::Cep, "CEP-NP"),
        EstimatorEntry::labelled(EstimatorFamily::Ipw, "IPW-NP"),
        EstimatorEntry::labelled(EstimatorFamily::IpwParametricP, "IPW-Par"),
        EstimatorEntry::labelled(EstimatorFamily::CepParametricP, "CEP-Eff-Par"),
    ]
}

/// Parametric family with its true parameter, for oracle bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleFamily {
    pub family: ParametricFamily,
    pub gamma: Vec<f64>,
}

impl From<&OracleFamily> for OracleParam {
    fn from(o: &OracleFamily) -> Self {
        OracleParam {
            family: o.family.clone(),
            gamma: o.gamma.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Full process description; overrides `preset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgp: Option<DgpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_family: Option<OracleFamily>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<ColumnSpec>,
    #[serde(default = "default_case")]
    pub case: Case,
    #[serde(default = "default_moment")]
    pub moment: MomentSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<PropensitySpec>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorEntry>,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_init: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
}

fn default_case() -> Case {
    Case::VerifyOut
}

fn default_moment() -> MomentSpec {
    MomentSpec::Mean { dim: None }
}

fn default_estimators() -> Vec<EstimatorEntry> {
    vec![EstimatorEntry::new(EstimatorFamily::Cep)]
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    /// Parses and validates a configuration document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        // Relative data paths are taken relative to the config file.
        if let (Some(data), Some(dir)) = (&cfg.data, path.parent()) {
            if data.is_relative() {
                cfg.data = Some(dir.join(data));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical compact serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators configured".into()));
        }
        let d_y = match &self.moment {
            MomentSpec::Mean { dim: Some(d) } => *d,
            _ => 1,
        };
        for cfg in self.estimator_configs(d_y)? {
            cfg.validate()?;
        }
        if let Some(sim) = &self.simulate {
            if let Some(name) = &sim.preset {
                DgpSpec::preset(name, self.case)?;
            }
            if let Some(dgp) = &sim.dgp {
                dgp.validate()?;
            }
            if sim.reps.is_some_and(|r| r < 2) {
                return Err(Error::Config("simulate.reps must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// Expands the estimator list into full configurations.
    pub fn estimator_configs(&self, d_y: usize) -> Result<Vec<EstimatorConfig>> {
        let moment = self.moment.build(d_y)?;
        Ok(self
            .estimators
            .iter()
            .map(|e| {
                let mut c = EstimatorConfig::new(e.family, self.case, moment.clone());
                c.label = e.label.clone();
                if let Some(b) = e.basis.clone().or_else(|| self.basis.clone()) {
                    c.basis = b;
                }
                c.propensity = e.propensity.clone().or_else(|| self.default_propensity(e.family));
                c.denominator = e.denominator.clone();
                c.weighting = e.weighting.clone().unwrap_or_else(|| self.weighting.clone());
                c.optimizer = self.optimizer.clone();
                c.beta_init = self.beta_init.clone();
                c
            })
            .collect())
    }

    /// The run-level propensity, only where it fits the family.
    fn default_propensity(&self, family: EstimatorFamily) -> Option<PropensitySpec> {
        use crate::propensity::PropensityKind as K;
        let spec = self.propensity.clone()?;
        let fits = match family {
            EstimatorFamily::Unadjusted => false,
            EstimatorFamily::Cep | EstimatorFamily::Ipw => matches!(spec.kind(), K::SieveLs | K::SieveLogit),
            EstimatorFamily::CepParametricP | EstimatorFamily::IpwParametricP => spec.kind() == K::Parametric,
            EstimatorFamily::CepKnownP | EstimatorFamily::IpwKnownP => spec.kind() == K::Known,
            EstimatorFamily::IpwMixed => matches!(spec.kind(), K::Parametric | K::Known),
        };
        fits.then_some(spec)
    }

    /// The process to simulate: explicit `dgp`, else the named preset.
    pub fn dgp(&self, preset_override: Option<&str>) -> Result<DgpSpec> {
        let sim = self.simulate.clone().unwrap_or_default();
        if let Some(name) = preset_override {
            return DgpSpec::preset(name, self.case);
        }
        if let Some(mut dgp) = sim.dgp {
            dgp.case = self.case;
            return Ok(dgp);
        }
        DgpSpec::preset(sim.preset.as_deref().unwrap_or("dgp-a"), self.case)
    }

    /// Oracle family: configured, else the natural one for the presets.
    pub fn oracle_param(&self, dgp: &DgpSpec) -> Option<OracleParam> {
        if let Some(of) = self.simulate.as_ref().and_then(|s| s.oracle_family.as_ref()) {
            return Some(of.into());
        }
        match dgp.name.as_str() {
            "dgp-a" => Some(OracleParam {
                family: ParametricFamily::new(Link::Identity, &["1 + x1"]).expect("static"),
                gamma: vec![0.25],
            }),
            "dgp-b" => Some(OracleParam {
                family: ParametricFamily::linear_logit(1),
                gamma: vec![0.0, 0.5],
            }),
            _ => None,
        }
    }
}

/// Configuration used by `simulate` when no config file is given.
pub fn default_simulation_config(preset: &str, case: Case) -> Result<RunConfig> {
    let dgp = DgpSpec::preset(preset, case)?;
    let mut cfg = RunConfig {
        case,
        estimators: vec![
            EstimatorEntry::labelled(EstimatorFamily::Cep, "CEP-NP"),
            EstimatorEntry::labelled(EstimatorFamily::Ipw, "IPW-NP"),
        ],
        simulate: Some(SimulateSection {
            preset: Some(preset.into()),
            ..SimulateSection::default()
        }),
        ..RunConfig::default()
    };
    if matches!(dgp.x_law, crate::simulate::XLaw::DiscreteUniform { .. }) {
        // A degree-one power series is saturated on a binary covariate.
        cfg.basis = Some(BasisSpec::power(1));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "data": "rows.csv",
        "case": "verify-in",
        "moment": {"model": "cdf", "thresholds": [0.5, 1.5]},
        "basis": {"kind": "power", "degree": 1},
        "propensity": {"method": "sieve-logit", "basis": {"kind": "spline", "degree": 3, "knots": 4}},
        "estimators": [
            {"family": "cep", "label": "CEP-NP"},
            {"family": "ipw-known-p", "propensity": {"method": "known", "known": "0.25 * (1 + x1)"}},
            {"family": "ipw-parametric-p"}
        ],
        "seed": 11
    }"#;

    #[test]
    fn parse_serialize_parse_is_fixed_point() {
        let a = RunConfig::from_json(SAMPLE).unwrap();
        let b = RunConfig::from_json(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.hash(), b.hash());
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_json(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn overrides_and_defaults() {
        let cfg = RunConfig::from_json(SAMPLE).unwrap();
        let est = cfg.estimator_configs(1).unwrap();
        assert_eq!(est[0].label(), "CEP-NP");
        assert_eq!(
            est[0].propensity.as_ref().unwrap().kind(),
            crate::propensity::PropensityKind::SieveLogit
        );
        assert_eq!(
            est[1].propensity.as_ref().unwrap().kind(),
            crate::propensity::PropensityKind::Known
        );
        // The run-level sieve propensity does not fit a parametric family.
        assert!(est[2].propensity.is_none());
        assert_eq!(est[2].basis, BasisSpec::power(1));
    }

    #[test]
    fn rejects_inconsistent_configs() {
        for bad in [
            r#"{"estimators": []}"#,
            r#"{"case": "verify-in", "estimators": [{"family": "cep-parametric-p"}]}"#,
            r#"{"estimators": [{"family": "ipw-known-p"}]}"#,
            r#"{"estimators": [{"family": "cep", "colour": 1}]}"#,
            r#"{"moment": {"model": "cdf", "thresholds": []}}"#,
            r#"{"simulate": {"preset": "nope"}}"#,
        ] {
            let err = RunConfig::from_json(bad).unwrap_err();
            assert_eq!(err.class(), crate::error::ErrorClass::Usage, "{bad}");
        }
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: Some(1),
            ..RunConfig::default()
        };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}

//! Data-generating processes with `Y ⊥ D | X` built in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Case, Dataset, Observation};
use crate::error::{Error, Result};
use crate::expr::Expr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum XLaw {
    /// Uniform over the listed support points.
    DiscreteUniform {
        levels: Vec<Vec<f64>>,
    },
    /// Independent normal coordinates.
    Gaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
    },
    GaussianMixture {
        components: Vec<MixtureComponent>,
    },
}

impl XLaw {
    pub fn d_x(&self) -> usize {
        match self {
            XLaw::DiscreteUniform { levels } => levels.first().map_or(0, Vec::len),
            XLaw::Gaussian { mean, .. } => mean.len(),
            XLaw::GaussianMixture { components } => components.first().map_or(0, |c| c.mean.len()),
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.d_x();
        if d == 0 {
            return Err(Error::Spec("x law has no coordinates".into()));
        }
        match self {
            XLaw::DiscreteUniform { levels } => {
                if levels.iter().any(|l| l.len() != d) {
                    return Err(Error::Spec("discrete levels differ in length".into()));
                }
            }
            XLaw::Gaussian { mean, sd } => {
                if sd.len() != d || sd.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::Spec("gaussian sd must be positive per coordinate".into()));
                }
                let _ = mean;
            }
            XLaw::GaussianMixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if components
                    .iter()
                    .any(|c| c.mean.len() != d || c.sd.len() != d || c.weight < 0.0 || c.sd.iter().any(|s| !(*s > 0.0)))
                    || (total - 1.0).abs() > 1e-9
                {
                    return Err(Error::Spec("mixture components are inconsistent".into()));
                }
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let normal = |rng: &mut ChaCha8Rng, m: &[f64], s: &[f64]| -> Vec<f64> {
            m.iter()
                .zip(s)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        match self {
            XLaw::DiscreteUniform { levels } => levels[rng.random_range(0..levels.len())].clone(),
            XLaw::Gaussian { mean, sd } => normal(rng, mean, sd),
            XLaw::GaussianMixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = components.len() - 1;
                for (k, c) in components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                normal(rng, &components[pick].mean, &components[pick].sd)
            }
        }
    }
}

/// Outcome distribution at one support point of a discrete `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YCell {
    pub x: Vec<f64>,
    pub support: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum YLaw {
    Table {
        cells: Vec<YCell>,
    },
    /// `y_k = mean_k(x) + noise_sd_k · ε_k` with independent standard normal `ε`.
    Additive {
        mean: Vec<Expr>,
        noise_sd: Vec<f64>,
    },
}

impl YLaw {
    pub fn d_y(&self) -> usize {
        match self {
            YLaw::Table { cells } => cells.first().and_then(|c| c.support.first()).map_or(0, Vec::len),
            YLaw::Additive { mean, .. } => mean.len(),
        }
    }

    pub fn cell(&self, x: &[f64]) -> Option<&YCell> {
        match self {
            YLaw::Table { cells } => cells.iter().find(|c| c.x == x),
            YLaw::Additive { .. } => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            YLaw::Table { cells } => {
                let d = self.d_y();
                for c in cells {
                    let total: f64 = c.probs.iter().sum();
                    if c.support.len() != c.probs.len()
                        || c.support.iter().any(|s| s.len() != d)
                        || c.probs.iter().any(|p| *p < 0.0)
                        || (total - 1.0).abs() > 1e-9
                    {
                        return Err(Error::Spec(format!(
                            "outcome table at x = {:?} is not a distribution",
                            c.x
                        )));
                    }
                }
            }
            YLaw::Additive { mean, noise_sd } => {
                if mean.len() != noise_sd.len() || noise_sd.iter().any(|s| *s < 0.0) {
                    return Err(Error::Spec("additive outcome law needs one sd per mean".into()));
                }
            }
        }
        if self.d_y() == 0 {
            return Err(Error::Spec("outcome law has no coordinates".into()));
        }
        Ok(())
    }

    fn draw(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self {
            YLaw::Table { .. } => {
                let cell = self
                    .cell(x)
                    .ok_or_else(|| Error::Spec(format!("no outcome table for x = {x:?}")))?;
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (s, p) in cell.support.iter().zip(&cell.probs) {
                    acc += p;
                    if u < acc {
                        return Ok(s.clone());
                    }
                }
                Ok(cell.support[cell.support.len() - 1].clone())
            }
            YLaw::Additive { mean, noise_sd } => Ok(mean
                .iter()
                .zip(noise_sd)
                .map(|(m, s)| m.eval(x) + s * rng.sample::<f64, _>(StandardNormal))
                .collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub name: String,
    pub x_law: XLaw,
    /// `P(D = 1 | X = x)`; must lie in (0, 1) on the support.
    pub p_fn: Expr,
    pub y_law: YLaw,
    pub case: Case,
}

pub const PRESETS: [&str; 3] = ["dgp-a", "dgp-a-constant", "dgp-b"];

fn two_point_table() -> YLaw {
    YLaw::Table {
        cells: vec![
            YCell {
                x: vec![0.0],
                support: vec![vec![0.0], vec![1.0]],
                probs: vec![0.5, 0.5],
            },
            YCell {
                x: vec![1.0],
                support: vec![vec![1.0], vec![2.0]],
                probs: vec![0.5, 0.5],
            },
        ],
    }
}

impl DgpSpec {
    /// Binary `X`, `p(0) = 1/4`, `p(1) = 1/2`, `Y | X=0 ~ U{0,1}`, `Y | X=1 ~ U{1,2}`.
    pub fn dgp_a(case: Case) -> Self {
        Self {
            name: "dgp-a".into(),
            x_law: XLaw::DiscreteUniform {
                levels: vec![vec![0.0], vec![1.0]],
            },
            p_fn: Expr::parse("0.25 * (1 + x1)").expect("static"),
            y_law: two_point_table(),
            case,
        }
    }

    /// DGP-A with the selection probability replaced by its mean 0.375.
    pub fn dgp_a_constant(case: Case) -> Self {
        Self {
            name: "dgp-a-constant".into(),
            p_fn: Expr::Const(0.375),
            ..Self::dgp_a(case)
        }
    }

    /// Standard normal `X`, logistic selection, smooth nonlinear mean.
    pub fn dgp_b(case: Case) -> Self {
        Self {
            name: "dgp-b".into(),
            x_law: XLaw::Gaussian {
                mean: vec![0.0],
                sd: vec![1.0],
            },
            p_fn: Expr::parse("1 / (1 + exp(-0.5 * x1))").expect("static"),
            y_law: YLaw::Additive {
                mean: vec![Expr::parse("0.5 * x1 + 0.3 * sin(2 * x1)").expect("static")],
                noise_sd: vec![0.4],
            },
            case,
        }
    }

    pub fn preset(name: &str, case: Case) -> Result<Self> {
        match name {
            "dgp-a" => Ok(Self::dgp_a(case)),
            "dgp-a-constant" => Ok(Self::dgp_a_constant(case)),
            "dgp-b" => Ok(Self::dgp_b(case)),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn d_x(&self) -> usize {
        self.x_law.d_x()
    }

    pub fn d_y(&self) -> usize {
        self.y_law.d_y()
    }

    pub fn validate(&self) -> Result<()> {
        self.x_law.validate()?;
        self.y_law.validate()?;
        if self.p_fn.arity() > self.d_x() {
            return Err(Error::Spec("p_fn refers to a covariate the x law lacks".into()));
        }
        if let XLaw::DiscreteUniform { levels } = &self.x_law {
            for x in levels {
                self.propensity(x)?;
                if matches!(self.y_law, YLaw::Table { .. }) && self.y_law.cell(x).is_none() {
                    return Err(Error::Spec(format!("no outcome table for x = {x:?}")));
                }
            }
        }
        Ok(())
    }

    /// Selection probability at `x`, checked to lie strictly inside (0, 1).
    pub fn propensity(&self, x: &[f64]) -> Result<f64> {
        let p = self.p_fn.eval(x);
        if p > 0.0 && p < 1.0 {
            Ok(p)
        } else {
            Err(Error::Spec(format!("p_fn = {p} outside (0, 1) at x = {x:?}")))
        }
    }
}

/// Draws `n` rows: `X`, then `D | X`, then `Y | X` independently of `D`.
///
/// The outcome is drawn for every row so that both cases consume the same
/// random stream; under verify-out it is then dropped for primary rows.
pub fn generate(spec: &DgpSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Spec("need at least two rows".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let x = spec.x_law.draw(&mut rng);
        let p = spec.propensity(&x)?;
        let d = (rng.random::<f64>() < p) as u8;
        let y = spec.y_law.draw(&x, &mut rng)?;
        let keep = d == 0 || spec.case == Case::VerifyIn;
        rows.push(Observation {
            x,
            y: keep.then_some(y),
            d,
        });
    }
    Dataset::new(rows, spec.case)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_determinism() {
        let spec = DgpSpec::dgp_a(Case::VerifyOut);
        assert_eq!(generate(&spec, 500, 11).unwrap(), generate(&spec, 500, 11).unwrap());
        assert_ne!(generate(&spec, 500, 11).unwrap(), generate(&spec, 500, 12).unwrap());
    }

    #[test]
    fn cases_share_draws() {
        let out = generate(&DgpSpec::dgp_a(Case::VerifyOut), 300, 5).unwrap();
        let inn = generate(&DgpSpec::dgp_a(Case::VerifyIn), 300, 5).unwrap();
        for (a, b) in out.rows().iter().zip(inn.rows()) {
            assert_eq!((a.d, &a.x), (b.d, &b.x));
            assert!(b.y.is_some());
            assert_eq!(a.y.is_some(), a.d == 0);
            if a.d == 0 {
                assert_eq!(a.y, b.y);
            }
        }
    }

    #[test]
    fn cell_frequencies_match_enumeration() {
        let n = 100_000;
        let ds = generate(&DgpSpec::dgp_a(Case::VerifyIn), n, 2024).unwrap();
        // P(x, d, y) = 1/2 · p(x)^d (1 - p(x))^(1-d) · 1/2.
        for x in [0.0, 1.0] {
            let p = 0.25 * (1.0 + x);
            for d in [0u8, 1] {
                for y in [x, x + 1.0] {
                    let prob = 0.25 * if d == 1 { p } else { 1.0 - p };
                    let count = ds
                        .rows()
                        .iter()
                        .filter(|r| r.x[0] == x && r.d == d && r.y.as_ref().unwrap()[0] == y)
                        .count() as f64;
                    let se = (prob * (1.0 - prob) / n as f64).sqrt();
                    assert!((count / n as f64 - prob).abs() < 3.0 * se, "x={x} d={d} y={y}");
                }
            }
        }
    }

    #[test]
    fn outcome_independent_of_selection_within_cells() {
        let ds = generate(&DgpSpec::dgp_a(Case::VerifyIn), 50_000, 99).unwrap();
        for x in [0.0, 1.0] {
            // 2×2 contingency table of (D, Y) within the cell.
            let mut t = [[0.0f64; 2]; 2];
            for r in ds.rows().iter().filter(|r| r.x[0] == x) {
                let yi = (r.y.as_ref().unwrap()[0] - x) as usize;
                t[r.d as usize][yi] += 1.0;
            }
            let total: f64 = t.iter().flatten().sum();
            let mut chi2 = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let e = (t[i][0] + t[i][1]) * (t[0][j] + t[1][j]) / total;
                    chi2 += (t[i][j] - e).powi(2) / e;
                }
            }
            // 99.9% quantile of chi-square with one degree of freedom.
            assert!(chi2 < 10.828, "chi2 = {chi2}");
        }
    }

    #[test]
    fn constant_selection_rate() {
        let spec = DgpSpec {
            p_fn: Expr::Const(0.3),
            ..DgpSpec::dgp_b(Case::VerifyOut)
        };
        let n = 1000;
        let ds = generate(&spec, n, 3).unwrap();
        let se = (0.3 * 0.7 / n as f64).sqrt();
        assert!((ds.n_primary() as f64 / n as f64 - 0.3).abs() < 3.0 * se);
    }

    #[test]
    fn bad_propensity_is_a_spec_error() {
        let spec = DgpSpec {
            p_fn: Expr::parse("0.5 + x1").unwrap(),
            ..DgpSpec::dgp_a(Case::VerifyOut)
        };
        assert!(matches!(generate(&spec, 10, 1), Err(Error::Spec(_))));
        let spec = DgpSpec {
            p_fn: Expr::parse("0.5 + x1").unwrap(),
            ..DgpSpec::dgp_b(Case::VerifyOut)
        };
        assert!(matches!(generate(&spec, 1000, 1), Err(Error::Spec(_))));
    }

    #[test]
    fn spec_serde_round_trip() {
        for name in PRESETS {
            let spec = DgpSpec::preset(name, Case::VerifyIn).unwrap();
            let json = serde_json::to_string(&spec).unwrap();
            let back: DgpSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, spec);
        }
    }
}

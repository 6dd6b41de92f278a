//! Propensity score `p(x) = Pr(D = 1 | X = x)`: known, parametric, sieve
//! least squares and sieve logit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linalg::{min_eigenvalue, SpdFactor};
use crate::sieve::{build_basis, eval_basis, BasisSpec, SieveBasis, SieveProjector};

pub const DEFAULT_CLIP: f64 = 0.01;
const MAX_NEWTON_ITERS: usize = 200;
const MAX_HALVINGS: usize = 50;
const SCORE_TOL: f64 = 1e-8;
const SEPARATION_INDEX: f64 = 30.0;
const INFO_EIG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    /// `p = 1 / (1 + exp(-t'γ))`.
    #[default]
    Logit,
    /// `p = t'γ`.
    Identity,
}

/// `p(x; γ)` with index `t(x)'γ` built from design expressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricFamily {
    #[serde(default)]
    pub link: Link,
    pub design: Vec<Expr>,
}

impl ParametricFamily {
    pub fn new(link: Link, design: &[&str]) -> Result<Self> {
        let design = design.iter().map(|s| Expr::parse(s)).collect::<Result<_>>()?;
        Ok(Self { link, design })
    }

    /// Logit with an intercept and every covariate entering linearly.
    pub fn linear_logit(d_x: usize) -> Self {
        let mut design = vec![Expr::Const(1.0)];
        design.extend((0..d_x).map(Expr::Var));
        Self {
            link: Link::Logit,
            design,
        }
    }

    pub fn dim(&self) -> usize {
        self.design.len()
    }

    pub fn terms(&self, x: &[f64]) -> Vec<f64> {
        self.design.iter().map(|e| e.eval(x)).collect()
    }

    pub fn value(&self, gamma: &[f64], x: &[f64]) -> f64 {
        let index = dot(&self.terms(x), gamma);
        match self.link {
            Link::Logit => logistic(index),
            Link::Identity => index,
        }
    }

    /// `∂p(x; γ)/∂γ`.
    pub fn gradient(&self, gamma: &[f64], x: &[f64]) -> Vec<f64> {
        let t = self.terms(x);
        match self.link {
            Link::Logit => {
                let p = logistic(dot(&t, gamma));
                t.iter().map(|v| p * (1.0 - p) * v).collect()
            }
            Link::Identity => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityKind {
    Known,
    Parametric,
    SieveLs,
    SieveLogit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum PropensityMethod {
    Known {
        known: Expr,
    },
    #[serde(alias = "parametric")]
    Logit {
        /// Defaults to an intercept plus each covariate.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        design: Option<Vec<Expr>>,
        #[serde(default)]
        link: Link,
    },
    SieveLs {
        #[serde(default)]
        basis: BasisSpec,
    },
    SieveLogit {
        #[serde(default)]
        basis: BasisSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensitySpec {
    #[serde(flatten)]
    pub method: PropensityMethod,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

impl PropensitySpec {
    pub fn known(expr: &str) -> Result<Self> {
        Ok(Self {
            method: PropensityMethod::Known {
                known: Expr::parse(expr)?,
            },
            clip: DEFAULT_CLIP,
        })
    }

    pub fn parametric(family: ParametricFamily) -> Self {
        Self {
            method: PropensityMethod::Logit {
                design: Some(family.design),
                link: family.link,
            },
            clip: DEFAULT_CLIP,
        }
    }

    pub fn sieve_ls(basis: BasisSpec) -> Self {
        Self {
            method: PropensityMethod::SieveLs { basis },
            clip: DEFAULT_CLIP,
        }
    }

    pub fn sieve_logit(basis: BasisSpec) -> Self {
        Self {
            method: PropensityMethod::SieveLogit { basis },
            clip: DEFAULT_CLIP,
        }
    }

    pub fn kind(&self) -> PropensityKind {
        match self.method {
            PropensityMethod::Known { .. } => PropensityKind::Known,
            PropensityMethod::Logit { .. } => PropensityKind::Parametric,
            PropensityMethod::SieveLs { .. } => PropensityKind::SieveLs,
            PropensityMethod::SieveLogit { .. } => PropensityKind::SieveLogit,
        }
    }
}

/// A fitted (or known) propensity score.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub kind: PropensityKind,
    /// `γ̂` for parametric models, sieve coefficients otherwise.
    pub params: Vec<f64>,
    pub basis: Option<SieveBasis>,
    pub family: Option<ParametricFamily>,
    pub known: Option<Expr>,
    pub clip: f64,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl PropensityModel {
    pub fn known(expr: Expr, clip: f64) -> Self {
        Self {
            kind: PropensityKind::Known,
            params: Vec::new(),
            basis: None,
            family: None,
            known: Some(expr),
            clip,
            iterations: 0,
            warnings: Vec::new(),
        }
    }

    /// A parametric model held at a given `γ` (for example the true value).
    pub fn parametric_at(family: ParametricFamily, gamma: Vec<f64>, clip: f64) -> Self {
        Self {
            kind: PropensityKind::Parametric,
            params: gamma,
            basis: None,
            family: Some(family),
            known: None,
            clip,
            iterations: 0,
            warnings: Vec::new(),
        }
    }

    /// Unclipped model value.
    pub fn raw(&self, x: &[f64]) -> f64 {
        match self.kind {
            PropensityKind::Known => self.known.as_ref().map_or(f64::NAN, |e| e.eval(x)),
            PropensityKind::Parametric => self.family.as_ref().map_or(f64::NAN, |f| f.value(&self.params, x)),
            PropensityKind::SieveLs | PropensityKind::SieveLogit => {
                let Some(basis) = &self.basis else {
                    return f64::NAN;
                };
                let index = dot(&eval_basis(basis, x), &self.params);
                if self.kind == PropensityKind::SieveLogit {
                    logistic(index)
                } else {
                    index
                }
            }
        }
    }

    /// Model value clipped to `[δ, 1 - δ]`, and whether clipping bit.
    pub fn propensity_clipped(&self, x: &[f64]) -> (f64, bool) {
        let raw = self.raw(x);
        let lo = self.clip;
        let hi = 1.0 - self.clip;
        if raw < lo {
            (lo, true)
        } else if raw > hi {
            (hi, true)
        } else if raw.is_nan() {
            (0.5, true)
        } else {
            (raw, false)
        }
    }

    pub fn propensity_at(&self, x: &[f64]) -> f64 {
        self.propensity_clipped(x).0
    }

    /// `p_γ(x) = ∂p(x; γ)/∂γ` for parametric models.
    pub fn param_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.family.as_ref().map(|f| f.gradient(&self.params, x))
    }
}

pub fn propensity_at(model: &PropensityModel, x: &[f64]) -> f64 {
    model.propensity_at(x)
}

pub fn fit_propensity(spec: &PropensitySpec, ds: &Dataset) -> Result<PropensityModel> {
    if !(0.0..0.5).contains(&spec.clip) {
        return Err(Error::Config(format!("clip {} outside [0, 0.5)", spec.clip)));
    }
    let d: Vec<f64> = ds.rows().iter().map(|r| r.d as f64).collect();
    let xs: Vec<&[f64]> = ds.rows().iter().map(|r| r.x.as_slice()).collect();
    match &spec.method {
        PropensityMethod::Known { known } => {
            if known.arity() > ds.d_x() {
                return Err(Error::Config(format!(
                    "known propensity uses x{} but data has {} covariates",
                    known.arity(),
                    ds.d_x()
                )));
            }
            Ok(PropensityModel::known(known.clone(), spec.clip))
        }
        PropensityMethod::Logit { design, link } => {
            let family = match design {
                Some(design) => ParametricFamily {
                    link: *link,
                    design: design.clone(),
                },
                None => ParametricFamily {
                    link: *link,
                    ..ParametricFamily::linear_logit(ds.d_x())
                },
            };
            if family.design.iter().any(|e| e.arity() > ds.d_x()) {
                return Err(Error::Config("propensity design references a missing covariate".into()));
            }
            let t = DMatrix::from_fn(xs.len(), family.dim(), |i, j| family.design[j].eval(xs[i]));
            let fit = match family.link {
                Link::Logit => newton_logit(&t, &d)?,
                Link::Identity => newton_identity(&t, &d)?,
            };
            Ok(PropensityModel {
                kind: PropensityKind::Parametric,
                params: fit.gamma,
                basis: None,
                family: Some(family),
                known: None,
                clip: spec.clip,
                iterations: fit.iterations,
                warnings: fit.warnings,
            })
        }
        PropensityMethod::SieveLs { basis } => {
            let x = ds.x_matrix(&ds.all_indices());
            let b = build_basis(basis, &x)?;
            let proj = SieveProjector::new(&b, &x)?;
            let fit = proj.fit(&DMatrix::from_column_slice(d.len(), 1, &d))?;
            let mut warnings = b.warnings.clone();
            if fit.ridge > 0.0 {
                warnings.push(format!("sieve propensity used ridge {:e}", fit.ridge));
            }
            Ok(PropensityModel {
                kind: PropensityKind::SieveLs,
                params: fit.coeffs.column(0).iter().copied().collect(),
                basis: Some(b),
                family: None,
                known: None,
                clip: spec.clip,
                iterations: 0,
                warnings,
            })
        }
        PropensityMethod::SieveLogit { basis } => {
            let x = ds.x_matrix(&ds.all_indices());
            let b = build_basis(basis, &x)?;
            let q = crate::sieve::design_matrix(&b, &x);
            let fit = newton_logit(&q, &d)?;
            let mut warnings = b.warnings.clone();
            warnings.extend(fit.warnings);
            Ok(PropensityModel {
                kind: PropensityKind::SieveLogit,
                params: fit.gamma,
                basis: Some(b),
                family: None,
                known: None,
                clip: spec.clip,
                iterations: fit.iterations,
                warnings,
            })
        }
    }
}

/// Per-row scores `S_γ(D_i, X_i)` and their average outer product.
#[derive(Debug, Clone)]
pub struct ScoreInfo {
    /// `n × d_γ`.
    pub scores: DMatrix<f64>,
    pub information: DMatrix<f64>,
}

/// Scores `S_γ = (D - p) p_γ / (p (1 - p))` of a parametric model over `ds`.
pub fn score_info(model: &PropensityModel, ds: &Dataset) -> Result<ScoreInfo> {
    let family = match (&model.kind, &model.family) {
        (PropensityKind::Parametric, Some(f)) => f,
        _ => {
            return Err(Error::UnsupportedSpec(
                "score information needs a parametric propensity".into(),
            ))
        }
    };
    let n = ds.n();
    let k = family.dim();
    let mut scores = DMatrix::zeros(n, k);
    for (i, row) in ds.rows().iter().enumerate() {
        let p = family.value(&model.params, &row.x);
        let grad = family.gradient(&model.params, &row.x);
        let w = (row.d as f64 - p) / (p * (1.0 - p));
        for j in 0..k {
            scores[(i, j)] = w * grad[j];
        }
    }
    let information = scores.transpose() * &scores / n as f64;
    let min_eigenvalue = min_eigenvalue(&information);
    if !(min_eigenvalue > INFO_EIG_TOL) {
        return Err(Error::SingularInformation { min_eigenvalue });
    }
    Ok(ScoreInfo { scores, information })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

struct NewtonFit {
    gamma: Vec<f64>,
    iterations: usize,
    warnings: Vec<String>,
}

/// Objective pieces at a parameter value: mean log-likelihood, gradient and
/// negative Hessian; `None` when the parameter is infeasible.
type Pieces = Option<(f64, DVector<f64>, DMatrix<f64>)>;

fn damped_newton(start: DVector<f64>, eval: impl Fn(&DVector<f64>) -> Pieces) -> Result<(DVector<f64>, usize, f64)> {
    let mut gamma = start;
    let (mut ll, mut grad, mut neg_hess) = eval(&gamma).ok_or(Error::FitDiverged {
        iterations: 0,
        gradient_norm: f64::NAN,
    })?;
    let mut iterations = 0;
    while iterations < MAX_NEWTON_ITERS && grad.norm() >= 1e-13 {
        iterations += 1;
        let k = gamma.len();
        let mut h = neg_hess.clone();
        let mut factor = SpdFactor::new(&h);
        let mut bump = 1e-12 * (h.trace() / k as f64).max(1e-300);
        while factor.is_none() && bump < 1e6 {
            h = neg_hess.clone();
            for i in 0..k {
                h[(i, i)] += bump;
            }
            factor = SpdFactor::new(&h);
            bump *= 100.0;
        }
        let Some(factor) = factor else {
            break;
        };
        let step = factor.solve_vec(&grad);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &gamma + &step * t;
            if let Some(pieces) = eval(&cand) {
                // Near the optimum the gain is below summation noise in the
                // log-likelihood; accept when the score shrinks instead.
                let within_noise = pieces.0 >= ll - 1e-12 * (1.0 + ll.abs()) && pieces.1.norm() < grad.norm();
                if pieces.0 >= ll || within_noise {
                    accepted = Some((cand, pieces));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, (ll2, g2, h2))) = accepted else {
            break;
        };
        let stalled = (&cand - &gamma).norm() <= 1e-15 * (1.0 + gamma.norm());
        gamma = cand;
        ll = ll2;
        grad = g2;
        neg_hess = h2;
        if stalled {
            break;
        }
    }
    Ok((gamma, iterations, grad.norm()))
}

fn newton_logit(t: &DMatrix<f64>, d: &[f64]) -> Result<NewtonFit> {
    let (n, k) = t.shape();
    let nf = n as f64;
    let eval = |g: &DVector<f64>| -> Pieces {
        let index = t * g;
        let mut ll = 0.0;
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..n {
            let s = index[i];
            // log p = -log(1 + e^-s), log(1 - p) = -log(1 + e^s)
            let lp = -softplus(-s);
            let lq = -softplus(s);
            ll += d[i] * lp + (1.0 - d[i]) * lq;
            let p = logistic(s);
            let row = t.row(i);
            grad += row.transpose() * (d[i] - p);
            let w = p * (1.0 - p);
            hess += row.transpose() * row * w;
        }
        Some((ll / nf, grad / nf, hess / nf))
    };
    let (gamma, iterations, gnorm) = damped_newton(DVector::zeros(k), eval)?;
    let max_index = (t * &gamma).amax();
    let mut warnings = Vec::new();
    if max_index > SEPARATION_INDEX {
        warnings.push(format!(
            "SeparationWarning: logit index reaches {max_index:.1}; fitted probabilities hit the clip bounds"
        ));
    } else if gnorm >= SCORE_TOL {
        return Err(Error::FitDiverged {
            iterations,
            gradient_norm: gnorm,
        });
    }
    Ok(NewtonFit {
        gamma: gamma.iter().copied().collect(),
        iterations,
        warnings,
    })
}

fn newton_identity(t: &DMatrix<f64>, d: &[f64]) -> Result<NewtonFit> {
    let (n, k) = t.shape();
    let nf = n as f64;
    let eval = |g: &DVector<f64>| -> Pieces {
        let p = t * g;
        let mut ll = 0.0;
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..n {
            let pi = p[i];
            if !(pi > 0.0 && pi < 1.0) {
                return None;
            }
            ll += d[i] * pi.ln() + (1.0 - d[i]) * (1.0 - pi).ln();
            let row = t.row(i);
            grad += row.transpose() * ((d[i] - pi) / (pi * (1.0 - pi)));
            let w = d[i] / (pi * pi) + (1.0 - d[i]) / ((1.0 - pi) * (1.0 - pi));
            hess += row.transpose() * row * w;
        }
        Some((ll / nf, grad / nf, hess / nf))
    };
    let start = identity_start(t, d)
        .ok_or_else(|| Error::Config("identity-link propensity: no starting value keeps p(x) inside (0, 1)".into()))?;
    let (gamma, iterations, gnorm) = damped_newton(start, eval)?;
    if gnorm >= SCORE_TOL {
        return Err(Error::FitDiverged {
            iterations,
            gradient_norm: gnorm,
        });
    }
    Ok(NewtonFit {
        gamma: gamma.iter().copied().collect(),
        iterations,
        warnings: Vec::new(),
    })
}

/// A feasible start for the identity link: least squares, shrunk toward the
/// constant fit `p̄` when some fitted value leaves `(0, 1)`.
fn identity_start(t: &DMatrix<f64>, d: &[f64]) -> Option<DVector<f64>> {
    let (n, k) = t.shape();
    let pbar = d.iter().sum::<f64>() / n as f64;
    let feasible = |g: &DVector<f64>| (t * g).iter().all(|&p| p > 1e-6 && p < 1.0 - 1e-6);
    let ls =
        SpdFactor::new(&(t.transpose() * t)).map(|f| f.solve_vec(&(t.transpose() * DVector::from_column_slice(d))));
    if let Some(ls) = &ls {
        if feasible(ls) {
            return Some(ls.clone());
        }
    }
    // A design column proportional to the constant gives an anchor `p ≡ p̄`.
    let mut anchor = None;
    for j in 0..k {
        let c = t[(0, j)];
        if c != 0.0 && t.column(j).iter().all(|&v| v == c) {
            let mut g = DVector::zeros(k);
            g[j] = pbar / c;
            anchor = Some(g);
            break;
        }
    }
    if anchor.is_none() {
        // Single-column families `γ t(x)` with positive `t`: match the mean.
        if k == 1 && t.column(0).iter().all(|&v| v > 0.0) {
            let mean_t = t.column(0).sum() / n as f64;
            let g = DVector::from_element(1, pbar / mean_t);
            if feasible(&g) {
                return Some(g);
            }
            let max_t = t.column(0).max();
            return Some(DVector::from_element(1, 0.5 / max_t));
        }
    }
    let anchor = anchor?;
    if let Some(ls) = ls {
        let mut lambda = 0.5;
        for _ in 0..60 {
            let g = &anchor + (&ls - &anchor) * lambda;
            if feasible(&g) {
                return Some(g);
            }
            lambda *= 0.5;
        }
    }
    feasible(&anchor).then_some(anchor)
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Case, Observation};

    fn dataset(rows: &[(f64, u8)]) -> Dataset {
        let obs = rows
            .iter()
            .map(|&(x, d)| Observation {
                x: vec![x],
                y: if d == 0 { Some(vec![x]) } else { None },
                d,
            })
            .collect();
        Dataset::new(obs, Case::VerifyOut).unwrap()
    }

    /// DGP-A cell proportions, scaled to 8 rows per x-cell.
    fn dgp_a_cells() -> Dataset {
        let mut rows = Vec::new();
        for _ in 0..2 {
            rows.push((0.0, 1));
        }
        for _ in 0..6 {
            rows.push((0.0, 0));
        }
        for _ in 0..4 {
            rows.push((1.0, 1));
            rows.push((1.0, 0));
        }
        dataset(&rows)
    }

    #[test]
    fn intercept_only_logit_matches_sample_mean() {
        let ds = dataset(&[(0.0, 1), (1.0, 1), (2.0, 0), (3.0, 0)]);
        let spec = PropensitySpec::parametric(ParametricFamily::new(Link::Logit, &["1"]).unwrap());
        let m = fit_propensity(&spec, &ds).unwrap();
        for x in [0.0, 5.0] {
            assert!((m.propensity_at(&[x]) - 0.5).abs() < 1e-12);
        }
        let info = score_info(&m, &ds).unwrap();
        // Bernoulli information 1 / (p (1 - p)) in the p-scale is 4; logit scale is p(1-p).
        assert!((info.information[(0, 0)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn all_methods_agree_on_saturated_cells() {
        let ds = dgp_a_cells();
        let logit = fit_propensity(&PropensitySpec::parametric(ParametricFamily::linear_logit(1)), &ds).unwrap();
        let ident = fit_propensity(
            &PropensitySpec::parametric(ParametricFamily::new(Link::Identity, &["1", "x1"]).unwrap()),
            &ds,
        )
        .unwrap();
        let ls = fit_propensity(&PropensitySpec::sieve_ls(BasisSpec::power(1)), &ds).unwrap();
        let sl = fit_propensity(&PropensitySpec::sieve_logit(BasisSpec::power(1)), &ds).unwrap();
        for (x, cell) in [(0.0, 0.25), (1.0, 0.5)] {
            for m in [&logit, &ident, &ls, &sl] {
                assert!((m.propensity_at(&[x]) - cell).abs() < 1e-10, "{:?}", m.kind);
            }
        }
    }

    #[test]
    fn score_information_matches_enumeration() {
        let ds = dgp_a_cells();
        let ident = fit_propensity(
            &PropensitySpec::parametric(ParametricFamily::new(Link::Identity, &["1", "x1"]).unwrap()),
            &ds,
        )
        .unwrap();
        let info = score_info(&ident, &ds).unwrap();
        // E[t t' / (p (1 - p))] over x ∈ {0, 1} with p = 1/4, 1/2.
        let cells = [(0.0, 0.25), (1.0, 0.5)];
        let mut oracle = [[0.0_f64; 2]; 2];
        for (x, p) in cells {
            let t = [1.0, x];
            for a in 0..2 {
                for b in 0..2 {
                    oracle[a][b] += 0.5 * t[a] * t[b] / (p * (1.0 - p));
                }
            }
        }
        assert!((oracle[0][0] - 14.0 / 3.0).abs() < 1e-12);
        for a in 0..2 {
            for b in 0..2 {
                assert!((info.information[(a, b)] - oracle[a][b]).abs() < 1e-9);
            }
        }
        let col_means = info.scores.row_sum() / ds.n() as f64;
        assert!(col_means.norm() < 1e-7);

        let logit = fit_propensity(&PropensitySpec::parametric(ParametricFamily::linear_logit(1)), &ds).unwrap();
        let info = score_info(&logit, &ds).unwrap();
        // Logit scale: E[p (1 - p) t t'].
        let expect = [[7.0 / 32.0, 1.0 / 8.0], [1.0 / 8.0, 1.0 / 8.0]];
        for a in 0..2 {
            for b in 0..2 {
                assert!((info.information[(a, b)] - expect[a][b]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_parameter_identity_family() {
        let ds = dgp_a_cells();
        let spec = PropensitySpec::parametric(ParametricFamily::new(Link::Identity, &["1 + x1"]).unwrap());
        let m = fit_propensity(&spec, &ds).unwrap();
        assert!((m.params[0] - 0.25).abs() < 1e-10);
    }

    #[test]
    fn clipping_semantics() {
        let m = PropensityModel::known(Expr::parse("0.3").unwrap(), 0.01);
        assert_eq!(m.propensity_at(&[0.0]), 0.3);
        let ls = PropensityModel::known(Expr::parse("1.07").unwrap(), 0.01);
        assert_eq!(ls.propensity_clipped(&[0.0]), (0.99, true));
        assert!(logistic(800.0) <= 1.0 && logistic(-800.0) >= 0.0);
        assert!(logistic(30.0) < 1.0 && logistic(-30.0) > 0.0);
    }

    #[test]
    fn separation_warns_instead_of_failing() {
        let ds = dataset(&[(0.0, 0), (1.0, 0), (2.0, 1), (3.0, 1)]);
        let m = fit_propensity(&PropensitySpec::parametric(ParametricFamily::linear_logit(1)), &ds).unwrap();
        assert!(m.warnings.iter().any(|w| w.starts_with("SeparationWarning")));
        assert_eq!(m.propensity_at(&[3.0]), 0.99);
    }

    #[test]
    fn sieve_ls_mean_equals_sample_mean() {
        let rows: Vec<(f64, u8)> = (0..40).map(|i| ((i as f64 * 0.37).sin(), (i % 3 == 0) as u8)).collect();
        let ds = dataset(&rows);
        let m = fit_propensity(&PropensitySpec::sieve_ls(BasisSpec::spline(3, 3)), &ds).unwrap();
        let mean_fit: f64 = ds.rows().iter().map(|r| m.raw(&r.x)).sum::<f64>() / 40.0;
        let mean_d = rows.iter().filter(|r| r.1 == 1).count() as f64 / 40.0;
        assert!((mean_fit - mean_d).abs() < 1e-12);
        let sl = fit_propensity(&PropensitySpec::sieve_logit(BasisSpec::spline(3, 3)), &ds).unwrap();
        let ll = |p: &dyn Fn(&[f64]) -> f64| {
            ds.rows()
                .iter()
                .map(|r| {
                    let v = p(&r.x);
                    if r.d == 1 {
                        v.ln()
                    } else {
                        (1.0 - v).ln()
                    }
                })
                .sum::<f64>()
        };
        assert!(ll(&|x| sl.raw(x)) >= ll(&|_| mean_d) - 1e-12);
    }

    #[test]
    fn spec_serde_round_trip() {
        let text = r#"{"method":"logit","design":["1","x1"],"link":"identity","clip":0.02}"#;
        let spec: PropensitySpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.clip, 0.02);
        let again: PropensitySpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(again, spec);
        let known: PropensitySpec = serde_json::from_str(r#"{"method":"known","known":"0.3"}"#).unwrap();
        assert_eq!(known.clip, DEFAULT_CLIP);
        assert_eq!(known.kind(), PropensityKind::Known);
    }
}

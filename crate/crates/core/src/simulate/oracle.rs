//! Population values of `β₀`, `E(X; β₀)`, `V(m | X)` and the bound
//! matrices, by exact enumeration (discrete laws) or quadrature (continuous
//! one-dimensional `X` with an additive outcome).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::bounds::{efficiency_bound, omega_from_parts, BoundKind, OmegaParts, ParamParts};
use crate::data::Case;
use crate::error::{Error, Result};
use crate::estimators::EstimatorFamily;
use crate::linalg::{symmetrize, to_rows, SpdFactor};
use crate::moments::{ModelForm, MomentSpec};
use crate::propensity::ParametricFamily;
use crate::simulate::dgp::{DgpSpec, XLaw, YLaw};

/// Simpson intervals per unit of standard deviation.
const SIMPSON_PER_SD: usize = 200;
const SIMPSON_RANGE_SD: f64 = 10.0;

/// Parametric propensity family together with its true parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleParam {
    pub family: ParametricFamily,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCell {
    pub x: Vec<f64>,
    pub prob: f64,
    pub p: f64,
    pub e: Vec<f64>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Oracle {
    pub case: Case,
    pub beta0: Vec<f64>,
    pub p_marginal: f64,
    pub jacobian: Vec<Vec<f64>>,
    /// Per-support-point tables; empty for quadrature oracles.
    pub cells: Vec<OracleCell>,
    pub omega1: Vec<Vec<f64>>,
    pub omega2: Vec<Vec<f64>>,
    pub omega1_known: Vec<Vec<f64>>,
    pub omega_param: Option<Vec<Vec<f64>>>,
    pub omega_ipw_known: Vec<Vec<f64>>,
    pub omega_ipw_param: Option<Vec<Vec<f64>>>,
}

fn m(rows: &[Vec<f64>]) -> DMatrix<f64> {
    crate::linalg::from_rows(rows)
}

impl Oracle {
    /// The `Ω` whose bound the given estimator family attains.
    pub fn omega(&self, family: EstimatorFamily) -> Option<DMatrix<f64>> {
        let out = self.case == Case::VerifyOut;
        match family {
            EstimatorFamily::Unadjusted => None,
            EstimatorFamily::Cep | EstimatorFamily::Ipw => Some(m(if out { &self.omega1 } else { &self.omega2 })),
            EstimatorFamily::CepParametricP | EstimatorFamily::IpwMixed if out => {
                self.omega_param.as_ref().map(|o| m(o))
            }
            EstimatorFamily::CepKnownP if out => Some(m(&self.omega1_known)),
            EstimatorFamily::IpwKnownP => Some(m(&self.omega_ipw_known)),
            EstimatorFamily::IpwParametricP => self.omega_ipw_param.as_ref().map(|o| m(o)),
            _ => None,
        }
    }

    /// Asymptotic variance `(J'Ω⁻¹J)⁻¹` of `√n(β̂ − β₀)` for `family`.
    pub fn bound(&self, family: EstimatorFamily) -> Option<DMatrix<f64>> {
        let omega = self.omega(family)?;
        efficiency_bound(&m(&self.jacobian), &omega).ok().map(|(b, _)| b)
    }
}

/// One averaging point: `x`, its probability mass, `p(x)`.
struct Node {
    x: Vec<f64>,
    prob: f64,
    p: f64,
}

/// Conditional mean and variance of the moment at `x`.
trait Conditional {
    fn mean(&self, x: &[f64], beta: &[f64]) -> Result<DVector<f64>>;
    fn variance(&self, x: &[f64], beta: &[f64]) -> Result<DMatrix<f64>>;
}

struct Enumerated<'a> {
    model: crate::moments::MomentModel,
    y_law: &'a YLaw,
}

impl Enumerated<'_> {
    fn moments(&self, x: &[f64], beta: &[f64]) -> Result<Vec<(f64, DVector<f64>)>> {
        let cell = self
            .y_law
            .cell(x)
            .ok_or_else(|| Error::Spec(format!("no outcome table for x = {x:?}")))?;
        Ok(cell
            .support
            .iter()
            .zip(&cell.probs)
            .map(|(y, &pr)| (pr, DVector::from_vec(self.model.eval_raw(y, x, beta))))
            .collect())
    }
}

impl Conditional for Enumerated<'_> {
    fn mean(&self, x: &[f64], beta: &[f64]) -> Result<DVector<f64>> {
        let mut e = DVector::zeros(self.model.d_m());
        for (pr, v) in self.moments(x, beta)? {
            e += v * pr;
        }
        Ok(e)
    }

    fn variance(&self, x: &[f64], beta: &[f64]) -> Result<DMatrix<f64>> {
        let e = self.mean(x, beta)?;
        let d = e.len();
        let mut v = DMatrix::zeros(d, d);
        for (pr, val) in self.moments(x, beta)? {
            let r = val - &e;
            v += &r * r.transpose() * pr;
        }
        Ok(symmetrize(&v))
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Closed-form conditional moments under `y = μ(x) + σε`.
struct Additive<'a> {
    spec: &'a MomentSpec,
    mean: &'a [crate::expr::Expr],
    sd: &'a [f64],
}

impl Conditional for Additive<'_> {
    fn mean(&self, x: &[f64], beta: &[f64]) -> Result<DVector<f64>> {
        match self.spec {
            MomentSpec::Cdf { thresholds } => {
                let mu = self.mean[0].eval(x);
                Ok(DVector::from_iterator(
                    thresholds.len(),
                    thresholds.iter().zip(beta).map(|(t, b)| cdf_at(*t, mu, self.sd[0]) - b),
                ))
            }
            MomentSpec::Mean { dim } => {
                let d = dim.unwrap_or(self.mean.len());
                Ok(DVector::from_iterator(
                    d,
                    (0..d).map(|k| self.mean[k].eval(x) - beta[k]),
                ))
            }
            MomentSpec::Linreg { regressors } => {
                let xt: Vec<f64> = regressors.iter().map(|r| r.eval(x)).collect();
                let fit: f64 = xt.iter().zip(beta).map(|(a, b)| a * b).sum();
                let resid = self.mean[0].eval(x) - fit;
                Ok(DVector::from_iterator(xt.len(), xt.iter().map(|v| v * resid)))
            }
        }
    }

    fn variance(&self, x: &[f64], _beta: &[f64]) -> Result<DMatrix<f64>> {
        match self.spec {
            MomentSpec::Cdf { thresholds } => {
                let mu = self.mean[0].eval(x);
                let f: Vec<f64> = thresholds.iter().map(|t| cdf_at(*t, mu, self.sd[0])).collect();
                let k = f.len();
                Ok(DMatrix::from_fn(k, k, |a, b| {
                    let lo = if thresholds[a] <= thresholds[b] { f[a] } else { f[b] };
                    lo - f[a] * f[b]
                }))
            }
            MomentSpec::Mean { dim } => {
                let d = dim.unwrap_or(self.mean.len());
                Ok(DMatrix::from_fn(d, d, |a, b| {
                    if a == b {
                        self.sd[a] * self.sd[a]
                    } else {
                        0.0
                    }
                }))
            }
            MomentSpec::Linreg { regressors } => {
                let xt: Vec<f64> = regressors.iter().map(|r| r.eval(x)).collect();
                let s2 = self.sd[0] * self.sd[0];
                let k = xt.len();
                Ok(DMatrix::from_fn(k, k, |a, b| s2 * xt[a] * xt[b]))
            }
        }
    }
}

fn cdf_at(t: f64, mu: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        (mu <= t) as u8 as f64
    } else {
        std_normal_cdf((t - mu) / sd)
    }
}

/// Exact oracle for a DGP with discrete `X` and tabulated `Y | X`.
pub fn exact_oracle_discrete(
    spec: &DgpSpec,
    moment: &MomentSpec,
    case: Case,
    param: Option<&OracleParam>,
) -> Result<Oracle> {
    spec.validate()?;
    let levels = match (&spec.x_law, &spec.y_law) {
        (XLaw::DiscreteUniform { levels }, YLaw::Table { .. }) => levels,
        _ => {
            return Err(Error::UnsupportedSpec(
                "exact enumeration needs discrete x and a tabulated outcome law".into(),
            ))
        }
    };
    let prob = 1.0 / levels.len() as f64;
    let nodes = levels
        .iter()
        .map(|x| {
            Ok(Node {
                x: x.clone(),
                prob,
                p: spec.propensity(x)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cond = Enumerated {
        model: moment.build(spec.d_y())?,
        y_law: &spec.y_law,
    };
    build_oracle(&nodes, &cond, moment, spec.d_y(), case, param, true)
}

/// Quadrature oracle for a one-dimensional continuous `X` and additive `Y`.
pub fn quadrature_oracle(
    spec: &DgpSpec,
    moment: &MomentSpec,
    case: Case,
    param: Option<&OracleParam>,
) -> Result<Oracle> {
    spec.validate()?;
    let (mean, sd) = match &spec.y_law {
        YLaw::Additive { mean, noise_sd } => (mean, noise_sd),
        _ => {
            return Err(Error::UnsupportedSpec(
                "quadrature needs an additive outcome law".into(),
            ))
        }
    };
    if spec.d_x() != 1 {
        return Err(Error::UnsupportedSpec("quadrature supports one covariate".into()));
    }
    let components: Vec<(f64, f64, f64)> = match &spec.x_law {
        XLaw::Gaussian { mean, sd } => vec![(1.0, mean[0], sd[0])],
        XLaw::GaussianMixture { components } => components.iter().map(|c| (c.weight, c.mean[0], c.sd[0])).collect(),
        XLaw::DiscreteUniform { .. } => {
            return Err(Error::UnsupportedSpec("use exact enumeration for discrete x".into()))
        }
    };
    let lo = components
        .iter()
        .map(|c| c.1 - SIMPSON_RANGE_SD * c.2)
        .fold(f64::INFINITY, f64::min);
    let hi = components
        .iter()
        .map(|c| c.1 + SIMPSON_RANGE_SD * c.2)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_sd = components.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let mut intervals = ((hi - lo) / min_sd * SIMPSON_PER_SD as f64).ceil() as usize;
    intervals += intervals % 2;
    let h = (hi - lo) / intervals as f64;
    let density = |x: f64| {
        components
            .iter()
            .map(|(w, mu, s)| {
                let z = (x - mu) / s;
                w * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum::<f64>()
    };
    let mut nodes = Vec::with_capacity(intervals + 1);
    for i in 0..=intervals {
        let x = lo + h * i as f64;
        let coef = if i == 0 || i == intervals {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let xv = vec![x];
        nodes.push(Node {
            p: spec.propensity(&xv)?,
            x: xv,
            prob: coef * h / 3.0 * density(x),
        });
    }
    let total: f64 = nodes.iter().map(|n| n.prob).sum();
    for n in &mut nodes {
        n.prob /= total;
    }
    let cond = Additive { spec: moment, mean, sd };
    build_oracle(&nodes, &cond, moment, spec.d_y(), case, param, false)
}

fn build_oracle(
    nodes: &[Node],
    cond: &dyn Conditional,
    moment: &MomentSpec,
    d_y: usize,
    case: Case,
    param: Option<&OracleParam>,
    keep_cells: bool,
) -> Result<Oracle> {
    let model = moment.build(d_y)?;
    let k = model.d_beta();
    let d_m = model.d_m();
    let big_p: f64 = nodes.iter().map(|n| n.prob * n.p).sum();
    let target = |n: &Node| match case {
        Case::VerifyOut => n.prob * n.p / big_p,
        Case::VerifyIn => n.prob,
    };

    // β₀ from the population moment, which is affine in β for every built-in model.
    if model.form() == ModelForm::General {
        return Err(Error::UnsupportedSpec(
            "oracle needs a location or affine moment".into(),
        ));
    }
    let pop = |beta: &[f64]| -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(d_m);
        for n in nodes {
            acc += cond.mean(&n.x, beta)? * target(n);
        }
        Ok(acc)
    };
    let a = pop(&vec![0.0; k])?;
    let mut jac = DMatrix::zeros(d_m, k);
    for c in 0..k {
        let mut e = vec![0.0; k];
        e[c] = 1.0;
        jac.set_column(c, &(pop(&e)? - &a));
    }
    let lhs = symmetrize(&(jac.transpose() * &jac));
    let f = SpdFactor::new(&lhs).ok_or(Error::RankDeficient { ratio: 0.0 })?;
    let beta0: Vec<f64> = f.solve_vec(&(-(jac.transpose() * &a))).iter().copied().collect();

    let mut e = DMatrix::zeros(nodes.len(), d_m);
    let mut v = Vec::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        e.set_row(i, &cond.mean(&n.x, &beta0)?.transpose());
        v.push(cond.variance(&n.x, &beta0)?);
    }
    let parts = OmegaParts {
        weights: nodes.iter().map(|n| n.prob).collect(),
        e: e.clone(),
        v: v.clone(),
        p: nodes.iter().map(|n| n.p).collect(),
        floored: 0,
    };
    let omega1 = omega_from_parts(BoundKind::Omega1, &parts, big_p, None)?;
    let omega2 = omega_from_parts(BoundKind::Omega2, &parts, big_p, None)?;
    let omega1_known = omega_from_parts(BoundKind::Omega1Known, &parts, big_p, None)?;

    // E[ψψ'] for fixed-propensity IPW: (1-D) m w(X) with E[mm'|X] = V + EE'.
    let out = case == Case::VerifyOut;
    let ipw_w = |p: f64| if out { p / ((1.0 - p) * big_p) } else { 1.0 / (1.0 - p) };
    let mut ipw_known = DMatrix::zeros(d_m, d_m);
    for (i, n) in nodes.iter().enumerate() {
        let er = e.row(i).transpose();
        let w = ipw_w(n.p);
        ipw_known += (&v[i] + &er * er.transpose()) * (n.prob * (1.0 - n.p) * w * w);
    }
    let ipw_known = symmetrize(&ipw_known);

    let (omega_param, omega_ipw_param) = match param {
        None => (None, None),
        Some(op) => {
            let g_dim = op.family.dim();
            let mut grads = DMatrix::zeros(nodes.len(), g_dim);
            let mut info = DMatrix::zeros(g_dim, g_dim);
            for (i, n) in nodes.iter().enumerate() {
                let pv = op.family.value(&op.gamma, &n.x);
                if (pv - n.p).abs() > 1e-10 {
                    return Err(Error::Spec(format!(
                        "parametric family gives p = {pv} but the DGP has {} at x = {:?}",
                        n.p, n.x
                    )));
                }
                let gr = DVector::from_vec(op.family.gradient(&op.gamma, &n.x));
                grads.set_row(i, &gr.transpose());
                info += &gr * gr.transpose() * (n.prob / (n.p * (1.0 - n.p)));
            }
            let info = symmetrize(&info);
            let pp = ParamParts {
                p_grad: grads.clone(),
                information: info.clone(),
            };
            let omega_param = if out {
                Some(omega_from_parts(BoundKind::OmegaParam, &parts, big_p, Some(&pp))?)
            } else {
                None
            };
            // ψ = f + G I⁻¹ S with H = E[f S'], S = -p_γ/(1-p) on D = 0 rows.
            let mut g = DMatrix::zeros(d_m, g_dim);
            let mut hm = DMatrix::zeros(d_m, g_dim);
            for (i, n) in nodes.iter().enumerate() {
                let er = e.row(i).transpose();
                let gr = grads.row(i);
                let gscale = if out {
                    1.0 / ((1.0 - n.p) * big_p)
                } else {
                    1.0 / (1.0 - n.p)
                };
                g += &er * gr * (n.prob * gscale);
                hm -= &er * gr * (n.prob * ipw_w(n.p));
            }
            let fi = SpdFactor::new(&info).ok_or(Error::SingularInformation {
                min_eigenvalue: crate::linalg::min_eigenvalue(&info),
            })?;
            let c = fi.solve(&g.transpose()).transpose();
            let om = &ipw_known + &hm * c.transpose() + &c * hm.transpose() + &c * &info * c.transpose();
            (omega_param, Some(symmetrize(&om)))
        }
    };

    let cells = if keep_cells {
        nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OracleCell {
                x: n.x.clone(),
                prob: n.prob,
                p: n.p,
                e: e.row(i).iter().copied().collect(),
                v: to_rows(&v[i]),
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(Oracle {
        case,
        beta0,
        p_marginal: big_p,
        jacobian: to_rows(&jac),
        cells,
        omega1: to_rows(&omega1),
        omega2: to_rows(&omega2),
        omega1_known: to_rows(&omega1_known),
        omega_param: omega_param.map(|o| to_rows(&o)),
        omega_ipw_known: to_rows(&ipw_known),
        omega_ipw_param: omega_ipw_param.map(|o| to_rows(&o)),
    })
}

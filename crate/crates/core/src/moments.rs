//! Moment functions `m(z; β)` and their Jacobians.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linalg::singular_value_ratio;

/// Default half-width of the parameter box.
pub const DEFAULT_BOX: f64 = 1e6;

/// Smallest admissible singular-value ratio of a Jacobian.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelForm {
    /// `m = g(z) - β` with `d_m = d_β`.
    Location,
    /// `m = a(z) + B(z) β`.
    Affine,
    General,
}

/// A moment function. Implementations must be pure.
pub trait MomentFunction: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn d_m(&self) -> usize;
    fn d_beta(&self) -> usize;
    /// Writes `m(y, x; β)` into `out` (length `d_m`).
    fn eval(&self, y: &[f64], x: &[f64], beta: &[f64], out: &mut [f64]);

    fn smooth(&self) -> bool {
        true
    }

    fn form(&self) -> ModelForm {
        ModelForm::General
    }

    /// Per-observation `∂m/∂β'` when available.
    fn jacobian(&self, _y: &[f64], _x: &[f64], _beta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    fn beta_box(&self) -> Vec<(f64, f64)> {
        vec![(-DEFAULT_BOX, DEFAULT_BOX); self.d_beta()]
    }
}

/// Shared handle to a moment function.
#[derive(Debug, Clone)]
pub struct MomentModel(Arc<dyn MomentFunction>);

impl MomentModel {
    pub fn new<M: MomentFunction + 'static>(m: M) -> Self {
        Self(Arc::new(m))
    }

    pub fn from_arc(m: Arc<dyn MomentFunction>) -> Self {
        Self(m)
    }

    pub fn inner(&self) -> &dyn MomentFunction {
        self.0.as_ref()
    }

    pub fn name(&self) -> String {
        self.0.name()
    }

    pub fn d_m(&self) -> usize {
        self.0.d_m()
    }

    pub fn d_beta(&self) -> usize {
        self.0.d_beta()
    }

    pub fn smooth(&self) -> bool {
        self.0.smooth()
    }

    pub fn form(&self) -> ModelForm {
        self.0.form()
    }

    pub fn beta_box(&self) -> Vec<(f64, f64)> {
        self.0.beta_box()
    }

    pub fn in_box(&self, beta: &[f64]) -> bool {
        beta.len() == self.d_beta()
            && beta
                .iter()
                .zip(self.beta_box())
                .all(|(b, (lo, hi))| *b >= lo && *b <= hi)
    }

    pub fn clamp(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter()
            .zip(self.beta_box())
            .map(|(b, (lo, hi))| b.clamp(lo, hi))
            .collect()
    }

    /// Evaluates without domain checks; `y` must be present.
    pub fn eval_raw(&self, y: &[f64], x: &[f64], beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_m()];
        self.0.eval(y, x, beta, &mut out);
        out
    }
}

/// `m(z; β)` for one observation.
pub fn eval_moment(model: &MomentModel, z: &Observation, beta: &[f64]) -> Result<Vec<f64>> {
    if !model.in_box(beta) {
        return Err(Error::Domain(format!(
            "beta {beta:?} outside the parameter box of {}",
            model.name()
        )));
    }
    let y = z.y.as_deref().ok_or(Error::MissingOutcome)?;
    Ok(model.eval_raw(y, &z.x, beta))
}

/// Empirical CDF moments `1(y1 <= τ_j) - β_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cdf {
    pub thresholds: Vec<f64>,
}

impl MomentFunction for Cdf {
    fn name(&self) -> String {
        "cdf".into()
    }
    fn d_m(&self) -> usize {
        self.thresholds.len()
    }
    fn d_beta(&self) -> usize {
        self.thresholds.len()
    }
    fn eval(&self, y: &[f64], _x: &[f64], beta: &[f64], out: &mut [f64]) {
        for (j, t) in self.thresholds.iter().enumerate() {
            out[j] = if y[0] <= *t { 1.0 } else { 0.0 } - beta[j];
        }
    }
    fn smooth(&self) -> bool {
        false
    }
    fn form(&self) -> ModelForm {
        ModelForm::Location
    }
    fn beta_box(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); self.thresholds.len()]
    }
}

/// `y - β`, componentwise over the outcome vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mean {
    pub dim: usize,
}

impl MomentFunction for Mean {
    fn name(&self) -> String {
        "mean".into()
    }
    fn d_m(&self) -> usize {
        self.dim
    }
    fn d_beta(&self) -> usize {
        self.dim
    }
    fn eval(&self, y: &[f64], _x: &[f64], beta: &[f64], out: &mut [f64]) {
        for j in 0..self.dim {
            out[j] = y[j] - beta[j];
        }
    }
    fn form(&self) -> ModelForm {
        ModelForm::Location
    }
    fn jacobian(&self, _y: &[f64], _x: &[f64], _beta: &[f64]) -> Option<DMatrix<f64>> {
        Some(-DMatrix::identity(self.dim, self.dim))
    }
}

/// Linear projection moments `x̃ (y1 - x̃'β)` with user-chosen regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegression {
    pub regressors: Vec<Expr>,
}

impl LinearRegression {
    fn design(&self, x: &[f64]) -> Vec<f64> {
        self.regressors.iter().map(|e| e.eval(x)).collect()
    }
}

impl MomentFunction for LinearRegression {
    fn name(&self) -> String {
        "linreg".into()
    }
    fn d_m(&self) -> usize {
        self.regressors.len()
    }
    fn d_beta(&self) -> usize {
        self.regressors.len()
    }
    fn eval(&self, y: &[f64], x: &[f64], beta: &[f64], out: &mut [f64]) {
        let xt = self.design(x);
        let fit: f64 = xt.iter().zip(beta).map(|(a, b)| a * b).sum();
        let resid = y[0] - fit;
        for (o, v) in out.iter_mut().zip(&xt) {
            *o = v * resid;
        }
    }
    fn form(&self) -> ModelForm {
        ModelForm::Affine
    }
    fn jacobian(&self, _y: &[f64], x: &[f64], _beta: &[f64]) -> Option<DMatrix<f64>> {
        let xt = self.design(x);
        let k = xt.len();
        Some(DMatrix::from_fn(k, k, |i, j| -xt[i] * xt[j]))
    }
}

/// Built-in models as named in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum MomentSpec {
    Cdf {
        thresholds: Vec<f64>,
    },
    Mean {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
    },
    Linreg {
        regressors: Vec<Expr>,
    },
}

impl MomentSpec {
    /// Instantiates the model; `d_y` sizes the mean model when `dim` is absent.
    pub fn build(&self, d_y: usize) -> Result<MomentModel> {
        match self {
            MomentSpec::Cdf { thresholds } => {
                if thresholds.is_empty() || thresholds.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Config("cdf needs finite thresholds".into()));
                }
                Ok(MomentModel::new(Cdf {
                    thresholds: thresholds.clone(),
                }))
            }
            MomentSpec::Mean { dim } => {
                let dim = dim.unwrap_or(d_y);
                if dim == 0 || dim > d_y {
                    return Err(Error::Config(format!(
                        "mean model of dimension {dim} on {d_y}-dimensional outcomes"
                    )));
                }
                Ok(MomentModel::new(Mean { dim }))
            }
            MomentSpec::Linreg { regressors } => {
                if regressors.is_empty() {
                    return Err(Error::Config("linreg needs at least one regressor".into()));
                }
                Ok(MomentModel::new(LinearRegression {
                    regressors: regressors.clone(),
                }))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMethod {
    Analytic,
    CentralDifference,
}

#[derive(Debug, Clone)]
pub struct JacobianEstimate {
    pub matrix: DMatrix<f64>,
    pub method: JacobianMethod,
}

/// Jacobian of an averaged moment `β ↦ ḡ(β)`.
///
/// Location-form models return `-I` exactly. Otherwise `analytic` (the
/// averaged per-observation Jacobian) is used when supplied, and central
/// differences with step `step * max(1, |β_k|)` when not.
pub fn moment_jacobian(
    model: &MomentModel,
    averaged: &dyn Fn(&[f64]) -> Vec<f64>,
    analytic: Option<&dyn Fn(&[f64]) -> DMatrix<f64>>,
    beta: &[f64],
    step: f64,
) -> Result<JacobianEstimate> {
    let d_m = model.d_m();
    let k = model.d_beta();
    let est = if model.form() == ModelForm::Location {
        JacobianEstimate {
            matrix: -DMatrix::identity(d_m, k),
            method: JacobianMethod::Analytic,
        }
    } else if let Some(f) = analytic {
        JacobianEstimate {
            matrix: f(beta),
            method: JacobianMethod::Analytic,
        }
    } else {
        let bx = model.beta_box();
        let mut jac = DMatrix::zeros(d_m, k);
        for c in 0..k {
            let h = step * beta[c].abs().max(1.0);
            let (lo, hi) = bx[c];
            let up = (beta[c] + h).min(hi);
            let down = (beta[c] - h).max(lo);
            let mut bu = beta.to_vec();
            bu[c] = up;
            let mut bd = beta.to_vec();
            bd[c] = down;
            let gu = averaged(&bu);
            let gd = averaged(&bd);
            let width = up - down;
            for r in 0..d_m {
                jac[(r, c)] = (gu[r] - gd[r]) / width;
            }
        }
        JacobianEstimate {
            matrix: jac,
            method: JacobianMethod::CentralDifference,
        }
    };
    if est.matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient { ratio: f64::NAN });
    }
    let ratio = singular_value_ratio(&est.matrix);
    if !(ratio >= RANK_TOL) {
        return Err(Error::RankDeficient { ratio });
    }
    Ok(est)
}

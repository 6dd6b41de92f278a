//! CEP and IPW GMM estimators for both sampling cases.
//!
//! Every estimator here has a sample moment of the form
//! `ḡ(β) = Σ_j w_j m(Z_j; β)` over the auxiliary rows `j`. For IPW the
//! weights are propensity odds; for CEP they are the smoother weights of
//! the sieve projection averaged over the target covariate distribution,
//! which reproduces "project `m(·; β)` on `X`, then average the fitted
//! values" exactly for every `β` without refitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bounds::{
    efficiency_bound, fit_cond_moments, influence_values, invert_omega, moment_matrix, omega_from_parts, outer_mean,
    param_parts, sandwich_variance, BoundKind, InfluenceInputs, InfluenceKind, OmegaParts, ScoreCorrection,
};
use crate::data::{marginal_p, split_samples, Case, Dataset, SampleSplit};
use crate::error::{Error, Result};
use crate::linalg::{from_rows, symmetrize, to_rows, SpdFactor};
use crate::moments::{moment_jacobian, JacobianMethod, ModelForm, MomentModel};
use crate::optimize::{gmm_minimize, OptimizerSpec};
use crate::propensity::{
    fit_propensity, score_info, ParametricFamily, PropensityKind, PropensityModel, PropensitySpec, ScoreInfo,
};
use crate::sieve::{basis_mean, build_basis_capped, BasisSpec, ProjectionFit, SieveProjector};

/// Central-difference step for smooth moments.
const SMOOTH_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorFamily {
    /// Plain auxiliary-sample GMM, ignoring the primary sample.
    Unadjusted,
    Cep,
    CepParametricP,
    CepKnownP,
    Ipw,
    IpwParametricP,
    IpwKnownP,
    IpwMixed,
}

impl EstimatorFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorFamily::Unadjusted => "unadjusted",
            EstimatorFamily::Cep => "cep",
            EstimatorFamily::CepParametricP => "cep-parametric-p",
            EstimatorFamily::CepKnownP => "cep-known-p",
            EstimatorFamily::Ipw => "ipw",
            EstimatorFamily::IpwParametricP => "ipw-parametric-p",
            EstimatorFamily::IpwKnownP => "ipw-known-p",
            EstimatorFamily::IpwMixed => "ipw-mixed",
        }
    }

    fn verify_out_only(&self) -> bool {
        matches!(
            self,
            EstimatorFamily::CepParametricP | EstimatorFamily::CepKnownP | EstimatorFamily::IpwMixed
        )
    }

    fn needs_projector(&self) -> bool {
        !matches!(
            self,
            EstimatorFamily::Unadjusted | EstimatorFamily::IpwParametricP | EstimatorFamily::IpwKnownP
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Identity,
    #[default]
    TwoStepOptimal,
    Fixed(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub label: Option<String>,
    pub family: EstimatorFamily,
    pub case: Case,
    pub moment: MomentModel,
    pub basis: BasisSpec,
    /// Propensity used in the weights; for plain CEP, the one used in `Ω̂`.
    pub propensity: Option<PropensitySpec>,
    /// Denominator propensity of the mixed IPW estimator.
    pub denominator: Option<PropensitySpec>,
    pub weighting: Weighting,
    pub optimizer: OptimizerSpec,
    pub beta_init: Option<Vec<f64>>,
}

impl EstimatorConfig {
    pub fn new(family: EstimatorFamily, case: Case, moment: MomentModel) -> Self {
        Self {
            label: None,
            family,
            case,
            moment,
            basis: BasisSpec::default(),
            propensity: None,
            denominator: None,
            weighting: Weighting::default(),
            optimizer: OptimizerSpec::default(),
            beta_init: None,
        }
    }

    pub fn with_basis(mut self, basis: BasisSpec) -> Self {
        self.basis = basis;
        self
    }

    pub fn with_propensity(mut self, spec: PropensitySpec) -> Self {
        self.propensity = Some(spec);
        self
    }

    pub fn with_denominator(mut self, spec: PropensitySpec) -> Self {
        self.denominator = Some(spec);
        self
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.family.as_str().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.family.verify_out_only() && self.case != Case::VerifyOut {
            return Err(Error::UnsupportedSpec(format!(
                "{} is only defined for the verify-out case",
                self.family.as_str()
            )));
        }
        if self.moment.d_m() < self.moment.d_beta() {
            return Err(Error::UnsupportedSpec(format!(
                "moment model has {} moments for {} parameters",
                self.moment.d_m(),
                self.moment.d_beta()
            )));
        }
        let kind = self.propensity.as_ref().map(|p| p.kind());
        match self.family {
            EstimatorFamily::CepKnownP | EstimatorFamily::IpwKnownP => {
                if kind != Some(PropensityKind::Known) {
                    return Err(Error::Config(format!(
                        "{} needs a known propensity",
                        self.family.as_str()
                    )));
                }
            }
            EstimatorFamily::CepParametricP | EstimatorFamily::IpwParametricP => {
                if kind.is_some_and(|k| k != PropensityKind::Parametric) {
                    return Err(Error::Config(format!(
                        "{} needs a parametric propensity",
                        self.family.as_str()
                    )));
                }
            }
            EstimatorFamily::IpwMixed => {
                if kind.is_some_and(|k| !matches!(k, PropensityKind::Parametric | PropensityKind::Known)) {
                    return Err(Error::Config(
                        "the mixed estimator's numerator must be parametric or known".into(),
                    ));
                }
            }
            _ => {}
        }
        if let Weighting::Fixed(w) = &self.weighting {
            let d = self.moment.d_m();
            if w.len() != d || w.iter().any(|r| r.len() != d) {
                return Err(Error::Config(format!("fixed weighting matrix must be {d}×{d}")));
            }
        }
        if let Some(b) = &self.beta_init {
            if b.len() != self.moment.d_beta() {
                return Err(Error::Config("beta_init has the wrong length".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n: usize,
    pub n_p: usize,
    pub n_a: usize,
    pub phat: f64,
    pub k_n: Option<usize>,
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
    pub clip_count: usize,
    pub omega_kind: String,
    pub omega_pinv: bool,
    pub omega_floored: usize,
    pub ridge: f64,
    pub jacobian_method: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub label: String,
    pub family: EstimatorFamily,
    pub case: Case,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
    pub jacobian: Vec<Vec<f64>>,
    pub weighting: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl Estimate {
    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.vcov)
    }

    pub fn omega_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.omega)
    }

    pub fn jacobian_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.jacobian)
    }
}

/// Which IPW weight to apply to auxiliary rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpwKind {
    OutNp,
    InNp,
    OutParam,
    OutKnown,
    OutMixed,
    InParam,
    InKnown,
}

impl IpwKind {
    fn verify_out(&self) -> bool {
        matches!(
            self,
            IpwKind::OutNp | IpwKind::OutParam | IpwKind::OutKnown | IpwKind::OutMixed
        )
    }
}

/// IPW weight of one auxiliary row with propensity `p`, before dividing by `n_a`.
fn ipw_weight(verify_out: bool, p: f64, p_den: f64, phat: f64) -> f64 {
    if verify_out {
        p / (1.0 - p_den) * (1.0 - phat) / phat
    } else {
        (1.0 - phat) / (1.0 - p_den)
    }
}

/// Averaged fitted values of a projection over `x_rows`, optionally weighted
/// by `p(X_i)/P` per row (the weighted form averages over the pooled sample).
pub fn cep_sample_moment(fit: &ProjectionFit, x_rows: &DMatrix<f64>, pweight: Option<&[f64]>) -> Vec<f64> {
    let q = crate::sieve::design_matrix(&fit.basis, x_rows);
    let fitted = q * &fit.coeffs;
    let n = x_rows.nrows() as f64;
    (0..fitted.ncols())
        .map(|c| {
            fitted
                .column(c)
                .iter()
                .enumerate()
                .map(|(i, v)| v * pweight.map_or(1.0, |w| w[i]))
                .sum::<f64>()
                / n
        })
        .collect()
}

/// `(1/n_a) Σ_j m(Z_j; β) ω_j` with the IPW weight `ω_j` of `kind`.
#[allow(clippy::too_many_arguments)]
pub fn ipw_sample_moment(
    beta: &[f64],
    moment: &MomentModel,
    ds: &Dataset,
    auxiliary: &[usize],
    pmodel: &PropensityModel,
    phat: f64,
    kind: IpwKind,
    denominator: Option<&PropensityModel>,
) -> Result<Vec<f64>> {
    if kind == IpwKind::OutMixed && denominator.is_none() {
        return Err(Error::UnsupportedSpec(
            "mixed IPW needs a denominator propensity".into(),
        ));
    }
    let m = moment_matrix(moment, ds, auxiliary, beta)?;
    let na = auxiliary.len() as f64;
    let mut out = vec![0.0; moment.d_m()];
    for (r, &i) in auxiliary.iter().enumerate() {
        let x = &ds.rows()[i].x;
        let p = pmodel.propensity_at(x);
        let p_den = denominator.map_or(p, |d| d.propensity_at(x));
        let w = ipw_weight(kind.verify_out(), p, p_den, phat) / na;
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * m[(r, c)];
        }
    }
    Ok(out)
}

/// Everything fixed before optimization.
struct Prepared<'a> {
    cfg: &'a EstimatorConfig,
    ds: &'a Dataset,
    split: SampleSplit,
    phat: f64,
    projector: Option<SieveProjector>,
    num_model: Option<PropensityModel>,
    den_model: Option<PropensityModel>,
    var_model: Option<PropensityModel>,
    score: Option<ScoreInfo>,
    weights: Vec<f64>,
    clip_count: usize,
    warnings: Vec<String>,
}

fn default_parametric(ds: &Dataset) -> PropensitySpec {
    PropensitySpec::parametric(ParametricFamily::linear_logit(ds.d_x()))
}

impl<'a> Prepared<'a> {
    fn new(cfg: &'a EstimatorConfig, ds: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let split = split_samples(ds);
        let phat = marginal_p(ds);
        let n_a = split.auxiliary.len();
        let mut warnings = Vec::new();
        let family = cfg.family;

        let projector = if family.needs_projector() {
            let x_aux = ds.x_matrix(&split.auxiliary);
            let basis = build_basis_capped(&cfg.basis, &x_aux, n_a)?;
            warnings.extend(basis.warnings.iter().cloned());
            let proj = SieveProjector::new(&basis, &x_aux)?;
            if proj.ridge() > 0.0 {
                warnings.push(format!("auxiliary projection used ridge {:e}", proj.ridge()));
            }
            Some(proj)
        } else {
            None
        };

        let fit = |spec: &PropensitySpec, warnings: &mut Vec<String>| -> Result<PropensityModel> {
            let m = fit_propensity(spec, ds)?;
            warnings.extend(m.warnings.iter().cloned());
            Ok(m)
        };
        let sieve_ls = PropensitySpec::sieve_ls(cfg.basis.clone());

        let (num_model, den_model, var_model) = match family {
            EstimatorFamily::Unadjusted => (None, None, None),
            EstimatorFamily::Cep => {
                let spec = cfg.propensity.clone().unwrap_or(sieve_ls);
                (None, None, Some(fit(&spec, &mut warnings)?))
            }
            EstimatorFamily::Ipw => {
                let spec = cfg.propensity.clone().unwrap_or(sieve_ls);
                let m = fit(&spec, &mut warnings)?;
                (Some(m.clone()), None, Some(m))
            }
            EstimatorFamily::CepParametricP | EstimatorFamily::IpwParametricP => {
                let spec = cfg.propensity.clone().unwrap_or_else(|| default_parametric(ds));
                (Some(fit(&spec, &mut warnings)?), None, None)
            }
            EstimatorFamily::CepKnownP | EstimatorFamily::IpwKnownP => {
                let spec = cfg.propensity.as_ref().expect("validated");
                (Some(fit(spec, &mut warnings)?), None, None)
            }
            EstimatorFamily::IpwMixed => {
                let spec = cfg.propensity.clone().unwrap_or_else(|| default_parametric(ds));
                let den = cfg.denominator.clone().unwrap_or(sieve_ls);
                (Some(fit(&spec, &mut warnings)?), Some(fit(&den, &mut warnings)?), None)
            }
        };
        let score = match &num_model {
            Some(m) if m.kind == PropensityKind::Parametric => Some(score_info(m, ds)?),
            _ => None,
        };

        let mut prepared = Self {
            cfg,
            ds,
            split,
            phat,
            projector,
            num_model,
            den_model,
            var_model,
            score,
            weights: Vec::new(),
            clip_count: 0,
            warnings,
        };
        prepared.compute_weights()?;
        Ok(prepared)
    }

    fn compute_weights(&mut self) -> Result<()> {
        let ds = self.ds;
        let aux = &self.split.auxiliary;
        let na = aux.len() as f64;
        let phat = self.phat;
        let verify_out = self.cfg.case == Case::VerifyOut;
        let mut clip_count = 0;
        let weights = match self.cfg.family {
            EstimatorFamily::Unadjusted => vec![1.0 / na; aux.len()],
            EstimatorFamily::Cep => {
                let proj = self.projector.as_ref().expect("projector");
                let rows = if verify_out {
                    self.split.primary.clone()
                } else {
                    ds.all_indices()
                };
                let qbar = basis_mean(proj.basis(), &ds.x_matrix(&rows), None);
                proj.smoother_weights(&qbar)
            }
            EstimatorFamily::CepParametricP | EstimatorFamily::CepKnownP => {
                let proj = self.projector.as_ref().expect("projector");
                let model = self.num_model.as_ref().expect("propensity");
                let pw: Vec<f64> = ds
                    .rows()
                    .iter()
                    .map(|r| {
                        let (p, clipped) = model.propensity_clipped(&r.x);
                        clip_count += clipped as usize;
                        p / phat
                    })
                    .collect();
                let qbar = basis_mean(proj.basis(), &ds.x_matrix(&ds.all_indices()), Some(&pw));
                proj.smoother_weights(&qbar)
            }
            EstimatorFamily::Ipw
            | EstimatorFamily::IpwParametricP
            | EstimatorFamily::IpwKnownP
            | EstimatorFamily::IpwMixed => {
                let model = self.num_model.as_ref().expect("propensity");
                aux.iter()
                    .map(|&i| {
                        let x = &ds.rows()[i].x;
                        let (p, c1) = model.propensity_clipped(x);
                        let (p_den, c2) = match &self.den_model {
                            Some(d) => d.propensity_clipped(x),
                            None => (p, false),
                        };
                        clip_count += (c1 || c2) as usize;
                        ipw_weight(verify_out, p, p_den, phat) / na
                    })
                    .collect()
            }
        };
        self.weights = weights;
        self.clip_count = clip_count;
        Ok(())
    }

    fn gbar(&self, beta: &[f64]) -> Vec<f64> {
        let model = &self.cfg.moment;
        let mut acc = vec![0.0; model.d_m()];
        let mut buf = vec![0.0; model.d_m()];
        for (w, &i) in self.weights.iter().zip(&self.split.auxiliary) {
            let row = &self.ds.rows()[i];
            let y = row.y.as_deref().expect("auxiliary rows carry y");
            model.inner().eval(y, &row.x, beta, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += w * b;
            }
        }
        acc
    }

    fn analytic_jacobian(&self, beta: &[f64]) -> Option<DMatrix<f64>> {
        let model = &self.cfg.moment;
        let mut acc = DMatrix::zeros(model.d_m(), model.d_beta());
        for (w, &i) in self.weights.iter().zip(&self.split.auxiliary) {
            let row = &self.ds.rows()[i];
            let y = row.y.as_deref()?;
            acc += model.inner().jacobian(y, &row.x, beta)? * *w;
        }
        Some(acc)
    }

    /// Minimizes `ḡ'Wḡ`; returns `(β, objective, iterations, converged)`.
    fn solve(
        &self,
        w: &DMatrix<f64>,
        init: &[f64],
        warnings: &mut Vec<String>,
    ) -> Result<(Vec<f64>, f64, usize, bool)> {
        let model = &self.cfg.moment;
        let k = model.d_beta();
        let objective = |b: &[f64]| {
            let g = DVector::from_vec(self.gbar(b));
            (g.transpose() * w * &g)[(0, 0)]
        };
        match model.form() {
            ModelForm::Location | ModelForm::Affine => {
                let a = DVector::from_vec(self.gbar(&vec![0.0; k]));
                let mut jac = DMatrix::zeros(model.d_m(), k);
                for c in 0..k {
                    let mut e = vec![0.0; k];
                    e[c] = 1.0;
                    let g = DVector::from_vec(self.gbar(&e));
                    jac.set_column(c, &(g - &a));
                }
                let lhs = symmetrize(&(jac.transpose() * w * &jac));
                let rhs = -(jac.transpose() * w * &a);
                let f = SpdFactor::new(&lhs).ok_or_else(|| Error::RankDeficient {
                    ratio: crate::linalg::singular_value_ratio(&jac),
                })?;
                let beta: Vec<f64> = f.solve_vec(&rhs).iter().copied().collect();
                let clamped = model.clamp(&beta);
                if clamped != beta {
                    warnings.push("estimate clamped to the parameter box".into());
                }
                let obj = objective(&clamped);
                Ok((clamped, obj, 0, true))
            }
            ModelForm::General => {
                let r = gmm_minimize(&objective, init, &model.beta_box(), &self.cfg.optimizer);
                Ok((r.beta, r.objective, r.iterations, r.converged))
            }
        }
    }

    /// `Ω̂` at `β`, with its label, pseudo-inverse flag and floor count.
    fn omega_at(&self, beta: &[f64]) -> Result<(DMatrix<f64>, String, usize)> {
        let ds = self.ds;
        let cfg = self.cfg;
        let model = &cfg.moment;
        let phat = self.phat;
        let verify_out = cfg.case == Case::VerifyOut;
        match cfg.family {
            EstimatorFamily::Unadjusted => {
                let m = moment_matrix(model, ds, &self.split.auxiliary, beta)?;
                let na = m.nrows() as f64;
                let mean = m.row_mean();
                let centered = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - mean[j]);
                let s = centered.transpose() * &centered / na;
                Ok((
                    symmetrize(&(s * (ds.n() as f64 / na))),
                    "auxiliary-covariance".into(),
                    0,
                ))
            }
            EstimatorFamily::IpwKnownP | EstimatorFamily::IpwParametricP => {
                let all = ds.all_indices();
                let pmodel = self.num_model.as_ref().expect("propensity");
                let d: Vec<u8> = ds.rows().iter().map(|r| r.d).collect();
                let mut m = DMatrix::zeros(ds.n(), model.d_m());
                let aux_m = moment_matrix(model, ds, &self.split.auxiliary, beta)?;
                for (r, &i) in self.split.auxiliary.iter().enumerate() {
                    m.set_row(i, &aux_m.row(r));
                }
                let p: Vec<f64> = ds.rows().iter().map(|r| pmodel.propensity_at(&r.x)).collect();
                let inp = InfluenceInputs {
                    d: d.clone(),
                    e: DMatrix::zeros(all.len(), model.d_m()),
                    m: m.clone(),
                    p: p.clone(),
                    phat,
                };
                let kind = if verify_out {
                    InfluenceKind::IpwOutFixed
                } else {
                    InfluenceKind::IpwInFixed
                };
                let correction = match &self.score {
                    Some(score) => {
                        // Derivative of the sample moment in γ.
                        let pp = param_parts(pmodel, ds, score)?;
                        let k = pp.p_grad.ncols();
                        let mut g = DMatrix::zeros(model.d_m(), k);
                        let nf = ds.n() as f64;
                        for i in 0..ds.n() {
                            if d[i] == 1 {
                                continue;
                            }
                            let pi = p[i];
                            let base = if verify_out {
                                1.0 / ((1.0 - pi) * (1.0 - pi) * phat)
                            } else {
                                1.0 / ((1.0 - pi) * (1.0 - pi))
                            };
                            for a in 0..model.d_m() {
                                for c in 0..k {
                                    g[(a, c)] += m[(i, a)] * pp.p_grad[(i, c)] * base / nf;
                                }
                            }
                        }
                        let info = SpdFactor::new(&pp.information).ok_or(Error::SingularInformation {
                            min_eigenvalue: crate::linalg::min_eigenvalue(&pp.information),
                        })?;
                        let coef = info.solve(&g.transpose()).transpose();
                        Some(ScoreCorrection {
                            coef,
                            scores: score.scores.clone(),
                        })
                    }
                    None => None,
                };
                let psi = influence_values(kind, &inp, correction.as_ref())?;
                Ok((outer_mean(&psi), "influence-outer-product".into(), 0))
            }
            _ => {
                let proj = self.projector.as_ref().expect("projector");
                let cm = fit_cond_moments(model, beta, ds, &self.split.auxiliary, proj)?;
                let (kind, pmodel) = match cfg.family {
                    EstimatorFamily::Cep | EstimatorFamily::Ipw => (
                        if verify_out {
                            BoundKind::Omega1
                        } else {
                            BoundKind::Omega2
                        },
                        self.var_model.as_ref().expect("propensity"),
                    ),
                    _ => {
                        let pm = self.num_model.as_ref().expect("propensity");
                        let kind = if pm.kind == PropensityKind::Parametric {
                            BoundKind::OmegaParam
                        } else {
                            BoundKind::Omega1Known
                        };
                        (kind, pm)
                    }
                };
                let parts = OmegaParts::from_fit(&cm, pmodel, ds);
                let param = match (&self.score, kind) {
                    (Some(score), BoundKind::OmegaParam) => Some(param_parts(pmodel, ds, score)?),
                    _ => None,
                };
                let omega = omega_from_parts(kind, &parts, phat, param.as_ref())?;
                Ok((omega, kind.as_str().into(), parts.floored))
            }
        }
    }
}

/// Runs the full pipeline: propensity fits, first-step GMM, `Ω̂`, optional
/// optimally weighted second step, Jacobian and variance.
pub fn estimate(cfg: &EstimatorConfig, ds: &Dataset) -> Result<Estimate> {
    if cfg.case != ds.case() {
        return Err(Error::Config(format!(
            "estimator configured for {} but data is labelled {}",
            cfg.case.as_str(),
            ds.case().as_str()
        )));
    }
    let prep = Prepared::new(cfg, ds)?;
    let model = &cfg.moment;
    let d_m = model.d_m();
    let k = model.d_beta();
    let mut warnings = prep.warnings.clone();

    let init = match &cfg.beta_init {
        Some(b) => model.clamp(b),
        None => model.clamp(&vec![0.0; k]),
    };
    let identity = DMatrix::identity(d_m, d_m);
    let first_w = match &cfg.weighting {
        Weighting::Fixed(rows) => from_rows(rows),
        _ => identity,
    };
    let (mut beta, mut objective, mut iterations, mut converged) = prep.solve(&first_w, &init, &mut warnings)?;
    let mut w_used = first_w;
    let mut pinv = false;

    if cfg.weighting == Weighting::TwoStepOptimal && d_m > k {
        let (omega1, _, _) = prep.omega_at(&beta)?;
        let (w2, flagged) = invert_omega(&omega1);
        pinv |= flagged;
        let (b2, o2, it2, c2) = prep.solve(&w2, &beta, &mut warnings)?;
        beta = b2;
        objective = o2;
        iterations += it2;
        converged &= c2;
        w_used = w2;
    }
    if !converged {
        warnings.push("NoConvergence: optimizer hit its iteration cap".into());
    }

    let (omega, omega_kind, floored) = prep.omega_at(&beta)?;
    if floored > 0 {
        warnings.push(format!("conditional variance floored at {floored} points"));
    }
    let step = if model.smooth() {
        SMOOTH_STEP
    } else {
        (ds.n() as f64).powf(-0.2)
    };
    let gbar = |b: &[f64]| prep.gbar(b);
    let analytic = |b: &[f64]| prep.analytic_jacobian(b).expect("checked");
    let has_analytic = prep.analytic_jacobian(&beta).is_some();
    let jac = moment_jacobian(
        model,
        &gbar,
        if has_analytic { Some(&analytic) } else { None },
        &beta,
        step,
    )?;
    let j = &jac.matrix;
    let n = ds.n() as f64;
    let v = match cfg.weighting {
        // Exactly identified: J⁻¹ΩJ⁻ᵀ, which stays defined for singular Ω.
        _ if d_m == k => sandwich_variance(j, &DMatrix::identity(d_m, d_m), &omega)?,
        Weighting::TwoStepOptimal => {
            let (b, flagged) = efficiency_bound(j, &omega)?;
            pinv |= flagged;
            b
        }
        _ => sandwich_variance(j, &w_used, &omega)?,
    };
    if pinv {
        warnings.push("Omega is singular; pseudo-inverse used".into());
    }
    let vcov = v / n;
    let se = (0..k).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect();

    let diagnostics = Diagnostics {
        n: ds.n(),
        n_p: prep.split.primary.len(),
        n_a: prep.split.auxiliary.len(),
        phat: prep.phat,
        k_n: prep.projector.as_ref().map(|p| p.basis().k_n),
        iterations,
        objective,
        converged,
        clip_count: prep.clip_count,
        omega_kind,
        omega_pinv: pinv,
        omega_floored: floored,
        ridge: prep.projector.as_ref().map_or(0.0, |p| p.ridge()),
        jacobian_method: match jac.method {
            JacobianMethod::Analytic => "analytic".into(),
            JacobianMethod::CentralDifference => "central-difference".into(),
        },
        warnings,
    };
    Ok(Estimate {
        label: cfg.label(),
        family: cfg.family,
        case: cfg.case,
        beta,
        se,
        vcov: to_rows(&vcov),
        omega: to_rows(&omega),
        jacobian: to_rows(j),
        weighting: to_rows(&w_used),
        diagnostics,
    })
}

/// One plug-in bound: `Ω̂` of a given kind and `(J'Ω̂⁻¹J)⁻¹`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub kind: String,
    pub omega: Vec<Vec<f64>>,
    pub bound: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginBounds {
    pub case: Case,
    pub n: usize,
    pub beta: Vec<f64>,
    pub jacobian: Vec<Vec<f64>>,
    pub entries: Vec<BoundEntry>,
}

/// Plug-in efficiency bounds at the CEP estimate.
///
/// Always reports the nonparametric-propensity bound of the case; under
/// verify-out a known or parametric `cfg.propensity` adds the matching
/// restricted bound.
pub fn plugin_bounds(cfg: &EstimatorConfig, ds: &Dataset) -> Result<PluginBounds> {
    let user = cfg.propensity.clone();
    let mut cep = cfg.clone();
    cep.family = EstimatorFamily::Cep;
    cep.propensity = user
        .clone()
        .filter(|p| matches!(p.kind(), PropensityKind::SieveLs | PropensityKind::SieveLogit));
    let est = estimate(&cep, ds)?;
    let prep = Prepared::new(&cep, ds)?;
    let proj = prep.projector.as_ref().expect("projector");
    let cm = fit_cond_moments(&cfg.moment, &est.beta, ds, &prep.split.auxiliary, proj)?;
    let jac = est.jacobian_matrix();
    let mut entries = Vec::new();
    let mut push = |kind: BoundKind, pmodel: &PropensityModel, score: Option<&ScoreInfo>| -> Result<()> {
        let omega = crate::bounds::estimate_omega(kind, &cm, pmodel, prep.phat, ds, score)?;
        let (bound, _) = efficiency_bound(&jac, &omega)?;
        entries.push(BoundEntry {
            kind: kind.as_str().into(),
            omega: to_rows(&omega),
            bound: to_rows(&bound),
        });
        Ok(())
    };
    let base = if cfg.case == Case::VerifyOut {
        BoundKind::Omega1
    } else {
        BoundKind::Omega2
    };
    push(base, prep.var_model.as_ref().expect("propensity"), None)?;
    if cfg.case == Case::VerifyOut {
        if let Some(spec) = user.as_ref() {
            match spec.kind() {
                PropensityKind::Known => push(BoundKind::Omega1Known, &fit_propensity(spec, ds)?, None)?,
                PropensityKind::Parametric => {
                    let model = fit_propensity(spec, ds)?;
                    let score = score_info(&model, ds)?;
                    push(BoundKind::OmegaParam, &model, Some(&score))?;
                }
                _ => {}
            }
        }
    }
    Ok(PluginBounds {
        case: cfg.case,
        n: ds.n(),
        beta: est.beta,
        jacobian: est.jacobian,
        entries,
    })
}

/// The auxiliary-row weights `w_j` of `ḡ(β) = Σ_j w_j m(Z_j; β)`.
pub fn moment_weights(cfg: &EstimatorConfig, ds: &Dataset) -> Result<Vec<f64>> {
    Ok(Prepared::new(cfg, ds)?.weights)
}

/// The sample moment `ḡ(β)` of an estimator.
pub fn sample_moment(cfg: &EstimatorConfig, ds: &Dataset, beta: &[f64]) -> Result<Vec<f64>> {
    Ok(Prepared::new(cfg, ds)?.gbar(beta))
}

//! Efficiency-bound matrices, per-observation influence values and GMM
//! variance formulas.
//!
//! Notation: `E(x)` is the conditional mean of the moment given `X = x`,
//! `V(x)` its conditional variance, `p(x)` the propensity and `P` the
//! marginal probability of being in the primary sample.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{floor_psd, min_eigenvalue, sym_pinv, symmetrize, SpdFactor};
use crate::moments::MomentModel;
use crate::propensity::{PropensityModel, ScoreInfo};
use crate::sieve::{design_matrix, ProjectionFit, SieveProjector};

/// Relative eigenvalue cutoff for pseudo-inverses of `Ω̂`.
pub const PINV_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// Verify-out, propensity unknown.
    Omega1,
    /// Verify-in.
    Omega2,
    /// Verify-out, propensity known.
    Omega1Known,
    /// Verify-out, propensity known up to a finite-dimensional parameter.
    OmegaParam,
}

impl BoundKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundKind::Omega1 => "omega1",
            BoundKind::Omega2 => "omega2",
            BoundKind::Omega1Known => "omega1-known",
            BoundKind::OmegaParam => "omega-param",
        }
    }
}

/// Sieve fits of `E[m | X]` and `E[m m' | X]` on the auxiliary sample.
#[derive(Debug, Clone)]
pub struct CondMomentFit {
    pub mean_fit: ProjectionFit,
    /// Upper triangle of `m m'`, row-major.
    pub second_fit: ProjectionFit,
    pub beta_at: Vec<f64>,
    pub d_m: usize,
}

fn upper_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|a| (a..d).map(move |b| (a, b))).collect()
}

/// Moment values `m(Z_j; β)` at the listed rows (which must carry `y`).
pub fn moment_matrix(model: &MomentModel, ds: &Dataset, rows: &[usize], beta: &[f64]) -> Result<DMatrix<f64>> {
    let d_m = model.d_m();
    let mut out = DMatrix::zeros(rows.len(), d_m);
    let mut buf = vec![0.0; d_m];
    for (r, &i) in rows.iter().enumerate() {
        let row = &ds.rows()[i];
        let y = row.y.as_deref().ok_or(Error::MissingOutcome)?;
        model.inner().eval(y, &row.x, beta, &mut buf);
        for (c, v) in buf.iter().enumerate() {
            out[(r, c)] = *v;
        }
    }
    Ok(out)
}

/// Fits `Ê(x; β)` and `Ê[m m' | x]` with a projector built on the auxiliary rows.
pub fn fit_cond_moments(
    model: &MomentModel,
    beta: &[f64],
    ds: &Dataset,
    auxiliary: &[usize],
    projector: &SieveProjector,
) -> Result<CondMomentFit> {
    let m = moment_matrix(model, ds, auxiliary, beta)?;
    let d_m = model.d_m();
    let pairs = upper_pairs(d_m);
    let mm = DMatrix::from_fn(m.nrows(), pairs.len(), |i, k| {
        let (a, b) = pairs[k];
        m[(i, a)] * m[(i, b)]
    });
    Ok(CondMomentFit {
        mean_fit: projector.fit(&m)?,
        second_fit: projector.fit(&mm)?,
        beta_at: beta.to_vec(),
        d_m,
    })
}

/// Plug-in inputs for the bound integrands, one entry per averaging point.
#[derive(Debug, Clone)]
pub struct OmegaParts {
    /// Averaging weights (`1/n` for a sample, cell probabilities for an oracle).
    pub weights: Vec<f64>,
    /// `E(x_i)` as rows.
    pub e: DMatrix<f64>,
    pub v: Vec<DMatrix<f64>>,
    pub p: Vec<f64>,
    /// Number of points where `V̂` had a negative eigenvalue floored.
    pub floored: usize,
}

impl OmegaParts {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn d_m(&self) -> usize {
        self.e.ncols()
    }

    /// Evaluates a conditional-moment fit at every row of `ds`, with `p̃`
    /// from `pmodel` (clipped).
    pub fn from_fit(cm: &CondMomentFit, pmodel: &PropensityModel, ds: &Dataset) -> Self {
        let all = ds.all_indices();
        let x = ds.x_matrix(&all);
        let q = design_matrix(&cm.mean_fit.basis, &x);
        let e = &q * &cm.mean_fit.coeffs;
        let second = &q * &cm.second_fit.coeffs;
        let d_m = cm.d_m;
        let pairs = upper_pairs(d_m);
        let mut v = Vec::with_capacity(all.len());
        let mut floored = 0;
        for i in 0..all.len() {
            let mut s = DMatrix::zeros(d_m, d_m);
            for (k, &(a, b)) in pairs.iter().enumerate() {
                let c = second[(i, k)] - e[(i, a)] * e[(i, b)];
                s[(a, b)] = c;
                s[(b, a)] = c;
            }
            let (s, was) = if d_m == 1 {
                let val = s[(0, 0)];
                (DMatrix::from_element(1, 1, val.max(0.0)), val < 0.0)
            } else {
                floor_psd(&s)
            };
            floored += was as usize;
            v.push(s);
        }
        let p = ds.rows().iter().map(|r| pmodel.propensity_at(&r.x)).collect();
        let n = all.len();
        Self {
            weights: vec![1.0 / n as f64; n],
            e,
            v,
            p,
            floored,
        }
    }
}

/// Parametric-propensity pieces for the projected bound.
#[derive(Debug, Clone)]
pub struct ParamParts {
    /// `∂p(x_i; γ)/∂γ` as rows.
    pub p_grad: DMatrix<f64>,
    /// `E[S_γ S_γ']`.
    pub information: DMatrix<f64>,
}

/// `E[E(X) p_γ(X)' / P]`, the numerator of the projection correction.
pub fn param_cross(parts: &OmegaParts, p_grad: &DMatrix<f64>, phat: f64) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(parts.d_m(), p_grad.ncols());
    for i in 0..parts.len() {
        let w = parts.weights[i] / phat;
        for a in 0..parts.d_m() {
            for g in 0..p_grad.ncols() {
                b[(a, g)] += w * parts.e[(i, a)] * p_grad[(i, g)];
            }
        }
    }
    b
}

/// Weighted average of the integrand of the requested bound.
pub fn omega_from_parts(
    kind: BoundKind,
    parts: &OmegaParts,
    phat: f64,
    param: Option<&ParamParts>,
) -> Result<DMatrix<f64>> {
    let d_m = parts.d_m();
    let mut omega = DMatrix::zeros(d_m, d_m);
    let p2 = phat * phat;
    for i in 0..parts.len() {
        let p = parts.p[i];
        let (cv, ce) = match kind {
            BoundKind::Omega1 => (p * p / (p2 * (1.0 - p)), p / p2),
            BoundKind::Omega2 => (1.0 / (1.0 - p), 1.0),
            BoundKind::Omega1Known | BoundKind::OmegaParam => (p * p / (p2 * (1.0 - p)), p * p / p2),
        };
        let w = parts.weights[i];
        let e = parts.e.row(i);
        omega += &parts.v[i] * (w * cv) + e.transpose() * e * (w * ce);
    }
    if kind == BoundKind::OmegaParam {
        let param =
            param.ok_or_else(|| Error::UnsupportedSpec("the parametric bound needs score information".into()))?;
        let min_eigenvalue = min_eigenvalue(&param.information);
        if !(min_eigenvalue > 1e-10) {
            return Err(Error::SingularInformation { min_eigenvalue });
        }
        let b = param_cross(parts, &param.p_grad, phat);
        let info = SpdFactor::new(&param.information).ok_or(Error::SingularInformation { min_eigenvalue })?;
        let bt = info.solve(&b.transpose());
        omega += &b * bt;
    }
    Ok(symmetrize(&omega))
}

/// Plug-in `Ω̂` of the requested kind from a conditional-moment fit.
pub fn estimate_omega(
    kind: BoundKind,
    cm: &CondMomentFit,
    pmodel: &PropensityModel,
    phat: f64,
    ds: &Dataset,
    score: Option<&ScoreInfo>,
) -> Result<DMatrix<f64>> {
    let parts = OmegaParts::from_fit(cm, pmodel, ds);
    let param = match kind {
        BoundKind::OmegaParam => {
            let score =
                score.ok_or_else(|| Error::UnsupportedSpec("the parametric bound needs score information".into()))?;
            Some(param_parts(pmodel, ds, score)?)
        }
        _ => None,
    };
    omega_from_parts(kind, &parts, phat, param.as_ref())
}

/// `p_γ` rows over `ds` together with the information matrix.
pub fn param_parts(pmodel: &PropensityModel, ds: &Dataset, score: &ScoreInfo) -> Result<ParamParts> {
    let k = score.information.nrows();
    let mut p_grad = DMatrix::zeros(ds.n(), k);
    for (i, row) in ds.rows().iter().enumerate() {
        let g = pmodel
            .param_gradient(&row.x)
            .ok_or_else(|| Error::UnsupportedSpec("parametric bound needs a parametric propensity".into()))?;
        for (j, v) in g.into_iter().enumerate() {
            p_grad[(i, j)] = v;
        }
    }
    Ok(ParamParts {
        p_grad,
        information: score.information.clone(),
    })
}

/// `(J'Ω⁻¹J)⁻¹`; the flag reports a pseudo-inverse of `Ω`.
pub fn efficiency_bound(jac: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let (oinv, flagged) = invert_omega(omega);
    let info = symmetrize(&(jac.transpose() * oinv * jac));
    let f = SpdFactor::new(&info).ok_or(Error::SingularBread)?;
    let bound = f.solve(&DMatrix::identity(info.nrows(), info.nrows()));
    Ok((symmetrize(&bound), flagged))
}

/// `Ω⁻¹` through Cholesky, or the eigen pseudo-inverse when that fails.
pub fn invert_omega(omega: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let k = omega.nrows();
    let s = symmetrize(omega);
    if let Some(f) = SpdFactor::new(&s) {
        if min_eigenvalue(&s) > PINV_CUTOFF * s.amax() {
            return (symmetrize(&f.solve(&DMatrix::identity(k, k))), false);
        }
    }
    sym_pinv(&s, PINV_CUTOFF)
}

/// `(J'WJ)⁻¹ J'WΩWJ (J'WJ)⁻¹`.
pub fn sandwich_variance(jac: &DMatrix<f64>, w: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bread = symmetrize(&(jac.transpose() * w * jac));
    let f = SpdFactor::new(&bread)
        .or_else(|| SpdFactor::new(&(-&bread)))
        .ok_or(Error::SingularBread)?;
    let k = bread.nrows();
    let binv = f.solve(&DMatrix::identity(k, k));
    let binv = if bread[(0, 0)] < 0.0 { -binv } else { binv };
    let meat = jac.transpose() * w * omega * w * jac;
    Ok(symmetrize(&(&binv * meat * &binv)))
}

/// `A = J'Ω⁻¹`; the flag reports a pseudo-inverse of `Ω`.
pub fn optimal_combination(jac: &DMatrix<f64>, omega: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let (oinv, flagged) = invert_omega(omega);
    (jac.transpose() * oinv, flagged)
}

/// Variance `(AJ)⁻¹ A Ω A' (J'A')⁻¹` implied by a combination matrix `A`.
pub fn combination_variance(a: &DMatrix<f64>, jac: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let aj = a * jac;
    let inv = aj.clone().try_inverse().ok_or(Error::SingularBread)?;
    Ok(symmetrize(&(&inv * a * omega * a.transpose() * inv.transpose())))
}

/// Smallest eigenvalue of the symmetrized difference `A - B`.
pub fn psd_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "psd_gap of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(min_eigenvalue(&(a - b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceKind {
    /// Efficient influence, verify-out, unknown propensity.
    EffOutF1,
    /// Efficient influence, verify-in.
    EffInF2,
    /// Efficient influence, verify-out, known propensity.
    EffOutKnown,
    /// Known-propensity form plus the projection on the parametric score.
    EffOutParam,
    CepOut,
    CepIn,
    /// IPW verify-out with nonparametric propensity.
    IpwOut,
    /// IPW verify-in with nonparametric propensity.
    IpwIn,
    /// IPW verify-out holding the propensity fixed.
    IpwOutFixed,
    /// IPW verify-in holding the propensity fixed.
    IpwInFixed,
}

/// Per-row inputs for influence values.
#[derive(Debug, Clone)]
pub struct InfluenceInputs {
    pub d: Vec<u8>,
    /// `E(X_i)` rows.
    pub e: DMatrix<f64>,
    /// `m(Z_i; β)` rows; ignored where `d = 1`.
    pub m: DMatrix<f64>,
    pub p: Vec<f64>,
    pub phat: f64,
}

/// An additive term `C S_γ(D_i, X_i)` for estimated parametric propensities.
#[derive(Debug, Clone)]
pub struct ScoreCorrection {
    /// `d_m × d_γ`.
    pub coef: DMatrix<f64>,
    /// `n × d_γ`.
    pub scores: DMatrix<f64>,
}

/// Influence values as an `n × d_m` matrix.
pub fn influence_values(
    kind: InfluenceKind,
    inp: &InfluenceInputs,
    correction: Option<&ScoreCorrection>,
) -> Result<DMatrix<f64>> {
    let n = inp.d.len();
    let d_m = inp.e.ncols();
    let big_p = inp.phat;
    let mut out = DMatrix::zeros(n, d_m);
    for i in 0..n {
        let d = inp.d[i] as f64;
        let p = inp.p[i];
        let odds = p / (1.0 - p);
        for a in 0..d_m {
            let e = inp.e[(i, a)];
            let m = if inp.d[i] == 0 { inp.m[(i, a)] } else { 0.0 };
            let resid = m - e;
            out[(i, a)] = match kind {
                InfluenceKind::EffOutF1 | InfluenceKind::CepOut => (1.0 - d) / big_p * odds * resid + e * d / big_p,
                InfluenceKind::EffInF2 | InfluenceKind::CepIn => (1.0 - d) / (1.0 - p) * resid + e,
                InfluenceKind::EffOutKnown | InfluenceKind::EffOutParam => {
                    (1.0 - d) / big_p * odds * resid + e * p / big_p
                }
                InfluenceKind::IpwOut => ((1.0 - d) * m * odds + e * (d - p) / (1.0 - p)) / big_p,
                InfluenceKind::IpwIn => (1.0 - d) * m / (1.0 - p) + e * (d - p) / (1.0 - p),
                InfluenceKind::IpwOutFixed => (1.0 - d) * m * odds / big_p,
                InfluenceKind::IpwInFixed => (1.0 - d) * m / (1.0 - p),
            };
        }
    }
    if kind == InfluenceKind::EffOutParam && correction.is_none() {
        return Err(Error::UnsupportedSpec(
            "parametric influence needs the score correction".into(),
        ));
    }
    if let Some(c) = correction {
        if c.scores.nrows() != n || c.coef.nrows() != d_m || c.coef.ncols() != c.scores.ncols() {
            return Err(Error::ShapeMismatch("score correction".into()));
        }
        out += &c.scores * c.coef.transpose();
    }
    Ok(out)
}

/// `E_n[ψ ψ']` without centring.
pub fn outer_mean(psi: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(psi.transpose() * psi / psi.nrows() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_spd(seed: u64, k: usize) -> DMatrix<f64> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let a = DMatrix::from_fn(k, k, |_, _| next());
        a.transpose() * &a + DMatrix::identity(k, k) * 0.1
    }

    #[test]
    fn scalar_bound_and_sandwich() {
        let j = DMatrix::from_element(1, 1, -1.0);
        let om = DMatrix::from_element(1, 1, 2.0);
        assert!((efficiency_bound(&j, &om).unwrap().0[(0, 0)] - 2.0).abs() < 1e-14);
        let v = sandwich_variance(&j, &DMatrix::identity(1, 1), &om).unwrap();
        assert!((v[(0, 0)] - 2.0).abs() < 1e-14);
        let i2 = DMatrix::identity(2, 2);
        let om2 = random_spd(3, 2);
        assert!((efficiency_bound(&i2, &om2).unwrap().0 - &om2).norm() < 1e-12);
    }

    #[test]
    fn bound_matches_explicit_two_by_two_inverse() {
        for seed in 0..20 {
            let om = random_spd(seed, 2);
            let j = random_spd(seed + 100, 2);
            let inv2 = |m: &DMatrix<f64>| {
                let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[m[(1, 1)] / det, -m[(0, 1)] / det, -m[(1, 0)] / det, m[(0, 0)] / det],
                )
            };
            let oracle = inv2(&(j.transpose() * inv2(&om) * &j));
            let (b, _) = efficiency_bound(&j, &om).unwrap();
            assert!((b - &oracle).norm() <= 1e-9 * oracle.norm());
        }
    }

    #[test]
    fn sandwich_collapses_under_optimal_weight() {
        let om = random_spd(7, 4);
        let j = DMatrix::from_fn(4, 2, |r, c| ((r * 3 + c * 5) % 7) as f64 - 3.0);
        let (w, _) = invert_omega(&om);
        let s = sandwich_variance(&j, &w, &om).unwrap();
        let (b, _) = efficiency_bound(&j, &om).unwrap();
        assert!((s - &b).norm() <= 1e-10 * b.norm());
        let (a, _) = optimal_combination(&j, &om);
        let cv = combination_variance(&a, &j, &om).unwrap();
        assert!((cv - &b).norm() <= 1e-10 * b.norm());
        let (a, _) = optimal_combination(&j, &DMatrix::identity(4, 4));
        assert_eq!(a, j.transpose());
    }

    #[test]
    fn psd_gap_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!(psd_gap(&i, &i).unwrap().abs() < 1e-15);
        assert!((psd_gap(&(&i * 2.0), &i).unwrap() - 1.0).abs() < 1e-14);
        assert!(psd_gap(&i, &DMatrix::identity(2, 2)).is_err());
    }

    fn parts_for(p: &[f64], e: &[f64], v: &[f64]) -> OmegaParts {
        let n = p.len();
        OmegaParts {
            weights: vec![1.0 / n as f64; n],
            e: DMatrix::from_column_slice(n, 1, e),
            v: v.iter().map(|x| DMatrix::from_element(1, 1, *x)).collect(),
            p: p.to_vec(),
            floored: 0,
        }
    }

    #[test]
    fn constant_p_collapses_known_bound_onto_verify_in() {
        let p = vec![0.375; 5];
        let parts = parts_for(&p, &[0.1, -0.3, 0.7, 0.2, -1.1], &[0.25, 0.5, 0.1, 0.0, 2.0]);
        let a = omega_from_parts(BoundKind::Omega1Known, &parts, 0.375, None).unwrap();
        let b = omega_from_parts(BoundKind::Omega2, &parts, 0.375, None).unwrap();
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn zero_variance_verify_in_is_mean_square() {
        let e = [0.5, -1.0, 2.0];
        let parts = parts_for(&[0.2, 0.4, 0.6], &e, &[0.0; 3]);
        let o = omega_from_parts(BoundKind::Omega2, &parts, 0.4, None).unwrap();
        let expect = e.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((o[(0, 0)] - expect).abs() < 1e-14);
    }

    #[test]
    fn param_bound_requires_information() {
        let parts = parts_for(&[0.3], &[1.0], &[1.0]);
        assert!(omega_from_parts(BoundKind::OmegaParam, &parts, 0.3, None).is_err());
    }

    fn inputs(seed: u64, n: usize) -> InfluenceInputs {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let d: Vec<u8> = (0..n).map(|_| (next() < 0.4) as u8).collect();
        let e = DMatrix::from_fn(n, 2, |_, _| next() * 4.0 - 2.0);
        let m = DMatrix::from_fn(n, 2, |_, _| next() * 6.0 - 3.0);
        let p = (0..n).map(|_| 0.05 + 0.9 * next()).collect();
        InfluenceInputs { d, e, m, p, phat: 0.4 }
    }

    proptest! {
        #[test]
        fn cep_ipw_and_efficient_influence_coincide(seed in 0u64..10_000) {
            let inp = inputs(seed, 50);
            let cep = influence_values(InfluenceKind::CepOut, &inp, None).unwrap();
            let ipw = influence_values(InfluenceKind::IpwOut, &inp, None).unwrap();
            let eff = influence_values(InfluenceKind::EffOutF1, &inp, None).unwrap();
            prop_assert!((&cep - &ipw).amax() <= 1e-12 * (1.0 + cep.amax()));
            prop_assert!((&cep - &eff).amax() == 0.0);
            let cin = influence_values(InfluenceKind::CepIn, &inp, None).unwrap();
            let iin = influence_values(InfluenceKind::IpwIn, &inp, None).unwrap();
            prop_assert!((&cin - &iin).amax() <= 1e-12 * (1.0 + cin.amax()));
        }

        #[test]
        fn non_optimal_sandwich_dominates(seed in 0u64..10_000) {
            let om = random_spd(seed, 4);
            let j = DMatrix::from_fn(4, 2, |r, c| random_spd(seed + 1, 4)[(r, c)] + if r == c { 1.0 } else { 0.0 });
            let w = random_spd(seed + 2, 4);
            let s = sandwich_variance(&j, &w, &om).unwrap();
            let (b, _) = efficiency_bound(&j, &om).unwrap();
            prop_assert!(psd_gap(&s, &b).unwrap() >= -1e-9 * b.norm());
            let a = random_spd(seed + 3, 4).rows(0, 2).into_owned();
            let cv = combination_variance(&a, &j, &om).unwrap();
            prop_assert!(psd_gap(&cv, &b).unwrap() >= -1e-9 * b.norm());
        }
    }
}

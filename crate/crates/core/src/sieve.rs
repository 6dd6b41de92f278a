//! Series bases and least-squares sieve projections.
//!
//! Splines use the truncated power representation: for each coordinate the
//! basis carries `x, x^2, .., x^degree` followed by `max(x - κ, 0)^degree` for
//! every knot `κ`. The constant function is always the first element.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;

/// Ridge multipliers tried in order, relative to `trace(Q'Q) / k_n`.
pub const RIDGE_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Largest tensor-product basis accepted unless the spec overrides it.
pub const DEFAULT_MAX_TERMS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    #[serde(alias = "power")]
    PowerSeries,
    #[serde(alias = "spline")]
    PolySpline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interaction {
    #[default]
    None,
    FullTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KnotSpec {
    /// Number of knots per coordinate, placed at empirical quantiles.
    Count(usize),
    /// Explicit knots, one strictly increasing list per coordinate.
    Explicit(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub degree: usize,
    /// `None` selects `ceil(n^(1/3))` quantile knots per coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<KnotSpec>,
    #[serde(default)]
    pub interaction: Interaction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_terms: Option<usize>,
}

impl BasisSpec {
    pub fn power(degree: usize) -> Self {
        Self {
            kind: BasisKind::PowerSeries,
            degree,
            knots: None,
            interaction: Interaction::None,
            max_terms: None,
        }
    }

    pub fn spline(degree: usize, knots: usize) -> Self {
        Self {
            kind: BasisKind::PolySpline,
            degree,
            knots: Some(KnotSpec::Count(knots)),
            interaction: Interaction::None,
            max_terms: None,
        }
    }
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            kind: BasisKind::PolySpline,
            degree: 3,
            knots: None,
            interaction: Interaction::None,
            max_terms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SieveBasis {
    pub kind: BasisKind,
    pub degree: usize,
    /// Per-coordinate knots (empty for power series).
    pub knots: Vec<Vec<f64>>,
    pub d_x: usize,
    pub k_n: usize,
    pub interaction: Interaction,
    pub warnings: Vec<String>,
}

impl SieveBasis {
    fn from_parts(
        kind: BasisKind,
        degree: usize,
        knots: Vec<Vec<f64>>,
        d_x: usize,
        interaction: Interaction,
        warnings: Vec<String>,
    ) -> Self {
        let per_coord: Vec<usize> = (0..d_x).map(|c| degree + knots.get(c).map_or(0, Vec::len)).collect();
        let k_n = match interaction {
            Interaction::None => 1 + per_coord.iter().sum::<usize>(),
            Interaction::FullTensor => per_coord.iter().map(|k| k + 1).product(),
        };
        Self {
            kind,
            degree,
            knots,
            d_x,
            k_n,
            interaction,
            warnings,
        }
    }

    /// Non-constant univariate terms of coordinate `c` at value `v`.
    fn univariate(&self, c: usize, v: f64, out: &mut Vec<f64>) {
        let mut pow = 1.0;
        for _ in 0..self.degree {
            pow *= v;
            out.push(pow);
        }
        if let Some(knots) = self.knots.get(c) {
            for &k in knots {
                let t = if self.degree == 0 {
                    if v > k {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    (v - k).max(0.0).powi(self.degree as i32)
                };
                out.push(t);
            }
        }
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Knots at the empirical quantiles `j / (count + 1)`, duplicates removed.
pub fn quantile_knots(values: &[f64], count: usize) -> Vec<f64> {
    if values.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut knots: Vec<f64> = (1..=count)
        .map(|j| quantile_sorted(&sorted, j as f64 / (count + 1) as f64))
        .collect();
    knots.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    knots
}

fn default_knot_count(n: usize) -> usize {
    (n as f64).cbrt().ceil() as usize
}

/// Build a basis, placing knots from `x_sample` (`n × d_x`).
pub fn build_basis(spec: &BasisSpec, x_sample: &DMatrix<f64>) -> Result<SieveBasis> {
    build_basis_capped(spec, x_sample, usize::MAX)
}

/// As [`build_basis`], but shrinks the basis (fewer knots, then lower degree)
/// until `k_n <= cap`, recording a warning when it does.
pub fn build_basis_capped(spec: &BasisSpec, x_sample: &DMatrix<f64>, cap: usize) -> Result<SieveBasis> {
    let n = x_sample.nrows();
    let d_x = x_sample.ncols();
    let mut warnings = Vec::new();
    let columns: Vec<Vec<f64>> = (0..d_x).map(|c| x_sample.column(c).iter().copied().collect()).collect();
    for (c, col) in columns.iter().enumerate() {
        let first = col.first().copied().unwrap_or(0.0);
        if col.iter().all(|&v| v == first) {
            warnings.push(format!("DegenerateCovariate: x{} has zero variance", c + 1));
        }
    }

    let mut degree = spec.degree;
    let mut knots: Vec<Vec<f64>> = match (spec.kind, &spec.knots) {
        (BasisKind::PowerSeries, _) => Vec::new(),
        (BasisKind::PolySpline, Some(KnotSpec::Explicit(k))) => {
            if k.len() != d_x {
                return Err(Error::Config(format!(
                    "explicit knots given for {} coordinates, data has {d_x}",
                    k.len()
                )));
            }
            for list in k {
                if list.windows(2).any(|w| w[0] >= w[1]) || list.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("knots must be finite and strictly increasing".into()));
                }
            }
            k.clone()
        }
        (BasisKind::PolySpline, spec_knots) => {
            let count = match spec_knots {
                Some(KnotSpec::Count(c)) => *c,
                _ => default_knot_count(n),
            };
            columns.iter().map(|col| quantile_knots(col, count)).collect()
        }
    };

    let max_terms = spec.max_terms.unwrap_or(DEFAULT_MAX_TERMS);
    let mut basis = SieveBasis::from_parts(spec.kind, degree, knots.clone(), d_x, spec.interaction, Vec::new());
    if spec.interaction == Interaction::FullTensor && basis.k_n > max_terms {
        return Err(Error::Config(format!(
            "tensor basis has {} terms, budget is {max_terms}",
            basis.k_n
        )));
    }

    let limit = cap.min(n);
    if basis.k_n > limit && cap < usize::MAX {
        let before = basis.k_n;
        while basis.k_n > limit {
            let longest = knots.iter().map(Vec::len).max().unwrap_or(0);
            if longest > 0 {
                for (c, list) in knots.iter_mut().enumerate() {
                    if list.len() == longest {
                        *list = if spec.knots.is_some() && matches!(spec.knots, Some(KnotSpec::Explicit(_))) {
                            let mut l = list.clone();
                            l.pop();
                            l
                        } else {
                            quantile_knots(&columns[c], longest - 1)
                        };
                    }
                }
            } else if degree > 0 {
                degree -= 1;
            } else {
                break;
            }
            basis = SieveBasis::from_parts(spec.kind, degree, knots.clone(), d_x, spec.interaction, Vec::new());
        }
        warnings.push(format!(
            "basis shrunk from {before} to {} terms to fit {limit} observations",
            basis.k_n
        ));
    }
    if n < basis.k_n {
        return Err(Error::InsufficientData {
            needed: basis.k_n,
            available: n,
        });
    }
    basis.warnings = warnings;
    Ok(basis)
}

/// Basis vector `q(x)` of length `k_n`; the first entry is 1.
pub fn eval_basis(basis: &SieveBasis, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(basis.k_n);
    match basis.interaction {
        Interaction::None => {
            out.push(1.0);
            for c in 0..basis.d_x {
                basis.univariate(c, x[c], &mut out);
            }
        }
        Interaction::FullTensor => {
            out.push(1.0);
            let mut scratch = Vec::new();
            for c in 0..basis.d_x {
                scratch.clear();
                scratch.push(1.0);
                basis.univariate(c, x[c], &mut scratch);
                let prev = std::mem::take(&mut out);
                for &a in &prev {
                    for &b in &scratch {
                        out.push(a * b);
                    }
                }
            }
        }
    }
    debug_assert_eq!(out.len(), basis.k_n);
    out
}

pub fn design_matrix(basis: &SieveBasis, x_sample: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x_sample.nrows();
    let mut q = DMatrix::zeros(n, basis.k_n);
    let mut xrow = vec![0.0; x_sample.ncols()];
    for i in 0..n {
        for (c, v) in xrow.iter_mut().enumerate() {
            *v = x_sample[(i, c)];
        }
        for (j, v) in eval_basis(basis, &xrow).into_iter().enumerate() {
            q[(i, j)] = v;
        }
    }
    q
}

/// Fitted sieve coefficients for one or more targets.
#[derive(Debug, Clone)]
pub struct ProjectionFit {
    pub basis: SieveBasis,
    /// `k_n × d_target`.
    pub coeffs: DMatrix<f64>,
    pub ridge: f64,
    pub n_fit: usize,
}

impl ProjectionFit {
    pub fn d_target(&self) -> usize {
        self.coeffs.ncols()
    }
}

pub fn predict(fit: &ProjectionFit, x: &[f64]) -> Vec<f64> {
    let q = eval_basis(&fit.basis, x);
    (0..fit.coeffs.ncols())
        .map(|t| q.iter().enumerate().map(|(j, v)| v * fit.coeffs[(j, t)]).sum())
        .collect()
}

/// Smallest accepted `|R_jj| / max |R_jj|` of the column-scaled QR factor.
const QR_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
enum Solver {
    /// Householder QR of the column-scaled design; used when ridge is 0.
    Qr {
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        scale: DVector<f64>,
    },
    /// Normal equations with a positive ridge.
    Normal(SpdFactor),
}

/// Factorized least-squares system for a fixed design, reusable across targets.
#[derive(Debug, Clone)]
pub struct SieveProjector {
    basis: SieveBasis,
    design: DMatrix<f64>,
    solver: Solver,
    ridge: f64,
}

fn scaled_qr(design: &DMatrix<f64>) -> Option<Solver> {
    let (n, k) = design.shape();
    if n < k {
        return None;
    }
    let mut scale = DVector::zeros(k);
    let mut scaled = design.clone();
    for j in 0..k {
        let norm = design.column(j).norm();
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        scale[j] = 1.0 / norm;
        scaled.column_mut(j).scale_mut(scale[j]);
    }
    let qr = scaled.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..k).map(|j| r[(j, j)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    if diag.iter().any(|&d| !(d > QR_RANK_TOL * max)) {
        return None;
    }
    Some(Solver::Qr { q: qr.q(), r, scale })
}

impl SieveProjector {
    pub fn new(basis: &SieveBasis, x_sample: &DMatrix<f64>) -> Result<Self> {
        if x_sample.nrows() == 0 {
            return Err(Error::InsufficientData {
                needed: 1,
                available: 0,
            });
        }
        if x_sample.ncols() != basis.d_x {
            return Err(Error::ShapeMismatch(format!(
                "basis expects {} covariates, sample has {}",
                basis.d_x,
                x_sample.ncols()
            )));
        }
        let design = design_matrix(basis, x_sample);
        if let Some(solver) = scaled_qr(&design) {
            return Ok(Self {
                basis: basis.clone(),
                design,
                solver,
                ridge: 0.0,
            });
        }
        let gram = design.transpose() * &design;
        let k = basis.k_n;
        let scale = gram.trace() / k as f64;
        for mult in RIDGE_LADDER.iter().skip(1) {
            let ridge = mult * scale;
            let mut g = gram.clone();
            for i in 0..k {
                g[(i, i)] += ridge;
            }
            if let Some(factor) = SpdFactor::new(&g) {
                return Ok(Self {
                    basis: basis.clone(),
                    design,
                    solver: Solver::Normal(factor),
                    ridge,
                });
            }
        }
        Err(Error::SingularDesign)
    }

    pub fn basis(&self) -> &SieveBasis {
        &self.basis
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    /// Solves `(Q'Q + ridge I) c = rhs` for a right-hand side in coefficient space.
    fn solve_gram(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.solver {
            Solver::Normal(f) => f.solve(rhs),
            Solver::Qr { r, scale, .. } => {
                // (Q'Q)^-1 = S (R'R)^-1 S
                let mut b = rhs.clone();
                for (i, mut row) in b.row_iter_mut().enumerate() {
                    row *= scale[i];
                }
                let y = r.tr_solve_upper_triangular(&b).expect("checked rank");
                let mut c = r.solve_upper_triangular(&y).expect("checked rank");
                for (i, mut row) in c.row_iter_mut().enumerate() {
                    row *= scale[i];
                }
                c
            }
        }
    }

    /// Least-squares coefficients for `targets` (`n × d_target`).
    pub fn fit(&self, targets: &DMatrix<f64>) -> Result<ProjectionFit> {
        if targets.nrows() != self.design.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} target rows for {} design rows",
                targets.nrows(),
                self.design.nrows()
            )));
        }
        let coeffs = match &self.solver {
            Solver::Normal(f) => f.solve(&(self.design.transpose() * targets)),
            Solver::Qr { q, r, scale } => {
                let qt = q.transpose() * targets;
                let mut c = r.solve_upper_triangular(&qt).expect("checked rank");
                for (i, mut row) in c.row_iter_mut().enumerate() {
                    row *= scale[i];
                }
                c
            }
        };
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularDesign);
        }
        Ok(ProjectionFit {
            basis: self.basis.clone(),
            coeffs,
            ridge: self.ridge,
            n_fit: self.design.nrows(),
        })
    }

    /// Weights `ω` with `Σ_j ω_j t_j = q̄' coeffs(t)` for every target `t`.
    ///
    /// Averaging fitted values against a basis mean `q̄` is linear in the
    /// targets, so it reduces to a weighted sum over the fit sample.
    pub fn smoother_weights(&self, basis_mean: &DVector<f64>) -> Vec<f64> {
        let rhs = DMatrix::from_column_slice(basis_mean.len(), 1, basis_mean.as_slice());
        let u = self.solve_gram(&rhs);
        (&self.design * u).iter().copied().collect()
    }
}

/// Least-squares sieve projection of `targets` on `basis` over `x_sample`.
pub fn sieve_ls_fit(basis: &SieveBasis, x_sample: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<ProjectionFit> {
    SieveProjector::new(basis, x_sample)?.fit(targets)
}

/// Weighted average of basis vectors over the rows of `x_sample`.
pub fn basis_mean(basis: &SieveBasis, x_sample: &DMatrix<f64>, weights: Option<&[f64]>) -> DVector<f64> {
    let n = x_sample.nrows();
    let mut acc = DVector::zeros(basis.k_n);
    let mut xrow = vec![0.0; x_sample.ncols()];
    for i in 0..n {
        for (c, v) in xrow.iter_mut().enumerate() {
            *v = x_sample[(i, c)];
        }
        let w = weights.map_or(1.0, |w| w[i]);
        for (j, v) in eval_basis(basis, &xrow).into_iter().enumerate() {
            acc[j] += w * v;
        }
    }
    acc / n as f64
}

//! Box-constrained Nelder–Mead for GMM objectives.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub max_iter: usize,
    /// Stop when the simplex diameter falls below `tol * (1 + ‖β‖)`.
    pub tol: f64,
    /// Initial simplex edge, relative to `max(1, |β_k|)` and the box width.
    pub initial_step: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            tol: 1e-9,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub beta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Reflect a point back into the box, then clamp.
fn reflect(v: &mut [f64], bx: &[(f64, f64)]) {
    for (x, &(lo, hi)) in v.iter_mut().zip(bx) {
        if *x > hi {
            *x = hi - (*x - hi);
        }
        if *x < lo {
            *x = lo + (lo - *x);
        }
        *x = x.clamp(lo, hi);
    }
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Minimizes `f` over the box from `init`. Deterministic for a given input.
pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, init: &[f64], bx: &[(f64, f64)], spec: &OptimizerSpec) -> OptimResult {
    let k = init.len();
    let mut x0 = init.to_vec();
    reflect(&mut x0, bx);
    let mut simplex = vec![x0.clone()];
    for c in 0..k {
        let (lo, hi) = bx[c];
        let mut h = spec.initial_step * x0[c].abs().max(1.0);
        if (hi - lo).is_finite() {
            h = h.min(0.25 * (hi - lo));
        }
        let mut v = x0.clone();
        v[c] = if v[c] + h <= hi { v[c] + h } else { v[c] - h };
        reflect(&mut v, bx);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| finite_or_inf(f(v))).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < spec.max_iter {
        let mut order: Vec<usize> = (0..=k).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let best = &simplex[0];
        let diameter = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(best).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let scale = 1.0 + best.iter().map(|v| v * v).sum::<f64>().sqrt();
        if diameter < spec.tol * scale {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..k)
            .map(|c| simplex[..k].iter().map(|v| v[c]).sum::<f64>() / k as f64)
            .collect();
        let worst = simplex[k].clone();
        let along = |t: f64| {
            let mut p: Vec<f64> = centroid.iter().zip(&worst).map(|(c, w)| c + t * (c - w)).collect();
            reflect(&mut p, bx);
            p
        };
        let xr = along(1.0);
        let fr = finite_or_inf(f(&xr));
        if fr < values[0] {
            let xe = along(2.0);
            let fe = finite_or_inf(f(&xe));
            if fe < fr {
                simplex[k] = xe;
                values[k] = fe;
            } else {
                simplex[k] = xr;
                values[k] = fr;
            }
            continue;
        }
        if fr < values[k - 1] {
            simplex[k] = xr;
            values[k] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[k] {
            let xc = along(0.5);
            let fc = finite_or_inf(f(&xc));
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = finite_or_inf(f(&xc));
            (xc, fc)
        };
        if fc < values[k].min(fr) {
            simplex[k] = xc;
            values[k] = fc;
            continue;
        }
        // Shrink toward the best vertex.
        let best = simplex[0].clone();
        for i in 1..=k {
            let mut v: Vec<f64> = simplex[i].iter().zip(&best).map(|(a, b)| b + 0.5 * (a - b)).collect();
            reflect(&mut v, bx);
            values[i] = finite_or_inf(f(&v));
            simplex[i] = v;
        }
    }
    let (ib, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .unwrap();
    OptimResult {
        beta: simplex[ib].clone(),
        objective: values[ib],
        iterations,
        converged,
    }
}

/// Minimizes a GMM objective `q(β) = ḡ(β)'Wḡ(β)`.
pub fn gmm_minimize(
    objective: &dyn Fn(&[f64]) -> f64,
    beta_init: &[f64],
    bx: &[(f64, f64)],
    spec: &OptimizerSpec,
) -> OptimResult {
    nelder_mead(objective, beta_init, bx, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    const WIDE: (f64, f64) = (-1e6, 1e6);

    #[test]
    fn quadratic_from_zero() {
        let r = gmm_minimize(
            &|b: &[f64]| (b[0] - 2.0).powi(2),
            &[0.0],
            &[WIDE],
            &OptimizerSpec::default(),
        );
        assert!(r.converged);
        assert!((r.beta[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock_two_dimensions() {
        let f = |b: &[f64]| (1.0 - b[0]).powi(2) + 100.0 * (b[1] - b[0] * b[0]).powi(2);
        let r = nelder_mead(&f, &[-1.2, 1.0], &[WIDE, WIDE], &OptimizerSpec::default());
        assert!((r.beta[0] - 1.0).abs() < 1e-5 && (r.beta[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn respects_box() {
        let r = nelder_mead(
            &|b: &[f64]| (b[0] + 3.0).powi(2),
            &[0.5],
            &[(0.0, 1.0)],
            &OptimizerSpec::default(),
        );
        assert!(r.beta[0] >= 0.0 && r.beta[0] < 1e-6);
    }

    #[test]
    fn over_identified_matches_grid_search() {
        // Two moments in one parameter: g = (1.3 - b, 2 - b^2 - 0.1), W = diag(1, 2).
        let q = |b: f64| (1.3 - b).powi(2) + 2.0 * (1.9 - b * b).powi(2);
        let r = nelder_mead(&|b: &[f64]| q(b[0]), &[0.0], &[(-3.0, 3.0)], &OptimizerSpec::default());
        let mut best = (0.0, f64::INFINITY);
        let n = 1_000_000;
        for i in 0..=n {
            let b = -3.0 + 6.0 * i as f64 / n as f64;
            let v = q(b);
            if v < best.1 {
                best = (b, v);
            }
        }
        assert!((r.beta[0] - best.0).abs() < 1e-4);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let spec = OptimizerSpec {
            max_iter: 3,
            ..OptimizerSpec::default()
        };
        let r = nelder_mead(&|b: &[f64]| (b[0] - 2.0).powi(2), &[0.0], &[WIDE], &spec);
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
    }
}

//! Small dense optimizers: a box-bounded Nelder-Mead simplex search with a
//! coordinate polish, and Levenberg-Marquardt for least squares with a
//! finite-difference Jacobian.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    /// Objective evaluations allowed across the whole search.
    pub max_evals: usize,
    /// Edge length of the starting simplex, in the caller's coordinates.
    pub initial_step: f64,
    /// Simplex diameter below which the search has converged.
    pub x_tol: f64,
    /// Objective spread over the simplex below which the search has converged.
    pub f_tol: f64,
    /// Iteration window for stall detection.
    pub stall_window: usize,
    /// Minimum objective decrease per window.
    pub stall_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 5000,
            initial_step: 0.05,
            x_tol: 1e-9,
            f_tol: 1e-12,
            stall_window: 100,
            stall_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub iterations: usize,
    /// The simplex collapsed within tolerance before the budget ran out.
    pub converged: bool,
    /// The search ended on a stalled objective with a non-collapsed simplex.
    pub stalled: bool,
}

fn clamp_into(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(lo, hi);
    }
}

struct Counter<'a, F> {
    f: &'a mut F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counter<'_, F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
///
/// Trial points are projected onto the box. The search is deterministic:
/// ties in the vertex ordering are broken by insertion order.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &NelderMeadOptions,
) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(lower.len(), n);
    assert_eq!(upper.len(), n);
    let mut counter = Counter {
        f: &mut f,
        evals: 0,
    };

    let mut start = x0.to_vec();
    clamp_into(&mut start, lower, upper);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = counter.eval(&start);
    simplex.push((start.clone(), f0));
    for i in 0..n {
        let mut p = start.clone();
        let span = upper[i] - lower[i];
        let step = opts.initial_step.min(span);
        // Step away from the nearer bound so the vertex stays distinct.
        if p[i] + step <= upper[i] {
            p[i] += step;
        } else {
            p[i] -= step;
        }
        clamp_into(&mut p, lower, upper);
        let fp = counter.eval(&p);
        simplex.push((p, fp));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut stalled = false;

    if n == 0 {
        return Minimum {
            x: start,
            f: f0,
            evals: counter.evals,
            iterations: 0,
            converged: true,
            stalled: false,
        };
    }

    while counter.evals < opts.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(p, _)| {
                p.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if diameter <= opts.x_tol && (worst - best).abs() <= opts.f_tol.max(opts.f_tol * best.abs())
        {
            converged = true;
            break;
        }
        history.push(best);
        if history.len() > opts.stall_window {
            let earlier = history[history.len() - 1 - opts.stall_window];
            if earlier - best < opts.stall_tol && diameter > opts.x_tol {
                stalled = true;
                break;
            }
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (p, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            clamp_into(&mut p, lower, upper);
            p
        };

        let xr = along(alpha);
        let fr = counter.eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(gamma);
            let fe = counter.eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(rho);
                let fc = counter.eval(&xc);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = counter.eval(&xc);
                (xc, fc)
            };
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (xc, fc);
            } else {
                let best_point = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let mut p: Vec<f64> = best_point
                        .iter()
                        .zip(&vertex.0)
                        .map(|(b, v)| b + sigma * (v - b))
                        .collect();
                    clamp_into(&mut p, lower, upper);
                    let fp = counter.eval(&p);
                    *vertex = (p, fp);
                }
            }
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    Minimum {
        x,
        f: fx,
        evals: counter.evals,
        iterations,
        converged,
        stalled,
    }
}

/// Bounded pattern search along each coordinate with geometrically shrinking
/// steps. Returns the improved point, its value and the evaluations used.
pub fn coordinate_polish<F>(
    mut f: F,
    x0: &[f64],
    f0: f64,
    lower: &[f64],
    upper: &[f64],
    steps: &[f64],
    max_evals: usize,
) -> (Vec<f64>, f64, usize)
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = x0.to_vec();
    let mut fx = f0;
    let mut evals = 0;
    for &step in steps {
        loop {
            let mut improved = false;
            for i in 0..x.len() {
                for dir in [1.0, -1.0] {
                    if evals >= max_evals {
                        return (x, fx, evals);
                    }
                    let mut trial = x.clone();
                    trial[i] = (trial[i] + dir * step).clamp(lower[i], upper[i]);
                    if trial[i] == x[i] {
                        continue;
                    }
                    evals += 1;
                    let ft = f(&trial);
                    if ft < fx {
                        x = trial;
                        fx = ft;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
    (x, fx, evals)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative cost decrease below which the fit has converged.
    pub f_tol: f64,
    /// Relative step size below which the fit has converged.
    pub x_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            f_tol: 1e-15,
            x_tol: 1e-13,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub x: Vec<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// s²(JᵀJ)⁻¹ with s² = cost/(m − n), when JᵀJ is invertible.
    pub covariance: Option<DMatrix<f64>>,
}

/// Central-difference Jacobian of `residuals` at `x`; step for parameter
/// `i` is `1e-6·max(|x_i|, scales[i])`.
pub fn jacobian<F>(residuals: &F, x: &[f64], scales: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let r0 = residuals(x);
    let mut jac = DMatrix::zeros(r0.len(), x.len());
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(scales[i]);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let rp = residuals(&xp);
        let rm = residuals(&xm);
        for k in 0..r0.len() {
            jac[(k, i)] = (rp[k] - rm[k]) / (2.0 * h);
        }
    }
    jac
}

/// s²(JᵀJ)⁻¹ for residual vector `r` and Jacobian `jac`.
pub fn covariance_from_jacobian(jac: &DMatrix<f64>, r: &[f64]) -> Option<DMatrix<f64>> {
    let (m, n) = jac.shape();
    if m <= n {
        return None;
    }
    let cost: f64 = r.iter().map(|v| v * v).sum();
    let s2 = cost / (m - n) as f64;
    let jtj = jac.transpose() * jac;
    jtj.try_inverse().map(|inv| inv * s2)
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Levenberg-Marquardt with Marquardt diagonal scaling.
pub fn levenberg_marquardt<F>(
    residuals: F,
    x0: &[f64],
    scales: &[f64],
    opts: &LmOptions,
) -> LmResult
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = residuals(&x);
    let mut cost = sum_sq(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let jac = jacobian(&residuals, &x, scales);
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * DVector::from_column_slice(&r);
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&grad));
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rt = residuals(&trial);
            let ct = sum_sq(&rt);
            if ct.is_finite() && ct <= cost {
                let rel_step = step
                    .iter()
                    .zip(&x)
                    .zip(scales)
                    .map(|((s, v), sc)| s.abs() / v.abs().max(*sc))
                    .fold(0.0, f64::max);
                let rel_drop = (cost - ct) / cost.max(f64::MIN_POSITIVE);
                x = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel_drop <= opts.f_tol || rel_step <= opts.x_tol || cost == 0.0 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No downhill step at any damping: already at a minimum.
            converged = true;
        }
        if converged {
            break;
        }
    }

    let jac = jacobian(&residuals, &x, scales);
    let covariance = covariance_from_jacobian(&jac, &r);
    LmResult {
        x,
        cost,
        residuals: r,
        iterations,
        converged,
        covariance,
    }
}

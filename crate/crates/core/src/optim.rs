//! Derivative-free simplex search with a quasi-Newton polish step.
//!
//! The variance-parameter spaces here are tiny (at most four free
//! coordinates), so a Nelder-Mead simplex is the robust baseline; when an
//! analytic gradient is available, a few damped Newton iterations afterwards
//! sharpen the optimum to near machine precision.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// Relative tolerance on the objective spread across the simplex.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial displacement of the simplex vertices from the start point.
    pub step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 500, step: 0.4 }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximizes `f` by Nelder-Mead. `f` may return `-inf` for infeasible points.
pub fn maximize_simplex<F: FnMut(&[f64]) -> f64>(
    x0: &[f64],
    opts: &SimplexOptions,
    mut f: F,
) -> SimplexResult {
    let n = x0.len();
    let mut eval = |x: &[f64]| -> f64 {
        let v = f(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };

    if n == 0 {
        let value = eval(x0);
        return SimplexResult { x: x0.to_vec(), value, iterations: 0, converged: true };
    }

    // Vertices with their objective values; we maximize.
    let mut verts: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(x0);
    verts.push((x0.to_vec(), v0));
    for j in 0..n {
        let mut x = x0.to_vec();
        x[j] += opts.step;
        let v = eval(&x);
        verts.push((x, v));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        // Best first.
        verts.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let best = verts[0].1;
        let worst = verts[n].1;
        if best.is_finite() && worst.is_finite() && (best - worst).abs() <= opts.tol * (1.0 + best.abs()) {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for (x, _) in verts.iter().take(n) {
            for j in 0..n {
                centroid[j] += x[j] / n as f64;
            }
        }
        let worst_x = verts[n].0.clone();
        let point = |coef: f64| -> Vec<f64> {
            (0..n).map(|j| centroid[j] + coef * (centroid[j] - worst_x[j])).collect()
        };

        let xr = point(alpha);
        let fr = eval(&xr);
        let second_worst = verts[n - 1].1;

        if fr > best {
            let xe = point(alpha * gamma);
            let fe = eval(&xe);
            verts[n] = if fe > fr { (xe, fe) } else { (xr, fr) };
        } else if fr > second_worst {
            verts[n] = (xr, fr);
        } else {
            // Contract toward the better of the reflected/worst points.
            let (xc, fc) = if fr > verts[n].1 {
                let xc = point(alpha * rho);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = point(-rho);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc > verts[n].1.max(fr) {
                verts[n] = (xc, fc);
            } else {
                // Shrink everything toward the best vertex.
                let best_x = verts[0].0.clone();
                for v in verts.iter_mut().skip(1) {
                    for j in 0..n {
                        v.0[j] = best_x[j] + sigma * (v.0[j] - best_x[j]);
                    }
                    v.1 = eval(&v.0);
                }
            }
        }
    }

    verts.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let (x, value) = verts.swap_remove(0);
    SimplexResult { x, value, iterations, converged }
}

#[derive(Debug, Clone)]
pub struct PolishResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Damped Newton refinement of a maximum, using an analytic gradient and a
/// finite-difference Hessian of that gradient. Steps that do not improve the
/// objective are rejected, so the result is never worse than the input.
pub fn polish_newton<F, G>(
    x0: &[f64],
    f0: f64,
    max_iter: usize,
    mut f: F,
    mut grad: G,
) -> PolishResult
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Option<Vec<f64>>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f0;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;

    if n == 0 {
        return PolishResult { x, value: fx, iterations, grad_norm: 0.0 };
    }

    // The Hessian is refreshed lazily: near the optimum it is nearly
    // constant, so gradient-only Newton iterations with the last factored
    // Hessian converge at a fraction of the cost.
    let mut neg_h: Option<DMatrix<f64>> = None;
    let mut stalled = false;

    for it in 0..max_iter {
        iterations = it;
        let g = match grad(&x) {
            Some(g) if g.iter().all(|v| v.is_finite()) => g,
            _ => break,
        };
        grad_norm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if grad_norm <= 1e-11 * (1.0 + fx.abs()) {
            break;
        }

        let mut was_fresh = false;
        if neg_h.is_none() || stalled {
            was_fresh = true;
            // Central-difference Hessian columns from the analytic gradient.
            let mut hess = DMatrix::zeros(n, n);
            let mut ok = true;
            for j in 0..n {
                let h = 1e-5 * (1.0 + x[j].abs());
                let mut xp = x.clone();
                xp[j] += h;
                let mut xm = x.clone();
                xm[j] -= h;
                match (grad(&xp), grad(&xm)) {
                    (Some(gp), Some(gm)) => {
                        for i in 0..n {
                            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
                        }
                    }
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                break;
            }
            let mut sym = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    sym[(i, j)] = -0.5 * (hess[(i, j)] + hess[(j, i)]);
                }
            }
            neg_h = Some(sym);
            stalled = false;
        }
        let neg_h = neg_h.as_ref().unwrap().clone();
        let gvec = DVector::from_column_slice(&g);
        let mut ridge = 0.0;
        let scale = 1.0 + neg_h.diagonal().amax();
        let dir = loop {
            let mut m = neg_h.clone();
            for i in 0..n {
                m[(i, i)] += ridge;
            }
            if let Some(ch) = m.cholesky() {
                break Some(ch.solve(&gvec));
            }
            ridge = if ridge == 0.0 { 1e-8 * scale } else { ridge * 10.0 };
            if ridge > 1e6 * scale {
                break None;
            }
        };
        let Some(dir) = dir else { break };

        // Near the optimum the objective comparison is noise-limited while
        // the Newton step length still bounds the distance to the optimum,
        // so a tiny full step is accepted outright.
        let step_norm = dir.amax();
        if step_norm <= 1e-7 * (1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
            for j in 0..n {
                x[j] += dir[j];
            }
            let ft = f(&x);
            if ft.is_finite() {
                fx = fx.max(ft);
            }
            if step_norm <= 1e-11 {
                break;
            }
            continue;
        }

        // Backtracking line search on the ascent direction.
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let xt: Vec<f64> = (0..n).map(|j| x[j] + t * dir[j]).collect();
            let ft = f(&xt);
            if ft.is_finite() && ft > fx {
                x = xt;
                fx = ft;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            if was_fresh {
                break;
            }
            // Retry with a fresh Hessian before giving up.
            stalled = true;
        }
    }

    PolishResult { x, value: fx, iterations, grad_norm }
}

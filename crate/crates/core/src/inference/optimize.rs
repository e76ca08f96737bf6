use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::InferenceError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Central-difference step.
    pub fd_step: f64,
    /// Longest allowed step in the transformed coordinates.
    pub max_step: f64,
}

impl Default for ModeOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-5,
            fd_step: 1e-4,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub z: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

struct Counted<F> {
    f: F,
    calls: usize,
}

impl<F: Fn(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, z: &[f64]) -> f64 {
        self.calls += 1;
        let v = (self.f)(z);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn gradient(&mut self, z: &[f64], fz: f64, h: f64) -> DVector<f64> {
        let mut g = DVector::zeros(z.len());
        let mut x = z.to_vec();
        for k in 0..z.len() {
            x[k] = z[k] + h;
            let up = self.eval(&x);
            x[k] = z[k] - h;
            let down = self.eval(&x);
            x[k] = z[k];
            // components that point out of the support are projected away
            g[k] = match (up.is_finite(), down.is_finite()) {
                (true, true) => (up - down) / (2.0 * h),
                (true, false) => ((up - fz) / h).max(0.0),
                (false, true) => ((fz - down) / h).min(0.0),
                (false, false) => 0.0,
            };
        }
        g
    }
}

/// Quasi-Newton (BFGS) ascent with finite-difference gradients and a
/// backtracking line search. Returns the best iterate, flagged when the
/// gradient tolerance was not reached.
pub fn maximize<F: Fn(&[f64]) -> f64>(f: F, init: &[f64], opts: &ModeOptions) -> Result<ModeResult, InferenceError> {
    let d = init.len();
    let mut obj = Counted { f, calls: 0 };
    let mut x = DVector::from_column_slice(init);
    let mut fx = obj.eval(x.as_slice());
    if !fx.is_finite() {
        return Err(InferenceError::InvalidInit(fx));
    }
    if d == 0 {
        return Ok(ModeResult {
            z: vec![],
            value: fx,
            iterations: 0,
            evaluations: obj.calls,
            grad_norm: 0.0,
            converged: true,
        });
    }
    // work on the negated objective
    let mut g = -obj.gradient(x.as_slice(), fx, opts.fd_step);
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = g.norm() <= opts.grad_tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut p = -(&hinv * &g);
        if p.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(d, d);
            fresh = true;
            p = -g.clone();
        }
        let norm = p.norm();
        if norm > opts.max_step {
            p *= opts.max_step / norm;
        }
        let slope = p.dot(&g);
        let mut alpha = 1.0;
        let mut next = None;
        for _ in 0..50 {
            let trial = &x + alpha * &p;
            let ft = obj.eval(trial.as_slice());
            if ft.is_finite() && -ft <= -fx + 1e-4 * alpha * slope {
                next = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = next else {
            if fresh {
                break;
            }
            hinv = DMatrix::identity(d, d);
            fresh = true;
            continue;
        };
        let gn = -obj.gradient(xn.as_slice(), fnew, opts.fd_step);
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                hinv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(d, d);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            hinv = &left * &hinv * &right + rho * &s * s.transpose();
            fresh = false;
        }
        let small_change = (fx - fnew).abs() <= 1e-15 * fx.abs().max(1.0) && s.norm() <= 1e-12;
        x = xn;
        fx = fnew;
        g = gn;
        converged = g.norm() <= opts.grad_tol;
        if small_change && !converged {
            break;
        }
    }
    Ok(ModeResult {
        z: x.iter().copied().collect(),
        value: fx,
        iterations,
        evaluations: obj.calls,
        grad_norm: g.norm(),
        converged,
    })
}

/// Central-difference Hessian of `f` at `z`.
pub fn numerical_hessian<F: Fn(&[f64]) -> f64>(f: F, z: &[f64], h: f64) -> DMatrix<f64> {
    let d = z.len();
    let f0 = f(z);
    let mut hm = DMatrix::zeros(d, d);
    let mut x = z.to_vec();
    for i in 0..d {
        x[i] = z[i] + h;
        let up = f(&x);
        x[i] = z[i] - h;
        let down = f(&x);
        x[i] = z[i];
        hm[(i, i)] = (up - 2.0 * f0 + down) / (h * h);
        for j in 0..i {
            let mut eval = |di: f64, dj: f64| {
                x[i] = z[i] + di;
                x[j] = z[j] + dj;
                let v = f(&x);
                x[i] = z[i];
                x[j] = z[j];
                v
            };
            let v = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
            hm[(i, j)] = v;
            hm[(j, i)] = v;
        }
    }
    hm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_quadratic() {
        let r = maximize(|z| -3.0 * (z[0] - 1.234567).powi(2) + 2.0, &[-4.0], &ModeOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.z[0] - 1.234567).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock_converges() {
        let f = |z: &[f64]| -((1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2));
        let r = maximize(f, &[-1.2, 1.0], &ModeOptions::default()).unwrap();
        assert!((r.z[0] - 1.0).abs() < 1e-3 && (r.z[1] - 1.0).abs() < 1e-3, "{:?}", r);
    }

    #[test]
    fn stops_on_infinite_walls() {
        let f = |z: &[f64]| if z[0] > 2.0 { f64::NEG_INFINITY } else { -(z[0] - 3.0).powi(2) };
        let r = maximize(f, &[0.0], &ModeOptions::default()).unwrap();
        assert!(r.z[0] <= 2.0 && r.z[0] > 2.0 - 1e-3, "{r:?}");
        assert!(r.converged);
    }

    #[test]
    fn boundary_in_one_coordinate_leaves_the_other_free() {
        let f = |z: &[f64]| {
            if z[0] < -1.0 {
                f64::NEG_INFINITY
            } else {
                -(z[0] + 3.0).powi(2) - 2.0 * (z[1] - 0.5).powi(2)
            }
        };
        let r = maximize(f, &[1.0, 1.0], &ModeOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.z[0] + 1.0).abs() < 1e-3 && (r.z[1] - 0.5).abs() < 1e-5, "{r:?}");
    }

    #[test]
    fn invalid_init_is_an_error() {
        assert!(maximize(|_| f64::NEG_INFINITY, &[0.0], &ModeOptions::default()).is_err());
    }

    #[test]
    fn hessian_of_quadratic() {
        let h = numerical_hessian(|z| -(2.0 * z[0] * z[0] + z[0] * z[1] + 3.0 * z[1] * z[1]), &[0.3, -0.2], 1e-3);
        assert!((h[(0, 0)] + 4.0).abs() < 1e-6);
        assert!((h[(0, 1)] + 1.0).abs() < 1e-6);
        assert!((h[(1, 1)] + 6.0).abs() < 1e-6);
    }
}

//! Box-constrained quasi-Newton minimization with finite-difference
//! gradients. Sized for the handful of variance parameters of a mixed model.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct Options {
    pub max_iter: usize,
    /// Stop when the projected gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when successive objective values differ by less than this.
    pub f_tol: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-7,
            f_tol: 1e-13,
            lower: -30.0,
            upper: 30.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn eval<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> f64 {
    let v = f(x);
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

fn gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], fx: f64, opts: &Options) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let lo = (x[i] - h).max(opts.lower);
        let hi = (x[i] + h).min(opts.upper);
        xp[i] = hi;
        let fp = eval(f, &xp);
        xp[i] = lo;
        let fm = eval(f, &xp);
        xp[i] = x[i];
        g[i] = if fp.is_finite() && fm.is_finite() && hi > lo {
            (fp - fm) / (hi - lo)
        } else if fp.is_finite() && hi > x[i] {
            (fp - fx) / (hi - x[i])
        } else if fm.is_finite() && x[i] > lo {
            (fx - fm) / (x[i] - lo)
        } else {
            0.0
        };
    }
    g
}

/// Components that sit on a bound with the gradient pushing outward are
/// frozen for the current step.
fn free_mask(x: &[f64], g: &DVector<f64>, opts: &Options) -> Vec<bool> {
    x.iter()
        .zip(g.iter())
        .map(|(&xi, &gi)| !((xi <= opts.lower && gi > 0.0) || (xi >= opts.upper && gi < 0.0)))
        .collect()
}

pub fn minimize<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: &Options) -> Minimum {
    let n = x0.len();
    let mut x: Vec<f64> = x0.iter().map(|v| v.clamp(opts.lower, opts.upper)).collect();
    let mut fx = eval(&f, &x);
    if n == 0 {
        return Minimum { x, f: fx, iterations: 0, converged: true };
    }
    let mut g = gradient(&f, &x, fx, opts);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    let mut iterations = 0;
    let mut small_steps = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let free = free_mask(&x, &g, opts);
        let pg: DVector<f64> = DVector::from_iterator(n, g.iter().zip(&free).map(|(&gi, &fr)| if fr { gi } else { 0.0 }));
        if pg.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        let mut dir = -(&h_inv * &pg);
        for i in 0..n {
            if !free[i] {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&pg) >= 0.0 {
            h_inv = DMatrix::identity(n, n);
            dir = -pg.clone();
        }
        // Cap the step so a single move stays within a sane range on the log scale.
        let max_move = dir.amax();
        if max_move > 5.0 {
            dir *= 5.0 / max_move;
        }
        let slope = dir.dot(&pg);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x
                .iter()
                .zip(dir.iter())
                .map(|(&xi, &di)| (xi + step * di).clamp(opts.lower, opts.upper))
                .collect();
            let fn_ = eval(&f, &xn);
            if fn_ <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if h_inv != DMatrix::identity(n, n) {
                h_inv = DMatrix::identity(n, n);
                continue;
            }
            // No descent possible along the gradient: treat as converged at
            // the resolution of the finite-difference gradient.
            converged = pg.amax() < 1e-4;
            break;
        };
        let gn = gradient(&f, &xn, fnew, opts);
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - rho * &s * y.transpose();
            let right = &i - rho * &y * s.transpose();
            h_inv = &left * &h_inv * &right + rho * &s * s.transpose();
        }
        let df = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        if df.abs() < opts.f_tol * fx.abs().max(1.0) {
            small_steps += 1;
            if small_steps >= 3 {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }
    Minimum { x, f: fx, iterations, converged }
}

//! Bounded scalar minimization by Brent's method (golden section search
//! safeguarded parabolic interpolation).

use crate::error::{FlodeError, Result};

#[derive(Debug, Clone, Copy)]
pub struct BrentOptions {
    /// Absolute tolerance on the minimizer.
    pub xatol: f64,
    pub max_iter: usize,
}

impl Default for BrentOptions {
    fn default() -> Self {
        BrentOptions {
            xatol: 1e-10,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub fx: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimize `f` on `[lo, hi]`. Non-finite function values are treated as `+∞`.
pub fn brent_minimize<F>(mut f: F, lo: f64, hi: f64, opts: BrentOptions) -> Result<Minimum>
where
    F: FnMut(f64) -> f64,
{
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(FlodeError::InvalidArgument(format!(
            "invalid search interval [{lo}, {hi}]"
        )));
    }
    let mut eval = |x: f64| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let golden = 0.5 * (3.0 - 5f64.sqrt());
    let eps = f64::EPSILON.sqrt();
    let tol3 = opts.xatol / 3.0;

    let (mut a, mut b) = (lo, hi);
    let mut v = a + golden * (b - a);
    let mut w = v;
    let mut x = v;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut fx = eval(x);
    let mut fv = fx;
    let mut fw = fx;
    let mut evaluations = 1;
    let mut converged = false;

    for _ in 0..opts.max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = eps * x.abs() + tol3;
        let t2 = 2.0 * tol1;
        if (x - xm).abs() <= t2 - 0.5 * (b - a) {
            converged = true;
            break;
        }

        let mut p = 0.0;
        let mut q = 0.0;
        let mut r = 0.0;
        if e.abs() > tol1 {
            r = (x - w) * (fx - fv);
            q = (x - v) * (fx - fw);
            p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            r = e;
            e = d;
        }

        if p.abs() >= (0.5 * q * r).abs() || p <= q * (a - x) || p >= q * (b - x) {
            // golden section step
            e = if x < xm { b - x } else { a - x };
            d = golden * e;
        } else {
            d = p / q;
            let u = x + d;
            if u - a < t2 || b - u < t2 {
                d = if x < xm { tol1 } else { -tol1 };
            }
        }

        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = eval(u);
        evaluations += 1;

        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }

    Ok(Minimum {
        x,
        fx,
        evaluations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_vertex() {
        for &c in &[0.3, 1.0, 7.25, 19.9] {
            let m = brent_minimize(|x| 3.0 * (x - c) * (x - c) + 1.0, 0.0, 20.0, BrentOptions::default())
                .unwrap();
            assert!(m.converged);
            assert!((m.x - c).abs() < 1e-8, "{} vs {c}", m.x);
        }
    }

    #[test]
    fn boundary_minimum() {
        let m = brent_minimize(|x| x, 1.0, 2.0, BrentOptions::default()).unwrap();
        assert!((m.x - 1.0).abs() < 1e-7);
    }

    #[test]
    fn non_smooth() {
        let m = brent_minimize(|x: f64| (x - 0.3).abs(), -1.0, 1.0, BrentOptions::default()).unwrap();
        assert!((m.x - 0.3).abs() < 1e-7);
    }

    #[test]
    fn nan_is_avoided() {
        let m = brent_minimize(
            |x: f64| if x > 0.8 { f64::NAN } else { (x - 0.5).powi(2) },
            0.0,
            1.0,
            BrentOptions::default(),
        )
        .unwrap();
        assert!((m.x - 0.5).abs() < 1e-7);
    }

    #[test]
    fn rejects_empty_interval() {
        assert!(brent_minimize(|x| x, 1.0, 1.0, BrentOptions::default()).is_err());
    }
}

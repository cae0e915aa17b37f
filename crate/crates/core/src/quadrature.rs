//! Trapezoidal integration on discrete grids.
//!
//! Integrals of the form `∫_0^t` are always taken over the grid points
//! `s <= t`; there is no sub-grid interpolation.

use crate::error::{FlodeError, Result};

fn check(grid: &[f64], values: &[f64]) -> Result<()> {
    if grid.len() != values.len() {
        return Err(FlodeError::Dimension(format!(
            "grid has {} points but {} values were given",
            grid.len(),
            values.len()
        )));
    }
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(FlodeError::Grid("grid must be sorted ascending".into()));
    }
    Ok(())
}

/// Composite trapezoid rule. Returns 0 for fewer than two points.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> Result<f64> {
    check(grid, values)?;
    Ok(trapezoid_unchecked(grid, values))
}

pub(crate) fn trapezoid_unchecked(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Running trapezoid integral: entry `j` is the integral over `grid[0..=j]`.
pub fn cumulative_trapezoid(grid: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    check(grid, values)?;
    let mut out = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    for j in 0..grid.len() {
        if j > 0 {
            acc += 0.5 * (grid[j] - grid[j - 1]) * (values[j - 1] + values[j]);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Trapezoid weights `w` such that `Σ w_j f_j` equals [`trapezoid`] on `grid`.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for j in 1..n {
        let h = 0.5 * (grid[j] - grid[j - 1]);
        w[j - 1] += h;
        w[j] += h;
    }
    w
}

/// Exponentially weighted running integral
/// `I_j = ∫_0^{t_j} exp(-alpha (t_j - s)) f(s) ds` by the trapezoid rule.
///
/// Uses the per-interval recursion
/// `I_j = e^{-alpha h} I_{j-1} + h/2 (e^{-alpha h} f_{j-1} + f_j)`, which never
/// forms `e^{alpha s}` and so cannot overflow.
pub fn decayed_cumulative(grid: &[f64], values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    decayed_cumulative_into(grid, values, alpha, &mut out);
    out
}

pub(crate) fn decayed_cumulative_into(grid: &[f64], values: &[f64], alpha: f64, out: &mut [f64]) {
    debug_assert_eq!(grid.len(), values.len());
    debug_assert_eq!(grid.len(), out.len());
    if grid.is_empty() {
        return;
    }
    out[0] = 0.0;
    for j in 1..grid.len() {
        let h = grid[j] - grid[j - 1];
        let decay = (-alpha * h).exp();
        out[j] = decay * out[j - 1] + 0.5 * h * (decay * values[j - 1] + values[j]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linspace(n: usize) -> Vec<f64> {
        (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn constant_integrand() {
        assert_eq!(trapezoid(&[0.0, 0.5, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn single_point_is_zero() {
        assert_eq!(trapezoid(&[0.3], &[7.0]).unwrap(), 0.0);
        assert_eq!(trapezoid(&[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn sine_against_antiderivative() {
        let exact = 2.0 / std::f64::consts::PI;
        let err = |n: usize| {
            let g = linspace(n);
            let v: Vec<f64> = g.iter().map(|t| (std::f64::consts::PI * t).sin()).collect();
            (trapezoid(&g, &v).unwrap() - exact).abs()
        };
        assert!(err(50) < 2e-3);
        // halving h should quarter the error
        let ratio = err(50) / err(99);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn errors() {
        assert!(matches!(
            trapezoid(&[0.0, 1.0], &[1.0]),
            Err(FlodeError::Dimension(_))
        ));
        assert!(matches!(
            cumulative_trapezoid(&[1.0, 0.0], &[1.0, 1.0]),
            Err(FlodeError::Grid(_))
        ));
    }

    #[test]
    fn cumulative_small_cases() {
        assert_eq!(
            cumulative_trapezoid(&[0.0, 0.5, 1.0], &[1.0, 1.0, 1.0]).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(
            cumulative_trapezoid(&[0.0, 0.2, 1.0], &[0.0; 3]).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn weights_reproduce_rule() {
        let g = [0.0, 0.1, 0.35, 0.9, 1.0];
        let v = [1.0, -2.0, 0.5, 3.0, 4.0];
        let w = trapezoid_weights(&g);
        let s: f64 = w.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        assert!((s - trapezoid(&g, &v).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn decayed_matches_direct_sum() {
        let g = linspace(30);
        let f: Vec<f64> = g.iter().map(|t| (3.0 * t).cos() + t).collect();
        let alpha = 4.0;
        let fast = decayed_cumulative(&g, &f, alpha);
        for j in 0..g.len() {
            let kern: Vec<f64> = (0..=j)
                .map(|l| (-alpha * (g[j] - g[l])).exp() * f[l])
                .collect();
            let direct = trapezoid(&g[..=j], &kern).unwrap();
            assert!((fast[j] - direct).abs() < 1e-13);
        }
    }

    fn sorted_grid() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, 2..40).prop_map(|mut steps| {
            let mut t = 0.0;
            for s in steps.iter_mut() {
                t += *s;
                *s = t;
            }
            steps
        })
    }

    proptest! {
        #[test]
        fn linearity(g in sorted_grid(), a in -5.0f64..5.0, b in -5.0f64..5.0, seed in 0u64..1000) {
            let f: Vec<f64> = g.iter().map(|t| (t * (seed as f64 + 1.0)).sin()).collect();
            let h: Vec<f64> = g.iter().map(|t| t * t - 0.5).collect();
            let comb: Vec<f64> = f.iter().zip(h.iter()).map(|(x, y)| a * x + b * y).collect();
            let lhs = trapezoid(&g, &comb).unwrap();
            let rhs = a * trapezoid(&g, &f).unwrap() + b * trapezoid(&g, &h).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn cumulative_matches_prefix_loop(g in sorted_grid()) {
            let v: Vec<f64> = g.iter().map(|t| (2.0 * t).exp()).collect();
            let cum = cumulative_trapezoid(&g, &v).unwrap();
            for j in 0..g.len() {
                let prefix = trapezoid(&g[..=j], &v[..=j]).unwrap();
                prop_assert!((cum[j] - prefix).abs() <= 1e-12 * (1.0 + prefix.abs()));
            }
            prop_assert_eq!(*cum.last().unwrap(), trapezoid(&g, &v).unwrap());
        }
    }
}

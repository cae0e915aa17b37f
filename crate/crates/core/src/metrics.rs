//! Induced coefficient surfaces, out-of-sample prediction and the error
//! metrics used to compare estimators.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::em::FlodeParams;
use crate::error::{FlodeError, Result};
use crate::quadrature::{decayed_cumulative_into, trapezoid_unchecked};
use crate::splines::{validate_grid, BasisSystem};

/// A bivariate function on `grid × grid`; `values[(j, l)]` is the value at
/// `s = grid[j]`, `t = grid[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub grid: Vec<f64>,
    pub values: DMatrix<f64>,
}

impl Surface {
    pub fn new(grid: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        validate_grid(&grid)?;
        let j = grid.len();
        if values.shape() != (j, j) {
            return Err(FlodeError::Dimension(format!(
                "surface is {:?} on a grid of {j} points",
                values.shape()
            )));
        }
        Ok(Surface { grid, values })
    }

    pub fn zeros(grid: Vec<f64>) -> Self {
        let j = grid.len();
        Surface {
            grid,
            values: DMatrix::zeros(j, j),
        }
    }

    /// Value at grid indices `(s, t)`.
    pub fn at(&self, s: usize, t: usize) -> f64 {
        self.values[(s, t)]
    }
}

/// `e^{-α(t-s)} B(s)` for `s < t` and zero elsewhere.
pub fn flode_surface(alpha: f64, coef_fn: &[f64], grid: &[f64]) -> Result<Surface> {
    validate_grid(grid)?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(FlodeError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if coef_fn.len() != grid.len() {
        return Err(FlodeError::Dimension(format!(
            "coefficient function has {} values on a grid of {}",
            coef_fn.len(),
            grid.len()
        )));
    }
    let j = grid.len();
    let values = DMatrix::from_fn(j, j, |s, t| {
        if s < t {
            (-alpha * (grid[t] - grid[s])).exp() * coef_fn[s]
        } else {
            0.0
        }
    });
    Ok(Surface {
        grid: grid.to_vec(),
        values,
    })
}

fn same_grid(a: &[f64], b: &[f64]) -> Result<()> {
    if a != b {
        return Err(FlodeError::Grid("objects are defined on different grids".into()));
    }
    Ok(())
}

/// Double trapezoid of `(truth - estimate)²` over `s` and `t`.
pub fn surface_ise(estimate: &Surface, truth: &Surface) -> Result<f64> {
    same_grid(&estimate.grid, &truth.grid)?;
    let grid = &truth.grid;
    let diff = &truth.values - &estimate.values;
    let inner: Vec<f64> = (0..grid.len())
        .map(|s| {
            let row: Vec<f64> = diff.row(s).iter().map(|v| v * v).collect();
            trapezoid_unchecked(grid, &row)
        })
        .collect();
    Ok(trapezoid_unchecked(grid, &inner))
}

/// `∫ (truth - estimate) dt`.
pub fn integrated_error(truth: &[f64], estimate: &[f64], grid: &[f64]) -> Result<f64> {
    if truth.len() != grid.len() || estimate.len() != grid.len() {
        return Err(FlodeError::Dimension(format!(
            "curves of length {} and {} on a grid of {}",
            truth.len(),
            estimate.len(),
            grid.len()
        )));
    }
    let diff: Vec<f64> = truth.iter().zip(estimate).map(|(a, b)| a - b).collect();
    Ok(trapezoid_unchecked(grid, &diff))
}

/// `truth - estimate`.
pub fn alpha_error(truth: f64, estimate: f64) -> f64 {
    truth - estimate
}

/// Fixed-effect predictions `y_i(0) e^{-αt} + x*_i b` for new trials (random
/// intercepts set to zero). `forcings[p]` is `N × J` for forcing `p + 1`.
pub fn predict(
    params: &FlodeParams,
    basis: &BasisSystem,
    forcings: &[DMatrix<f64>],
    initial_positions: &[f64],
) -> Result<DMatrix<f64>> {
    let grid = basis.grid();
    let k = basis.n_basis();
    let jn = grid.len();
    let n = initial_positions.len();
    if params.b.len() != k * (forcings.len() + 1) {
        return Err(FlodeError::Dimension(format!(
            "{} coefficients for {} forcings with {k} basis functions",
            params.b.len(),
            forcings.len()
        )));
    }
    for x in forcings {
        if x.shape() != (n, jn) {
            return Err(FlodeError::Grid(format!(
                "forcing matrix is {:?}, expected {n} × {jn} on the training grid",
                x.shape()
            )));
        }
    }
    let curves: Vec<Vec<f64>> = (0..=forcings.len()).map(|p| basis.curve(params.block(p, k))).collect();
    let mut out = DMatrix::zeros(n, jn);
    let mut driver = vec![0.0; jn];
    let mut integral = vec![0.0; jn];
    for i in 0..n {
        driver.copy_from_slice(&curves[0]);
        for (p, x) in forcings.iter().enumerate() {
            for j in 0..jn {
                driver[j] += x[(i, j)] * curves[p + 1][j];
            }
        }
        decayed_cumulative_into(grid, &driver, params.alpha, &mut integral);
        for j in 0..jn {
            out[(i, j)] = initial_positions[i] * (-params.alpha * grid[j]).exp() + integral[j];
        }
    }
    Ok(out)
}

/// `(1/n) Σ_i ∫ |Ŷ_i - Y_i| dt`.
pub fn mape(predictions: &DMatrix<f64>, truths: &DMatrix<f64>, grid: &[f64]) -> Result<f64> {
    if predictions.shape() != truths.shape() || predictions.ncols() != grid.len() {
        return Err(FlodeError::Dimension(format!(
            "predictions {:?}, truths {:?}, grid {}",
            predictions.shape(),
            truths.shape(),
            grid.len()
        )));
    }
    let n = predictions.nrows();
    if n == 0 {
        return Err(FlodeError::InvalidArgument("no curves to score".into()));
    }
    let total: f64 = (0..n)
        .map(|i| {
            let abs: Vec<f64> = (0..grid.len())
                .map(|j| (predictions[(i, j)] - truths[(i, j)]).abs())
                .collect();
            trapezoid_unchecked(grid, &abs)
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{assemble_bundle, FunctionalDataset};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linspace(n: usize) -> Vec<f64> {
        (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
    }

    fn trap(grid: &[f64], f: &[f64]) -> f64 {
        let mut s = 0.0;
        for j in 1..grid.len() {
            s += 0.5 * (grid[j] - grid[j - 1]) * (f[j] + f[j - 1]);
        }
        s
    }

    #[test]
    fn surface_cases() {
        let grid = linspace(11);
        let zero = flode_surface(4.0, &[0.0; 11], &grid).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));

        let b: Vec<f64> = grid.iter().map(|t| 1.0 + t).collect();
        let tiny = flode_surface(1e-12, &b, &grid).unwrap();
        for s in 0..11 {
            for t in 0..11 {
                let expect = if s < t { b[s] } else { 0.0 };
                assert!((tiny.at(s, t) - expect).abs() < 1e-10);
            }
        }

        let ones = vec![1.0; 11];
        let surf = flode_surface(4.0, &ones, &grid).unwrap();
        assert!((surf.at(2, 7) - (-2.0f64).exp()).abs() < 1e-12);
        assert!(((-2.0f64).exp() - 0.1353).abs() < 1e-4);
        assert_eq!(surf.at(5, 5), 0.0);
        assert!(flode_surface(0.0, &ones, &grid).is_err());
        assert!(flode_surface(1.0, &ones[..5], &grid).is_err());
    }

    #[test]
    fn ise_cases() {
        let grid = linspace(21);
        let a = Surface::zeros(grid.clone());
        assert_eq!(surface_ise(&a, &a).unwrap(), 0.0);
        let c = Surface::new(grid.clone(), DMatrix::from_element(21, 21, 0.7)).unwrap();
        assert!((surface_ise(&a, &c).unwrap() - 0.49).abs() < 1e-12);
        let other = Surface::zeros(linspace(5));
        assert!(surface_ise(&a, &other).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Surface::new(grid.clone(), DMatrix::from_fn(21, 21, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let y = Surface::new(grid.clone(), DMatrix::from_fn(21, 21, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let mut outer = Vec::new();
        for s in 0..21 {
            let mut row = Vec::new();
            for t in 0..21 {
                row.push((x.at(s, t) - y.at(s, t)).powi(2));
            }
            outer.push(trap(&grid, &row));
        }
        let oracle = trap(&grid, &outer);
        assert!((surface_ise(&x, &y).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(surface_ise(&x, &y).unwrap(), surface_ise(&y, &x).unwrap());
    }

    #[test]
    fn integrated_error_cases() {
        let grid = linspace(31);
        let truth: Vec<f64> = grid.iter().map(|t| t.sin()).collect();
        assert_eq!(integrated_error(&truth, &truth, &grid).unwrap(), 0.0);
        let shifted: Vec<f64> = truth.iter().map(|v| v + 0.3).collect();
        assert!((integrated_error(&truth, &shifted, &grid).unwrap() + 0.3).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let est: Vec<f64> = (0..31).map(|_| rng.random_range(-1.0..1.0)).collect();
        let diff: Vec<f64> = truth.iter().zip(&est).map(|(a, b)| a - b).collect();
        assert!((integrated_error(&truth, &est, &grid).unwrap() - trap(&grid, &diff)).abs() < 1e-12);
        assert!(integrated_error(&truth, &est[..3], &grid).is_err());
    }

    #[test]
    fn alpha_error_cases() {
        assert_eq!(alpha_error(4.0, 4.0), 0.0);
        assert_eq!(alpha_error(4.0, 3.5), 0.5);
        assert!((alpha_error(0.1, 0.3) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn mape_cases() {
        let grid = linspace(15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = DMatrix::from_fn(4, 15, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(mape(&y, &y, &grid).unwrap(), 0.0);
        let off = y.add_scalar(-0.4);
        assert!((mape(&off, &y, &grid).unwrap() - 0.4).abs() < 1e-12);
        let p = DMatrix::from_fn(4, 15, |_, _| rng.random_range(-1.0..1.0));
        let mut oracle = 0.0;
        for i in 0..4 {
            let row: Vec<f64> = (0..15).map(|j| (p[(i, j)] - y[(i, j)]).abs()).collect();
            oracle += trap(&grid, &row);
        }
        assert!((mape(&p, &y, &grid).unwrap() - oracle / 4.0).abs() < 1e-12);
    }

    fn params(k: usize, p: usize, seed: u64) -> FlodeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FlodeParams {
            alpha: 2.3,
            b: (0..k * (p + 1)).map(|_| rng.random_range(-1.0..1.0)).collect(),
            y0: vec![],
            sigma2: 1.0,
            sigma2_d: 1.0,
            sigma2_b: 1.0,
        }
    }

    #[test]
    fn predict_matches_fixed_effect_fit() {
        let grid = linspace(25);
        let basis = BasisSystem::cubic(&grid, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(3, 25, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(3, 25, |_, _| rng.random_range(-1.0..1.0));
        let ds = FunctionalDataset::from_rows(grid.clone(), y, vec![x.clone()]).unwrap();
        let mut pr = params(8, 1, 2);
        pr.y0 = vec![0.5, -1.0, 2.0];
        let bundle = assemble_bundle(&ds, pr.alpha, &basis, &pr.y0).unwrap();
        let pred = predict(&pr, &basis, &[x], &pr.y0).unwrap();
        for i in 0..3 {
            let fitted = bundle.fitted(i, &pr.b, None);
            for j in 0..25 {
                assert!((pred[(i, j)] - fitted[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_zero_forcing_and_coefficients() {
        let grid = linspace(20);
        let basis = BasisSystem::cubic(&grid, 6).unwrap();
        let mut pr = params(6, 1, 3);
        pr.b = vec![0.0; 12];
        let pred = predict(&pr, &basis, &[DMatrix::zeros(1, 20)], &[1.5]).unwrap();
        for j in 0..20 {
            assert!((pred[(0, j)] - 1.5 * (-pr.alpha * grid[j]).exp()).abs() < 1e-14);
        }
        assert!(predict(&pr, &basis, &[DMatrix::zeros(1, 7)], &[1.5]).is_err());
    }

    proptest! {
        #[test]
        fn surface_is_linear(a in -3.0f64..3.0, c in -3.0f64..3.0, seed in 0u64..500) {
            let grid = linspace(9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b1: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b2: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| a * x + c * y).collect();
            let lhs = flode_surface(1.5, &mix, &grid).unwrap();
            let r1 = flode_surface(1.5, &b1, &grid).unwrap();
            let r2 = flode_surface(1.5, &b2, &grid).unwrap();
            let rhs = r1.values * a + r2.values * c;
            prop_assert!((lhs.values - rhs).amax() < 1e-12);
        }

        #[test]
        fn predict_is_linear(a in -2.0f64..2.0, seed in 0u64..500) {
            let grid = linspace(12);
            let basis = BasisSystem::cubic(&grid, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(2, 12, |_, _| rng.random_range(-1.0..1.0));
            let p1 = params(5, 1, seed);
            let p2 = params(5, 1, seed + 1000);
            let y1 = [0.3, -0.2];
            let y2 = [1.0, 0.5];
            let mut mix = p1.clone();
            mix.b = p1.b.iter().zip(&p2.b).map(|(u, v)| u + a * v).collect();
            let ym = [y1[0] + a * y2[0], y1[1] + a * y2[1]];
            let lhs = predict(&mix, &basis, std::slice::from_ref(&x), &ym).unwrap();
            let rhs = predict(&p1, &basis, std::slice::from_ref(&x), &y1).unwrap()
                + predict(&p2, &basis, std::slice::from_ref(&x), &y2).unwrap() * a;
            prop_assert!((lhs - rhs).amax() < 1e-10);
        }
    }
}

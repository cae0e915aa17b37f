//! Functional datasets and the α-dependent integrated design matrices.
//!
//! For a buffering parameter `alpha` the integrated model is linear in the
//! spline coefficients once every basis function is pushed through the
//! exponential kernel `exp(-alpha (t - s))`:
//!
//! * `x*_ip(t_j)[k] = ∫_0^{t_j} exp(-alpha (t_j - s)) x_ip(s) θ_k(s) ds`
//! * `D*(t_j)[k]    = ∫_0^{t_j} exp(-alpha (t_j - s)) θ_k(s) ds`
//! * `y0*_i(t_j)    = y_i(0) exp(-alpha t_j)`
//!
//! Block `p = 0` of `x*_i` uses the constant forcing `x_i0 ≡ 1` and carries the
//! population intercept.

use nalgebra::DMatrix;

use crate::error::{FlodeError, Result};
use crate::quadrature::decayed_cumulative_into;
use crate::splines::{validate_grid, BasisSystem};

/// `N` trials observed on one shared grid of `J` points.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    grid: Vec<f64>,
    responses: DMatrix<f64>,
    forcings: Vec<DMatrix<f64>>,
    trial_ids: Vec<String>,
}

impl FunctionalDataset {
    pub fn new(
        grid: Vec<f64>,
        responses: DMatrix<f64>,
        forcings: Vec<DMatrix<f64>>,
        trial_ids: Vec<String>,
    ) -> Result<Self> {
        validate_grid(&grid)?;
        let j = grid.len();
        if j < 3 {
            return Err(FlodeError::Grid(format!("need at least 3 grid points, got {j}")));
        }
        let n = responses.nrows();
        if n == 0 {
            return Err(FlodeError::InvalidArgument("dataset has no trials".into()));
        }
        if responses.ncols() != j {
            return Err(FlodeError::Dimension(format!(
                "responses have {} columns for a grid of {j}",
                responses.ncols()
            )));
        }
        for (p, f) in forcings.iter().enumerate() {
            if f.shape() != (n, j) {
                return Err(FlodeError::Dimension(format!(
                    "forcing {} has shape {:?}, expected ({n}, {j})",
                    p + 1,
                    f.shape()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(FlodeError::NonFinite(format!("forcing {}", p + 1)));
            }
        }
        if responses.iter().any(|v| !v.is_finite()) {
            return Err(FlodeError::NonFinite("responses".into()));
        }
        if trial_ids.len() != n {
            return Err(FlodeError::Dimension(format!(
                "{} trial ids for {n} trials",
                trial_ids.len()
            )));
        }
        Ok(FunctionalDataset {
            grid,
            responses,
            forcings,
            trial_ids,
        })
    }

    /// Dataset with trials labelled `0..N`.
    pub fn from_rows(grid: Vec<f64>, responses: DMatrix<f64>, forcings: Vec<DMatrix<f64>>) -> Result<Self> {
        let ids = (0..responses.nrows()).map(|i| i.to_string()).collect();
        Self::new(grid, responses, forcings, ids)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n_trials(&self) -> usize {
        self.responses.nrows()
    }

    pub fn n_grid(&self) -> usize {
        self.grid.len()
    }

    /// Number of observed forcing functions `P` (excluding the intercept).
    pub fn n_forcings(&self) -> usize {
        self.forcings.len()
    }

    pub fn responses(&self) -> &DMatrix<f64> {
        &self.responses
    }

    pub fn forcings(&self) -> &[DMatrix<f64>] {
        &self.forcings
    }

    pub fn trial_ids(&self) -> &[String] {
        &self.trial_ids
    }

    pub fn response(&self, i: usize) -> Vec<f64> {
        self.responses.row(i).iter().copied().collect()
    }

    /// Forcing `p` of trial `i`, with `p` counted from 1.
    pub fn forcing(&self, p: usize, i: usize) -> Vec<f64> {
        self.forcings[p - 1].row(i).iter().copied().collect()
    }

    /// Observed initial positions `Y_i(t_1)`.
    pub fn initial_positions(&self) -> Vec<f64> {
        self.responses.column(0).iter().copied().collect()
    }

    /// New dataset made of the listed trials, repeats allowed.
    pub fn select(&self, indices: &[usize]) -> FunctionalDataset {
        let pick = |m: &DMatrix<f64>| {
            DMatrix::from_fn(indices.len(), m.ncols(), |r, c| m[(indices[r], c)])
        };
        FunctionalDataset {
            grid: self.grid.clone(),
            responses: pick(&self.responses),
            forcings: self.forcings.iter().map(pick).collect(),
            trial_ids: indices.iter().map(|&i| self.trial_ids[i].clone()).collect(),
        }
    }
}

/// Integrated design objects for one value of the buffering parameter.
#[derive(Debug, Clone)]
pub struct DesignBundle {
    pub alpha: f64,
    /// Per trial, `J × K(P+1)` with column blocks `p = 0..=P`.
    pub xstar: Vec<DMatrix<f64>>,
    /// Shared `J × K`.
    pub dstar: DMatrix<f64>,
    pub y0star: Vec<Vec<f64>>,
    /// `exp(-alpha t_j)`.
    pub decay: Vec<f64>,
    /// Per trial `x*_iᵀ x*_i`.
    pub gram: Vec<DMatrix<f64>>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(FlodeError::InvalidArgument(format!(
            "buffering parameter must be finite and non-negative, got {alpha}"
        )));
    }
    Ok(())
}

/// `J × K` block `∫_0^t exp(-alpha (t - s)) x(s) θ_k(s) ds`.
pub fn build_xstar_block(forcing: &[f64], alpha: f64, basis: &BasisSystem) -> Result<DMatrix<f64>> {
    check_alpha(alpha)?;
    let grid = basis.grid();
    if forcing.len() != grid.len() {
        return Err(FlodeError::Dimension(format!(
            "forcing has {} values for a grid of {}",
            forcing.len(),
            grid.len()
        )));
    }
    if forcing.iter().any(|v| !v.is_finite()) {
        return Err(FlodeError::NonFinite("forcing values".into()));
    }
    let mut out = DMatrix::zeros(grid.len(), basis.n_basis());
    write_block(forcing, alpha, basis, &mut out, 0);
    Ok(out)
}

fn write_block(forcing: &[f64], alpha: f64, basis: &BasisSystem, out: &mut DMatrix<f64>, col0: usize) {
    let grid = basis.grid();
    let theta = basis.matrix();
    let mut integrand = vec![0.0; grid.len()];
    for k in 0..basis.n_basis() {
        for (j, v) in integrand.iter_mut().enumerate() {
            *v = forcing[j] * theta[(j, k)];
        }
        let col = out.column_mut(col0 + k);
        decayed_cumulative_into(grid, &integrand, alpha, col.data.into_slice_mut());
    }
}

/// `D*(t, alpha)`: the x* block for the constant forcing.
pub fn build_dstar(alpha: f64, basis: &BasisSystem) -> Result<DMatrix<f64>> {
    let ones = vec![1.0; basis.grid().len()];
    build_xstar_block(&ones, alpha, basis)
}

/// `y0 exp(-alpha t_j)` on the grid.
pub fn build_y0star(y0: f64, alpha: f64, grid: &[f64]) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if !y0.is_finite() {
        return Err(FlodeError::NonFinite("initial position".into()));
    }
    Ok(grid.iter().map(|t| y0 * (-alpha * t).exp()).collect())
}

/// Full `J × K(P+1)` design for one trial.
pub(crate) fn trial_xstar(dataset: &FunctionalDataset, i: usize, alpha: f64, basis: &BasisSystem) -> DMatrix<f64> {
    let k = basis.n_basis();
    let q = dataset.n_forcings() + 1;
    let mut x = DMatrix::zeros(dataset.n_grid(), k * q);
    let ones = vec![1.0; dataset.n_grid()];
    write_block(&ones, alpha, basis, &mut x, 0);
    for p in 1..q {
        let f = dataset.forcing(p, i);
        write_block(&f, alpha, basis, &mut x, p * k);
    }
    x
}

pub(crate) fn check_compatible(dataset: &FunctionalDataset, basis: &BasisSystem) -> Result<()> {
    if dataset.grid() != basis.grid() {
        return Err(FlodeError::Grid("dataset grid differs from basis grid".into()));
    }
    Ok(())
}

/// Build every design object for `alpha`, using `y0` as the initial positions.
pub fn assemble_bundle(
    dataset: &FunctionalDataset,
    alpha: f64,
    basis: &BasisSystem,
    y0: &[f64],
) -> Result<DesignBundle> {
    check_alpha(alpha)?;
    check_compatible(dataset, basis)?;
    if y0.len() != dataset.n_trials() {
        return Err(FlodeError::Dimension(format!(
            "{} initial positions for {} trials",
            y0.len(),
            dataset.n_trials()
        )));
    }
    let grid = dataset.grid();
    let xstar: Vec<DMatrix<f64>> = (0..dataset.n_trials())
        .map(|i| trial_xstar(dataset, i, alpha, basis))
        .collect();
    let gram = xstar.iter().map(|x| x.tr_mul(x)).collect();
    let dstar = build_dstar(alpha, basis)?;
    let y0star = y0
        .iter()
        .map(|&y| build_y0star(y, alpha, grid))
        .collect::<Result<Vec<_>>>()?;
    let decay = grid.iter().map(|t| (-alpha * t).exp()).collect();
    Ok(DesignBundle {
        alpha,
        xstar,
        dstar,
        y0star,
        decay,
        gram,
    })
}

impl DesignBundle {
    pub fn n_trials(&self) -> usize {
        self.xstar.len()
    }

    /// Bundle for the listed trials (repeats allowed), matching
    /// [`FunctionalDataset::select`].
    pub fn select(&self, indices: &[usize]) -> DesignBundle {
        DesignBundle {
            alpha: self.alpha,
            xstar: indices.iter().map(|&i| self.xstar[i].clone()).collect(),
            dstar: self.dstar.clone(),
            y0star: indices.iter().map(|&i| self.y0star[i].clone()).collect(),
            decay: self.decay.clone(),
            gram: indices.iter().map(|&i| self.gram[i].clone()).collect(),
        }
    }

    /// `y0*_i + x*_i b + D* d`.
    pub fn fitted(&self, i: usize, b: &[f64], d: Option<&[f64]>) -> Vec<f64> {
        let x = &self.xstar[i];
        let mut out = self.y0star[i].clone();
        for (j, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for c in 0..x.ncols() {
                s += x[(j, c)] * b[c];
            }
            if let Some(d) = d {
                for c in 0..self.dstar.ncols() {
                    s += self.dstar[(j, c)] * d[c];
                }
            }
            *o += s;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{cumulative_trapezoid, trapezoid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linspace(n: usize) -> Vec<f64> {
        (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
    }

    /// Definition-level O(J²K) evaluation.
    fn naive_block(forcing: &[f64], alpha: f64, basis: &BasisSystem) -> DMatrix<f64> {
        let g = basis.grid();
        let th = basis.matrix();
        DMatrix::from_fn(g.len(), basis.n_basis(), |j, k| {
            let vals: Vec<f64> = (0..=j)
                .map(|l| (-alpha * (g[j] - g[l])).exp() * forcing[l] * th[(l, k)])
                .collect();
            trapezoid(&g[..=j], &vals).unwrap()
        })
    }

    #[test]
    fn zero_forcing_gives_zero_block() {
        let basis = BasisSystem::cubic(&linspace(20), 8).unwrap();
        let x = build_xstar_block(&[0.0; 20], 3.0, &basis).unwrap();
        assert_eq!(x.amax(), 0.0);
    }

    #[test]
    fn constant_basis_closed_form() {
        // the columns of any basis sum to θ ≡ 1, so row sums of the block are
        // the K = 1 case
        let grid = linspace(50);
        let basis = BasisSystem::new(&grid, 3, 0, 1.0).unwrap();
        let x = build_xstar_block(&vec![1.0; 50], 2.0, &basis).unwrap();
        for (j, t) in grid.iter().enumerate() {
            let exact = (1.0 - (-2.0 * t).exp()) / 2.0;
            assert!((x.row(j).sum() - exact).abs() <= 1e-3);
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let grid = linspace(50);
        let basis = BasisSystem::cubic(&grid, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let forcing: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fast = build_xstar_block(&forcing, 4.0, &basis).unwrap();
        let slow = naive_block(&forcing, 4.0, &basis);
        assert!((fast - slow).amax() < 1e-10);
    }

    #[test]
    fn dstar_definitions() {
        let grid = linspace(30);
        let basis = BasisSystem::cubic(&grid, 10).unwrap();
        let d = build_dstar(2.5, &basis).unwrap();
        assert_eq!(d, build_xstar_block(&vec![1.0; 30], 2.5, &basis).unwrap());

        let d0 = build_dstar(0.0, &basis).unwrap();
        for k in 0..10 {
            let col: Vec<f64> = basis.matrix().column(k).iter().copied().collect();
            let cum = cumulative_trapezoid(&grid, &col).unwrap();
            for j in 0..30 {
                assert!((d0[(j, k)] - cum[j]).abs() < 1e-14);
            }
        }

        let big = build_dstar(1e4, &basis).unwrap();
        let slow = naive_block(&vec![1.0; 30], 1e4, &basis);
        assert!((&big - &slow).amax() < 1e-10);
        let small = build_dstar(1.0, &basis).unwrap();
        for j in 1..30 {
            assert!(big.row(j).amax() < small.row(j).amax());
        }
        // trapezoid keeps weight h/2 on the endpoint however fast the decay
        assert!(big.row(29).amax() <= 0.5 / 29.0 + 1e-12);
    }

    #[test]
    fn y0star_cases() {
        let g = [0.0, 0.5, 1.0];
        let v = build_y0star(2.0, 1.0, &g).unwrap();
        assert_eq!(v[0], 2.0);
        assert!((v[2] - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(build_y0star(3.0, 0.0, &g).unwrap(), vec![3.0; 3]);
        assert_eq!(build_y0star(0.0, 5.0, &g).unwrap(), vec![0.0; 3]);
        assert!(build_y0star(f64::NAN, 1.0, &g).is_err());
    }

    fn toy_dataset(n: usize, j: usize, p: usize, seed: u64) -> FunctionalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(n, j, |_, _| rng.random_range(-1.0..1.0));
        let f = (0..p)
            .map(|_| DMatrix::from_fn(n, j, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        FunctionalDataset::from_rows(linspace(j), y, f).unwrap()
    }

    #[test]
    fn bundle_shapes() {
        let ds = toy_dataset(20, 50, 1, 3);
        let basis = BasisSystem::cubic(ds.grid(), 20).unwrap();
        let b = assemble_bundle(&ds, 4.0, &basis, &ds.initial_positions()).unwrap();
        assert_eq!(b.xstar.len(), 20);
        assert_eq!(b.xstar[0].shape(), (50, 40));
        assert_eq!(b.dstar.shape(), (50, 20));
        assert_eq!(b.y0star.len(), 20);
        for i in 0..20 {
            assert_eq!(b.xstar[i].row(0).amax(), 0.0);
            assert_eq!(b.y0star[i][0], ds.responses()[(i, 0)]);
            // intercept block equals D*
            assert_eq!(b.xstar[i].columns(0, 20).into_owned(), b.dstar);
        }
        assert_eq!(b.dstar.row(0).amax(), 0.0);
    }

    #[test]
    fn identical_trials_identical_designs() {
        let ds = toy_dataset(1, 20, 2, 5).select(&[0, 0, 0]);
        let basis = BasisSystem::cubic(ds.grid(), 8).unwrap();
        let b = assemble_bundle(&ds, 1.5, &basis, &[0.0; 3]).unwrap();
        assert_eq!(b.xstar[0], b.xstar[1]);
        assert_eq!(b.xstar[1], b.xstar[2]);
    }

    #[test]
    fn bundle_rejects_mismatch() {
        let ds = toy_dataset(3, 20, 1, 1);
        let basis = BasisSystem::cubic(ds.grid(), 8).unwrap();
        assert!(assemble_bundle(&ds, 1.0, &basis, &[0.0; 2]).is_err());
        assert!(assemble_bundle(&ds, -1.0, &basis, &[0.0; 3]).is_err());
        let other = BasisSystem::cubic(&linspace(21), 8).unwrap();
        assert!(assemble_bundle(&ds, 1.0, &other, &[0.0; 3]).is_err());
        assert!(build_xstar_block(&[1.0; 19], 1.0, &basis).is_err());
        let mut bad = vec![1.0; 20];
        bad[3] = f64::INFINITY;
        assert!(build_xstar_block(&bad, 1.0, &basis).is_err());
    }

    #[test]
    fn causality_exact() {
        let grid = linspace(25);
        let basis = BasisSystem::cubic(&grid, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = build_xstar_block(&f, 3.0, &basis).unwrap();
        for cut in 0..24 {
            let mut g = f.clone();
            for v in g.iter_mut().skip(cut + 1) {
                *v += 10.0;
            }
            let pert = build_xstar_block(&g, 3.0, &basis).unwrap();
            for j in 0..=cut {
                assert_eq!(base.row(j), pert.row(j));
            }
        }
    }

    #[test]
    fn monotone_in_alpha_for_nonnegative_forcing() {
        let grid = linspace(30);
        let basis = BasisSystem::cubic(&grid, 10).unwrap();
        let f: Vec<f64> = grid.iter().map(|t| 1.0 + t.sin()).collect();
        let alphas = [0.0, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 40.0];
        let blocks: Vec<_> = alphas
            .iter()
            .map(|&a| build_xstar_block(&f, a, &basis).unwrap())
            .collect();
        for w in blocks.windows(2) {
            assert!(w[1].iter().zip(w[0].iter()).all(|(hi, lo)| *hi <= *lo + 1e-15));
        }
    }
}

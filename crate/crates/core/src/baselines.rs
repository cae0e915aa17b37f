//! Penalized least-squares comparators: a functional historical model with a
//! free lower-triangular coefficient surface, and a functional concurrent
//! model. Neither carries trial-level random effects.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::FunctionalDataset;
use crate::error::{FlodeError, Result};
use crate::metrics::Surface;
use crate::quadrature::{cumulative_trapezoid, trapezoid_unchecked};
use crate::splines::{second_difference, BasisSystem, DEFAULT_LAMBDA};

/// Candidate penalty weights searched by cross-validation.
pub const RIDGE_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2];
/// Marginal basis size of the historical surface.
pub const HIST_MARGINAL_SIZE: usize = 15;
pub const RIDGE_CV_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistFit {
    pub grid: Vec<f64>,
    /// One surface per forcing, zero for `s > t`.
    pub surfaces: Vec<Surface>,
    pub intercept_fn: Vec<f64>,
    pub ridge_weight: f64,
}

impl HistFit {
    /// Surface of the first forcing.
    pub fn surface(&self) -> &Surface {
        &self.surfaces[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcFit {
    pub grid: Vec<f64>,
    pub coef_fns: Vec<Vec<f64>>,
    pub intercept_fn: Vec<f64>,
    pub ridge_weight: f64,
}

/// Cross-validated penalty choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeSelection {
    pub ridge_weight: f64,
    /// `(weight, CV MAPE)` for every candidate.
    pub scores: Vec<(f64, f64)>,
}

/// Per-trial design matrices of a linear functional model plus its
/// unscaled roughness penalty.
#[derive(Debug, Clone)]
pub struct LinearDesign {
    grid: Vec<f64>,
    rows: Vec<DMatrix<f64>>,
    responses: DMatrix<f64>,
    penalty: DMatrix<f64>,
}

struct Normal {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl LinearDesign {
    pub fn n_coefs(&self) -> usize {
        self.penalty.nrows()
    }

    pub fn trial_design(&self, i: usize) -> &DMatrix<f64> {
        &self.rows[i]
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    fn normal(&self, trials: impl Iterator<Item = usize>) -> Normal {
        let q = self.n_coefs();
        let mut gram = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        for i in trials {
            let z = &self.rows[i];
            let y = self.responses.row(i).transpose();
            gram += z.tr_mul(z);
            rhs += z.tr_mul(&y);
        }
        Normal { gram, rhs }
    }

    fn solve(&self, normal: &Normal, ridge: f64) -> Result<DVector<f64>> {
        if !(ridge.is_finite() && ridge >= 0.0) {
            return Err(FlodeError::InvalidArgument(format!(
                "penalty weight must be finite and non-negative, got {ridge}"
            )));
        }
        let a = &normal.gram + &self.penalty * ridge;
        let chol = a
            .cholesky()
            .ok_or_else(|| FlodeError::numerical("penalized least squares", "singular normal equations"))?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
        if lo * lo < 1e-14 * hi * hi {
            return Err(FlodeError::numerical(
                "penalized least squares",
                "normal equations are numerically singular",
            ));
        }
        let x = chol.solve(&normal.rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlodeError::numerical("penalized least squares", "non-finite solution"));
        }
        Ok(x)
    }

    /// Coefficients fitted on every trial.
    pub fn fit(&self, ridge: f64) -> Result<DVector<f64>> {
        self.solve(&self.normal(0..self.rows.len()), ridge)
    }

    /// Mean over held-out trials of `∫ |ŷ - y| dt`, for each candidate weight.
    pub fn cv_mape(&self, ridges: &[f64], folds: &[Vec<usize>]) -> Result<Vec<f64>> {
        let n = self.rows.len();
        let fold_normals: Vec<Normal> = folds.iter().map(|f| self.normal(f.iter().copied())).collect();
        let q = self.n_coefs();
        let mut total = Normal {
            gram: DMatrix::zeros(q, q),
            rhs: DVector::zeros(q),
        };
        for f in &fold_normals {
            total.gram += &f.gram;
            total.rhs += &f.rhs;
        }
        let mut out = Vec::with_capacity(ridges.len());
        for &ridge in ridges {
            let mut err = 0.0;
            for (fold, held) in folds.iter().zip(&fold_normals) {
                let train = Normal {
                    gram: &total.gram - &held.gram,
                    rhs: &total.rhs - &held.rhs,
                };
                let coef = self.solve(&train, ridge)?;
                for &i in fold {
                    let pred = &self.rows[i] * &coef;
                    let abs: Vec<f64> = (0..self.grid.len())
                        .map(|j| (pred[j] - self.responses[(i, j)]).abs())
                        .collect();
                    err += trapezoid_unchecked(&self.grid, &abs);
                }
            }
            out.push(err / n as f64);
        }
        Ok(out)
    }

    pub fn select_ridge(&self, ridges: &[f64], folds: &[Vec<usize>]) -> Result<RidgeSelection> {
        let cv = self.cv_mape(ridges, folds)?;
        let (best, _) = cv
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        Ok(RidgeSelection {
            ridge_weight: ridges[best],
            scores: ridges.iter().copied().zip(cv).collect(),
        })
    }
}

/// `Δ2ᵀΔ2 + λ I` for a marginal of size `m`.
fn marginal_penalty(m: usize) -> DMatrix<f64> {
    let d = second_difference(m);
    d.tr_mul(&d) + DMatrix::identity(m, m) * DEFAULT_LAMBDA
}

fn place(target: &mut DMatrix<f64>, block: &DMatrix<f64>, at: usize) {
    target.view_mut((at, at), block.shape()).copy_from(block);
}

/// Columns `[Θ | φ_c(t) ∫_0^t φ_a(s) x_p(s) ds  for p, a, c]`, the `(a, c)`
/// block ordered with the `s` margin outer.
pub fn historical_trial_design(forcings: &[Vec<f64>], marginal: &BasisSystem) -> Result<DMatrix<f64>> {
    let grid = marginal.grid();
    let theta = marginal.matrix();
    let (jn, m) = theta.shape();
    let mut z = DMatrix::zeros(jn, m + forcings.len() * m * m);
    z.view_mut((0, 0), (jn, m)).copy_from(theta);
    for (p, x) in forcings.iter().enumerate() {
        for a in 0..m {
            let weighted: Vec<f64> = (0..jn).map(|j| theta[(j, a)] * x[j]).collect();
            let w = cumulative_trapezoid(grid, &weighted)?;
            for c in 0..m {
                let col = m + p * m * m + a * m + c;
                for j in 0..jn {
                    z[(j, col)] = theta[(j, c)] * w[j];
                }
            }
        }
    }
    Ok(z)
}

fn trial_forcings(dataset: &FunctionalDataset, i: usize) -> Vec<Vec<f64>> {
    (1..=dataset.n_forcings()).map(|p| dataset.forcing(p, i)).collect()
}

pub fn historical_design(dataset: &FunctionalDataset, marginal_size: usize) -> Result<(LinearDesign, BasisSystem)> {
    let marginal = BasisSystem::cubic(dataset.grid(), marginal_size)?;
    let m = marginal_size;
    let pm = marginal_penalty(m);
    let surface_pen = pm.kronecker(&DMatrix::identity(m, m)) + DMatrix::identity(m, m).kronecker(&pm)
        - DMatrix::identity(m * m, m * m) * DEFAULT_LAMBDA;
    let q = m + dataset.n_forcings() * m * m;
    let mut penalty = DMatrix::zeros(q, q);
    place(&mut penalty, &pm, 0);
    for p in 0..dataset.n_forcings() {
        place(&mut penalty, &surface_pen, m + p * m * m);
    }
    let rows = (0..dataset.n_trials())
        .map(|i| historical_trial_design(&trial_forcings(dataset, i), &marginal))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        LinearDesign {
            grid: dataset.grid().to_vec(),
            rows,
            responses: dataset.responses().clone(),
            penalty,
        },
        marginal,
    ))
}

fn hist_from_coefs(coef: &DVector<f64>, marginal: &BasisSystem, n_forcings: usize, ridge: f64) -> Result<HistFit> {
    let grid = marginal.grid().to_vec();
    let theta = marginal.matrix();
    let m = marginal.n_basis();
    let intercept_fn = marginal.curve(&coef.as_slice()[..m]);
    let surfaces = (0..n_forcings)
        .map(|p| {
            let c = DMatrix::from_fn(m, m, |a, cc| coef[m + p * m * m + a * m + cc]);
            let mut values = theta * c * theta.transpose();
            for s in 0..grid.len() {
                for t in 0..s {
                    values[(s, t)] = 0.0;
                }
            }
            Surface::new(grid.clone(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HistFit {
        grid,
        surfaces,
        intercept_fn,
        ridge_weight: ridge,
    })
}

pub fn fit_historical(dataset: &FunctionalDataset, marginal_size: usize, ridge_weight: f64) -> Result<HistFit> {
    let (design, marginal) = historical_design(dataset, marginal_size)?;
    let coef = design.fit(ridge_weight)?;
    hist_from_coefs(&coef, &marginal, dataset.n_forcings(), ridge_weight)
}

/// Historical fit with the penalty weight chosen from [`RIDGE_GRID`] by
/// cross-validated MAPE over `folds`.
pub fn fit_historical_cv(
    dataset: &FunctionalDataset,
    marginal_size: usize,
    folds: &[Vec<usize>],
) -> Result<(HistFit, RidgeSelection)> {
    let (design, marginal) = historical_design(dataset, marginal_size)?;
    let sel = design.select_ridge(&RIDGE_GRID, folds)?;
    let coef = design.fit(sel.ridge_weight)?;
    Ok((hist_from_coefs(&coef, &marginal, dataset.n_forcings(), sel.ridge_weight)?, sel))
}

fn check_forcings(grid: &[f64], expected: usize, forcings: &[DMatrix<f64>]) -> Result<usize> {
    if forcings.len() != expected {
        return Err(FlodeError::Dimension(format!(
            "fit has {expected} forcings, {} supplied",
            forcings.len()
        )));
    }
    let n = forcings.first().map_or(0, |x| x.nrows());
    if forcings.iter().any(|x| x.shape() != (n, grid.len())) {
        return Err(FlodeError::Grid("forcing matrices must be N × J on the fit grid".into()));
    }
    Ok(n)
}

/// `β0(t) + Σ_p ∫_0^t β_p(s, t) x_p(s) ds`, trapezoid over grid points
/// `s ≤ t`. For `P = 0` pass `n_trials` through a zero-width forcing list
/// via [`predict_historical_n`].
pub fn predict_historical(fit: &HistFit, forcings: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let n = check_forcings(&fit.grid, fit.surfaces.len(), forcings)?;
    predict_historical_n(fit, forcings, n)
}

pub fn predict_historical_n(fit: &HistFit, forcings: &[DMatrix<f64>], n: usize) -> Result<DMatrix<f64>> {
    if !forcings.is_empty() {
        check_forcings(&fit.grid, fit.surfaces.len(), forcings)?;
    }
    let grid = &fit.grid;
    let jn = grid.len();
    let mut out = DMatrix::from_fn(n, jn, |_, j| fit.intercept_fn[j]);
    let mut vals = vec![0.0; jn];
    for (surface, x) in fit.surfaces.iter().zip(forcings) {
        for i in 0..n {
            for t in 1..jn {
                for s in 0..=t {
                    vals[s] = surface.values[(s, t)] * x[(i, s)];
                }
                out[(i, t)] += trapezoid_unchecked(&grid[..=t], &vals[..=t]);
            }
        }
    }
    Ok(out)
}

pub fn concurrent_trial_design(forcings: &[Vec<f64>], basis: &BasisSystem) -> DMatrix<f64> {
    let theta = basis.matrix();
    let (jn, k) = theta.shape();
    let mut z = DMatrix::zeros(jn, k * (forcings.len() + 1));
    z.view_mut((0, 0), (jn, k)).copy_from(theta);
    for (p, x) in forcings.iter().enumerate() {
        for c in 0..k {
            for j in 0..jn {
                z[(j, (p + 1) * k + c)] = theta[(j, c)] * x[j];
            }
        }
    }
    z
}

pub fn concurrent_design(dataset: &FunctionalDataset, k: usize) -> Result<(LinearDesign, BasisSystem)> {
    let basis = BasisSystem::cubic(dataset.grid(), k)?;
    let pm = marginal_penalty(k);
    let blocks = dataset.n_forcings() + 1;
    let mut penalty = DMatrix::zeros(k * blocks, k * blocks);
    for b in 0..blocks {
        place(&mut penalty, &pm, b * k);
    }
    let rows = (0..dataset.n_trials())
        .map(|i| concurrent_trial_design(&trial_forcings(dataset, i), &basis))
        .collect();
    Ok((
        LinearDesign {
            grid: dataset.grid().to_vec(),
            rows,
            responses: dataset.responses().clone(),
            penalty,
        },
        basis,
    ))
}

fn conc_from_coefs(coef: &DVector<f64>, basis: &BasisSystem, n_forcings: usize, ridge: f64) -> ConcFit {
    let k = basis.n_basis();
    let curve = |b: usize| basis.curve(&coef.as_slice()[b * k..(b + 1) * k]);
    ConcFit {
        grid: basis.grid().to_vec(),
        intercept_fn: curve(0),
        coef_fns: (1..=n_forcings).map(curve).collect(),
        ridge_weight: ridge,
    }
}

pub fn fit_concurrent(dataset: &FunctionalDataset, k: usize, ridge_weight: f64) -> Result<ConcFit> {
    let (design, basis) = concurrent_design(dataset, k)?;
    let coef = design.fit(ridge_weight)?;
    Ok(conc_from_coefs(&coef, &basis, dataset.n_forcings(), ridge_weight))
}

pub fn fit_concurrent_cv(dataset: &FunctionalDataset, k: usize, folds: &[Vec<usize>]) -> Result<(ConcFit, RidgeSelection)> {
    let (design, basis) = concurrent_design(dataset, k)?;
    let sel = design.select_ridge(&RIDGE_GRID, folds)?;
    let coef = design.fit(sel.ridge_weight)?;
    Ok((conc_from_coefs(&coef, &basis, dataset.n_forcings(), sel.ridge_weight), sel))
}

/// `β0(t) + Σ_p β_p(t) x_p(t)`.
pub fn predict_concurrent(fit: &ConcFit, forcings: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let n = check_forcings(&fit.grid, fit.coef_fns.len(), forcings)?;
    let jn = fit.grid.len();
    let mut out = DMatrix::from_fn(n, jn, |_, j| fit.intercept_fn[j]);
    for (beta, x) in fit.coef_fns.iter().zip(forcings) {
        for i in 0..n {
            for j in 0..jn {
                out[(i, j)] += beta[j] * x[(i, j)];
            }
        }
    }
    Ok(out)
}

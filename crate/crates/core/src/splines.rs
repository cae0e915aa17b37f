//! Clamped B-spline bases and the blended smoothness penalty shared by the
//! fixed-effect and random-effect spline coefficients.

use nalgebra::DMatrix;

use crate::error::{FlodeError, Result};

/// Default shrinkage weight in `P = λ I + (1 - λ) Δ2ᵀΔ2`.
pub const DEFAULT_LAMBDA: f64 = 0.001;

/// A clamped B-spline basis evaluated on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    grid: Vec<f64>,
    knots: Vec<f64>,
    degree: usize,
    n_basis: usize,
    matrix: DMatrix<f64>,
}

impl BSplineBasis {
    /// Build `n_basis` degree-`degree` B-splines with equally spaced interior
    /// knots and coincident boundary knots at the ends of `grid`.
    pub fn new(grid: &[f64], n_basis: usize, degree: usize) -> Result<Self> {
        validate_grid(grid)?;
        if n_basis < degree + 2 {
            return Err(FlodeError::InvalidArgument(format!(
                "basis dimension {n_basis} is too small for degree {degree} (need at least {})",
                degree + 2
            )));
        }
        if n_basis > grid.len() {
            return Err(FlodeError::InvalidArgument(format!(
                "basis dimension {n_basis} exceeds grid length {}",
                grid.len()
            )));
        }
        let lo = grid[0];
        let hi = grid[grid.len() - 1];
        let knots = clamped_knots(lo, hi, n_basis, degree);
        let mut basis = BSplineBasis {
            grid: grid.to_vec(),
            knots,
            degree,
            n_basis,
            matrix: DMatrix::zeros(0, 0),
        };
        basis.matrix = basis.evaluate_matrix(grid);
        Ok(basis)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    /// `J × K` matrix of basis evaluations on the grid.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// All `K` basis values at `x`. Points outside the knot range are clamped.
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let mut row = vec![0.0; self.n_basis];
        let (first, vals) = self.nonzero(x);
        row[first..first + vals.len()].copy_from_slice(&vals);
        row
    }

    pub fn evaluate_matrix(&self, points: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(points.len(), self.n_basis);
        for (i, &x) in points.iter().enumerate() {
            let (first, vals) = self.nonzero(x);
            for (r, v) in vals.into_iter().enumerate() {
                m[(i, first + r)] = v;
            }
        }
        m
    }

    /// Index of the first nonzero function and the `degree + 1` values
    /// starting there (triangular Cox–de Boor scheme).
    fn nonzero(&self, x: f64) -> (usize, Vec<f64>) {
        let p = self.degree;
        let u = &self.knots;
        let lo = u[p];
        let hi = u[self.n_basis];
        let x = x.clamp(lo, hi);
        let span = self.find_span(x);

        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (span - p, n)
    }

    fn find_span(&self, x: f64) -> usize {
        let p = self.degree;
        let last = self.n_basis - 1;
        let u = &self.knots;
        if x >= u[last + 1] {
            return last;
        }
        // largest span in [p, last] with u[span] <= x
        let mut lo = p;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if u[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

fn clamped_knots(lo: f64, hi: f64, n_basis: usize, degree: usize) -> Vec<f64> {
    let n_interior = n_basis - degree - 1;
    let mut knots = Vec::with_capacity(n_basis + degree + 1);
    knots.extend(std::iter::repeat_n(lo, degree + 1));
    for i in 1..=n_interior {
        knots.push(lo + (hi - lo) * i as f64 / (n_interior + 1) as f64);
    }
    knots.extend(std::iter::repeat_n(hi, degree + 1));
    knots
}

pub(crate) fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(FlodeError::Grid("grid needs at least two points".into()));
    }
    if grid.iter().any(|t| !t.is_finite() || *t < 0.0 || *t > 1.0) {
        return Err(FlodeError::Grid("grid points must lie in [0, 1]".into()));
    }
    if let Some(w) = grid.windows(2).find(|w| w[1] <= w[0]) {
        return Err(FlodeError::Grid(format!(
            "grid must be strictly increasing (found {} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Alias for [`BSplineBasis::new`].
pub fn build_basis(grid: &[f64], n_basis: usize, degree: usize) -> Result<BSplineBasis> {
    BSplineBasis::new(grid, n_basis, degree)
}

/// `(K - 2) × K` second-order difference operator.
pub fn second_difference(k: usize) -> DMatrix<f64> {
    let rows = k.saturating_sub(2);
    let mut d = DMatrix::zeros(rows, k);
    for r in 0..rows {
        d[(r, r)] = 1.0;
        d[(r, r + 1)] = -2.0;
        d[(r, r + 2)] = 1.0;
    }
    d
}

/// `P = λ I + (1 - λ) Δ2ᵀΔ2`.
pub fn build_penalty(k: usize, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(FlodeError::InvalidArgument(format!(
            "penalty blend weight must lie in (0, 1], got {lambda}"
        )));
    }
    if k < 3 {
        return Err(FlodeError::InvalidArgument(format!(
            "penalty needs at least 3 coefficients, got {k}"
        )));
    }
    let d2 = second_difference(k);
    let mut p = d2.transpose() * d2 * (1.0 - lambda);
    for i in 0..k {
        p[(i, i)] += lambda;
    }
    Ok(p)
}

/// Basis plus the blended penalty used for every coefficient function.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSystem {
    basis: BSplineBasis,
    penalty: DMatrix<f64>,
    lambda: f64,
}

impl BasisSystem {
    pub fn new(grid: &[f64], n_basis: usize, degree: usize, lambda: f64) -> Result<Self> {
        let basis = BSplineBasis::new(grid, n_basis, degree)?;
        let penalty = build_penalty(n_basis, lambda)?;
        Ok(BasisSystem {
            basis,
            penalty,
            lambda,
        })
    }

    /// Cubic basis with the default blend weight.
    pub fn cubic(grid: &[f64], n_basis: usize) -> Result<Self> {
        Self::new(grid, n_basis, 3, DEFAULT_LAMBDA)
    }

    pub fn grid(&self) -> &[f64] {
        self.basis.grid()
    }

    pub fn n_basis(&self) -> usize {
        self.basis.n_basis()
    }

    pub fn degree(&self) -> usize {
        self.basis.degree()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.basis.matrix()
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    /// Evaluate `Θ(t) c` on the grid.
    pub fn curve(&self, coefs: &[f64]) -> Vec<f64> {
        let theta = self.matrix();
        (0..theta.nrows())
            .map(|j| (0..theta.ncols()).map(|k| theta[(j, k)] * coefs[k]).sum())
            .collect()
    }
}

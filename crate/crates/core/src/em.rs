//! Joint estimation of the buffering parameter, spline coefficients, initial
//! positions and variance components by expectation-maximization.
//!
//! Observed-data model for trial `i` on the grid:
//!
//! ```text
//! Y_i = y0*_i(α) + D*(α) d_i + x*_i(α) b + ε_i,
//! ε_i ~ N(0, σ² I_J),  d_i ~ N(0, σ_d² P⁻¹),  b_p ~ N(0, σ_b² P⁻¹)
//! ```
//!
//! The E-step computes the Gaussian posterior of each `d_i`; the M-step
//! updates `α` by a bounded line search on the expected residual sum of
//! squares, then `b`, then `y_i(0)`, then the three variances. The marginal
//! log-likelihood with the `d_i` integrated out is the convergence monitor.

use std::rc::Rc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{assemble_bundle, build_dstar, check_compatible, DesignBundle, FunctionalDataset};
use crate::error::{FlodeError, Result};
use crate::linalg::{block_diag, gram_solve, log_det_spd, spd_solve, trace_product};
use crate::optim::{brent_minimize, BrentOptions};
use crate::quadrature::decayed_cumulative_into;
use crate::splines::BasisSystem;

/// Lower bound applied to every variance estimate.
pub const VARIANCE_FLOOR: f64 = 1e-10;
/// Smallest buffering parameter the fitter will use.
pub const MIN_ALPHA: f64 = 1e-6;
/// Starting value for `σ_b²` and `σ_d²` (weak penalization early on).
pub const INITIAL_PRIOR_VARIANCE: f64 = 100.0;

/// Fixed effects of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlodeParams {
    pub alpha: f64,
    /// `K(P+1)` coefficients, blocks `b_0 | b_1 | … | b_P`.
    pub b: Vec<f64>,
    /// Estimated true initial positions, one per trial.
    pub y0: Vec<f64>,
    pub sigma2: f64,
    pub sigma2_d: f64,
    pub sigma2_b: f64,
}

impl FlodeParams {
    /// Spline coefficients of coefficient function `p` (0 is the intercept).
    pub fn block(&self, p: usize, n_basis: usize) -> &[f64] {
        &self.b[p * n_basis..(p + 1) * n_basis]
    }

    pub fn n_blocks(&self, n_basis: usize) -> usize {
        self.b.len() / n_basis
    }
}

/// Posterior `d_i | Y_i ~ N(m_i, C)`; `C` is shared because `D*` is.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    /// `N × K`, row `i` is `m_i`.
    pub m: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl PosteriorMoments {
    pub fn zeros(n_trials: usize, n_basis: usize) -> Self {
        PosteriorMoments {
            m: DMatrix::zeros(n_trials, n_basis),
            c: DMatrix::zeros(n_basis, n_basis),
        }
    }

    /// `<d_i> = m_i`.
    pub fn mean(&self, i: usize) -> DVector<f64> {
        self.m.row(i).transpose()
    }

    /// `<d_iᵀ A d_i> = tr(A C) + m_iᵀ A m_i`.
    pub fn expected_quadratic(&self, i: usize, a: &DMatrix<f64>) -> f64 {
        let m = self.mean(i);
        trace_product(a, &self.c) + (a * &m).dot(&m)
    }

    pub fn select(&self, indices: &[usize]) -> PosteriorMoments {
        PosteriorMoments {
            m: DMatrix::from_fn(indices.len(), self.m.ncols(), |r, c| self.m[(indices[r], c)]),
            c: self.c.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Absolute change in marginal log-likelihood that stops the iterations.
    pub tol: f64,
    pub max_iter: usize,
    pub alpha_bounds: (f64, f64),
    pub random_effects: bool,
    /// Candidate values for the initial grid search over `α`.
    pub init_grid: Vec<f64>,
    /// Hold `α` at this value and skip its line search.
    pub fixed_alpha: Option<f64>,
    /// Extrapolate between EM iterates (squared iterative scheme).
    pub accelerate: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-6,
            max_iter: 200,
            alpha_bounds: (MIN_ALPHA, 40.0),
            random_effects: true,
            init_grid: default_alpha_grid(41),
            fixed_alpha: None,
            accelerate: true,
        }
    }
}

/// `points` equally spaced values on `[0, 20]`.
pub fn default_alpha_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| 20.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Expected residual sums of squares recorded around the M-step sub-updates
/// of one iteration. `penalized_*` add `(σ²/σ_b²) Σ_p b_pᵀ P b_p`, which is
/// the criterion the `b` update minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubstepObjectives {
    pub start: f64,
    pub after_alpha: f64,
    pub after_b: f64,
    pub after_y0: f64,
    pub penalized_before_b: f64,
    pub penalized_after_b: f64,
}

#[derive(Debug, Clone)]
pub struct FlodeFit {
    pub params: FlodeParams,
    pub moments: PosteriorMoments,
    pub basis: BasisSystem,
    pub loglik_trace: Vec<f64>,
    /// Marginal log-likelihood at the initial values.
    pub initial_loglik: f64,
    pub objective_trace: Vec<SubstepObjectives>,
    pub n_iter: usize,
    pub converged: bool,
}

impl FlodeFit {
    pub fn n_forcings(&self) -> usize {
        self.params.n_blocks(self.basis.n_basis()) - 1
    }

    /// `B_p(t) = Θ(t) b_p` on the grid.
    pub fn coefficient_function(&self, p: usize) -> Vec<f64> {
        self.basis.curve(self.params.block(p, self.basis.n_basis()))
    }

    pub fn coefficient_functions(&self) -> Vec<Vec<f64>> {
        (0..=self.n_forcings()).map(|p| self.coefficient_function(p)).collect()
    }

    /// Last change in the monitored log-likelihood.
    pub fn last_loglik_change(&self) -> f64 {
        match self.loglik_trace.len() {
            0 => f64::NAN,
            1 => self.loglik_trace[0] - self.initial_loglik,
            n => self.loglik_trace[n - 1] - self.loglik_trace[n - 2],
        }
    }
}

fn rows(dataset: &FunctionalDataset) -> Vec<DVector<f64>> {
    (0..dataset.n_trials())
        .map(|i| dataset.responses().row(i).transpose())
        .collect()
}

fn check_shapes(dataset: &FunctionalDataset, bundle: &DesignBundle, params: &FlodeParams) -> Result<()> {
    let n = dataset.n_trials();
    if bundle.n_trials() != n || params.y0.len() != n {
        return Err(FlodeError::Dimension(format!(
            "{n} trials but bundle has {} and params have {} initial positions",
            bundle.n_trials(),
            params.y0.len()
        )));
    }
    let cols = bundle.xstar.first().map_or(0, |x| x.ncols());
    if params.b.len() != cols {
        return Err(FlodeError::Dimension(format!(
            "{} fixed-effect coefficients for a design with {cols} columns",
            params.b.len()
        )));
    }
    Ok(())
}

fn check_variances(params: &FlodeParams) -> Result<()> {
    if !(params.sigma2 > 0.0 && params.sigma2_d > 0.0 && params.sigma2_b > 0.0) {
        return Err(FlodeError::InvalidArgument(format!(
            "variances must be positive (σ² = {}, σ_d² = {}, σ_b² = {})",
            params.sigma2, params.sigma2_d, params.sigma2_b
        )));
    }
    Ok(())
}

/// `Y_i - y_i(0) e^{-αt} - x*_i b`.
fn partial_residual(y: &DVector<f64>, bundle: &DesignBundle, i: usize, y0: f64, b: &DVector<f64>) -> DVector<f64> {
    let mut r = y - &bundle.xstar[i] * b;
    for (j, v) in r.iter_mut().enumerate() {
        *v -= y0 * bundle.decay[j];
    }
    r
}

/// Posterior moments of the random-intercept coefficients.
pub fn estep(
    dataset: &FunctionalDataset,
    bundle: &DesignBundle,
    params: &FlodeParams,
    basis: &BasisSystem,
) -> Result<PosteriorMoments> {
    check_shapes(dataset, bundle, params)?;
    check_variances(params)?;
    let d = &bundle.dstar;
    let dtd = d.tr_mul(d);
    let precision = basis.penalty() / params.sigma2_d + &dtd / params.sigma2;
    let chol = precision
        .cholesky()
        .ok_or_else(|| FlodeError::numerical("E-step", "posterior precision is not positive definite"))?;
    let mut c = chol.inverse();
    c = (&c + c.transpose()) * 0.5;

    let b = DVector::from_column_slice(&params.b);
    let ys = rows(dataset);
    let mut m = DMatrix::zeros(dataset.n_trials(), basis.n_basis());
    for (i, y) in ys.iter().enumerate() {
        let r = partial_residual(y, bundle, i, params.y0[i], &b);
        let mi = chol.solve(&d.tr_mul(&r)) / params.sigma2;
        m.row_mut(i).copy_from(&mi.transpose());
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(FlodeError::numerical("E-step", "non-finite posterior mean"));
    }
    Ok(PosteriorMoments { m, c })
}

/// `<εᵀε>`: expected residual sum of squares over the posterior of the `d_i`.
pub fn expected_rss(
    dataset: &FunctionalDataset,
    bundle: &DesignBundle,
    moments: &PosteriorMoments,
    params: &FlodeParams,
) -> f64 {
    let b = DVector::from_column_slice(&params.b);
    let d = &bundle.dstar;
    let ys = rows(dataset);
    let mut total = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let r = partial_residual(y, bundle, i, params.y0[i], &b) - d * moments.mean(i);
        total += r.norm_squared();
    }
    let dtd = d.tr_mul(d);
    total + dataset.n_trials() as f64 * trace_product(&dtd, &moments.c)
}

/// `Σ_p b_pᵀ P b_p`.
pub fn penalty_quadratic(b: &[f64], penalty: &DMatrix<f64>) -> f64 {
    let k = penalty.nrows();
    b.chunks(k)
        .map(|bp| {
            let v = DVector::from_column_slice(bp);
            (penalty * &v).dot(&v)
        })
        .sum()
}

/// Penalized least-squares update of the fixed-effect coefficients.
pub fn mstep_b(
    dataset: &FunctionalDataset,
    bundle: &DesignBundle,
    moments: &PosteriorMoments,
    params: &FlodeParams,
    basis: &BasisSystem,
) -> Result<Vec<f64>> {
    check_shapes(dataset, bundle, params)?;
    check_variances(params)?;
    let cols = params.b.len();
    let blocks = cols / basis.n_basis();
    let mut lhs = block_diag(basis.penalty(), blocks) * (params.sigma2 / params.sigma2_b);
    let mut rhs = DVector::zeros(cols);
    let d = &bundle.dstar;
    let ys = rows(dataset);
    for (i, y) in ys.iter().enumerate() {
        lhs += &bundle.gram[i];
        let mut target = y - d * moments.mean(i);
        for (j, v) in target.iter_mut().enumerate() {
            *v -= params.y0[i] * bundle.decay[j];
        }
        rhs += bundle.xstar[i].tr_mul(&target);
    }
    Ok(spd_solve(&lhs, &rhs, "b update")?.iter().copied().collect())
}

/// Projection of each trial's partial residual onto `e^{-αt}`.
pub fn mstep_y0(
    dataset: &FunctionalDataset,
    bundle: &DesignBundle,
    moments: &PosteriorMoments,
    params: &FlodeParams,
) -> Vec<f64> {
    let b = DVector::from_column_slice(&params.b);
    let e = DVector::from_column_slice(&bundle.decay);
    let denom = e.norm_squared();
    let ys = rows(dataset);
    ys.iter()
        .enumerate()
        .map(|(i, y)| {
            let r = y - &bundle.xstar[i] * &b - &bundle.dstar * moments.mean(i);
            e.dot(&r) / denom
        })
        .collect()
}

/// Closed-form variance updates `(σ², σ_d², σ_b²)`, each floored at
/// [`VARIANCE_FLOOR`]. `σ_b²` averages over all `P + 1` penalized blocks.
pub fn mstep_variances(
    dataset: &FunctionalDataset,
    bundle: &DesignBundle,
    moments: &PosteriorMoments,
    params: &FlodeParams,
    basis: &BasisSystem,
) -> (f64, f64, f64) {
    let n = dataset.n_trials() as f64;
    let j = dataset.n_grid() as f64;
    let k = basis.n_basis() as f64;
    let p = basis.penalty();
    let sigma2 = expected_rss(dataset, bundle, moments, params) / (n * j);
    let dpd: f64 = (0..dataset.n_trials()).map(|i| moments.expected_quadratic(i, p)).sum();
    let sigma2_d = dpd / (n * k);
    let sigma2_b = penalty_quadratic(&params.b, p) / params.b.len() as f64;
    let floor = |v: f64| if v.is_finite() { v.max(VARIANCE_FLOOR) } else { VARIANCE_FLOOR };
    (floor(sigma2), floor(sigma2_d), floor(sigma2_b))
}

/// Evaluates `<εᵀε>` as a function of `α` with `b`, `y_i(0)` and the
/// posterior moments held fixed. Uses linearity of the kernel integral:
/// `x*_i b + D* m_i` is the decayed integral of `Σ_p x_ip B_p + Θ m_i`.
pub(crate) struct AlphaObjective<'a> {
    grid: &'a [f64],
    basis: &'a BasisSystem,
    ys: Vec<DVector<f64>>,
    y0: &'a [f64],
    /// Per trial, `Σ_p x_ip(s) B_p(s) + δ̂_i(s)` on the grid.
    drivers: Vec<Vec<f64>>,
    c: &'a DMatrix<f64>,
    include_trace: bool,
}

impl<'a> AlphaObjective<'a> {
    pub(crate) fn new(
        dataset: &'a FunctionalDataset,
        params: &'a FlodeParams,
        moments: &'a PosteriorMoments,
        basis: &'a BasisSystem,
    ) -> Self {
        let k = basis.n_basis();
        let curves: Vec<Vec<f64>> = (0..params.n_blocks(k))
            .map(|p| basis.curve(params.block(p, k)))
            .collect();
        let theta = basis.matrix();
        let jn = dataset.n_grid();
        let drivers = (0..dataset.n_trials())
            .map(|i| {
                let delta = theta * moments.mean(i);
                let mut g: Vec<f64> = (0..jn).map(|j| curves[0][j] + delta[j]).collect();
                for (p, curve) in curves.iter().enumerate().skip(1) {
                    let row = dataset.forcings()[p - 1].row(i);
                    for j in 0..jn {
                        g[j] += row[j] * curve[j];
                    }
                }
                g
            })
            .collect();
        AlphaObjective {
            grid: dataset.grid(),
            basis,
            ys: rows(dataset),
            y0: &params.y0,
            drivers,
            c: &moments.c,
            include_trace: moments.c.iter().any(|v| *v != 0.0),
        }
    }

    pub(crate) fn eval(&self, alpha: f64) -> f64 {
        let jn = self.grid.len();
        let decay: Vec<f64> = self.grid.iter().map(|t| (-alpha * t).exp()).collect();
        let mut integral = vec![0.0; jn];
        let mut total = 0.0;
        for (i, y) in self.ys.iter().enumerate() {
            decayed_cumulative_into(self.grid, &self.drivers[i], alpha, &mut integral);
            for j in 0..jn {
                let r = y[j] - self.y0[i] * decay[j] - integral[j];
                total += r * r;
            }
        }
        if self.include_trace {
            let d = build_dstar(alpha, self.basis).expect("alpha within bounds");
            total += self.ys.len() as f64 * trace_product(&d.tr_mul(&d), self.c);
        }
        total
    }
}

/// `<εᵀε>` at a trial value of `α`, rebuilding every design object there.
pub fn expected_rss_at_alpha(
    dataset: &FunctionalDataset,
    params: &FlodeParams,
    moments: &PosteriorMoments,
    basis: &BasisSystem,
    alpha: f64,
) -> f64 {
    AlphaObjective::new(dataset, params, moments, basis).eval(alpha)
}

/// Line search for `α` minimizing `<εᵀε>` with everything else held fixed.
///
/// Brent's method is run over the whole interval and over a bracket around
/// the incumbent; the incumbent is kept unless a strictly better value is
/// found, so the update never increases `<εᵀε>`.
pub fn mstep_alpha(
    dataset: &FunctionalDataset,
    params: &FlodeParams,
    moments: &PosteriorMoments,
    basis: &BasisSystem,
    bounds: (f64, f64),
) -> Result<f64> {
    let (lo, hi) = bounds;
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo < hi) {
        return Err(FlodeError::InvalidArgument(format!(
            "invalid alpha bounds ({lo}, {hi})"
        )));
    }
    let objective = AlphaObjective::new(dataset, params, moments, basis);
    let incumbent = params.alpha.clamp(lo, hi);
    let mut best = (incumbent, objective.eval(incumbent));

    let width = (0.5 * incumbent).max(0.5);
    let local = (incumbent - width).max(lo)..=(incumbent + width).min(hi);
    let opts = BrentOptions::default();
    for (a, b) in [(lo, hi), (*local.start(), *local.end())] {
        match brent_minimize(|x| objective.eval(x), a, b, opts) {
            Ok(m) if m.fx < best.1 => best = (m.x, m.fx),
            Ok(_) => {}
            Err(e) => warn!("alpha line search on [{a}, {b}] failed: {e}; keeping incumbent"),
        }
    }
    if !best.1.is_finite() {
        warn!("alpha objective is not finite near {incumbent}; keeping incumbent");
        return Ok(incumbent);
    }
    Ok(best.0)
}

/// `Σ_i log N(Y_i; y0*_i + x*_i b, σ_d² D* P⁻¹ D*ᵀ + σ² I)`.
///
/// Evaluated in the `K`-dimensional coefficient space: the determinant via
/// the matrix determinant lemma and the quadratic form as
/// `‖r - D* m‖²/σ² + mᵀ P m / σ_d²` with `m` the posterior mean.
pub fn marginal_loglik(
    dataset: &FunctionalDataset,
    bundle: &DesignBundle,
    params: &FlodeParams,
    basis: &BasisSystem,
) -> Result<f64> {
    check_shapes(dataset, bundle, params)?;
    check_variances(params)?;
    let jn = dataset.n_grid() as f64;
    let k = basis.n_basis() as f64;
    let p = basis.penalty();
    let d = &bundle.dstar;
    let precision = p / params.sigma2_d + d.tr_mul(d) / params.sigma2;
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| FlodeError::numerical("marginal likelihood", "covariance factorization failed"))?;
    let logdet_a = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet_p = log_det_spd(p, "marginal likelihood")?;
    let logdet_v = jn * params.sigma2.ln() + k * params.sigma2_d.ln() + logdet_a - logdet_p;
    let constant = jn * (2.0 * std::f64::consts::PI).ln() + logdet_v;

    let b = DVector::from_column_slice(&params.b);
    let ys = rows(dataset);
    let mut total = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let r = partial_residual(y, bundle, i, params.y0[i], &b);
        let m = chol.solve(&d.tr_mul(&r)) / params.sigma2;
        let fit = &r - d * &m;
        let quad = fit.norm_squared() / params.sigma2 + (p * &m).dot(&m) / params.sigma2_d;
        total += -0.5 * (constant + quad);
    }
    if !total.is_finite() {
        return Err(FlodeError::numerical("marginal likelihood", "non-finite value"));
    }
    Ok(total)
}

/// Unpenalized least-squares `b` for `δ = 0` with the given bundle, and its
/// residual sum of squares.
fn ols_fit(dataset: &FunctionalDataset, bundle: &DesignBundle, y0: &[f64]) -> Result<(Vec<f64>, f64)> {
    let cols = bundle.xstar[0].ncols();
    let mut gram = DMatrix::zeros(cols, cols);
    let mut rhs = DVector::zeros(cols);
    let ys = rows(dataset);
    let zero = DVector::zeros(cols);
    for (i, y) in ys.iter().enumerate() {
        gram += &bundle.gram[i];
        rhs += bundle.xstar[i].tr_mul(&partial_residual(y, bundle, i, y0[i], &zero));
    }
    let b = gram_solve(&gram, &rhs, "initial least squares")?;
    let loss = ys
        .iter()
        .enumerate()
        .map(|(i, y)| partial_residual(y, bundle, i, y0[i], &b).norm_squared())
        .sum();
    Ok((b.iter().copied().collect(), loss))
}

/// Starting values: grid search over `α` of the least-squares loss with
/// `δ = 0` and `y_i(0) = Y_i(0)`.
pub fn init(dataset: &FunctionalDataset, basis: &BasisSystem, alpha_grid: &[f64]) -> Result<FlodeParams> {
    init_with_bundle(dataset, basis, alpha_grid).map(|(p, _)| p)
}

/// Per-point losses of the initial grid search.
pub fn init_losses(dataset: &FunctionalDataset, basis: &BasisSystem, alpha_grid: &[f64]) -> Result<Vec<f64>> {
    check_compatible(dataset, basis)?;
    let y0 = dataset.initial_positions();
    alpha_grid
        .iter()
        .map(|&a| {
            let bundle = assemble_bundle(dataset, a, basis, &y0)?;
            Ok(ols_fit(dataset, &bundle, &y0).map_or(f64::INFINITY, |(_, l)| l))
        })
        .collect()
}

fn init_with_bundle(
    dataset: &FunctionalDataset,
    basis: &BasisSystem,
    alpha_grid: &[f64],
) -> Result<(FlodeParams, DesignBundle)> {
    check_compatible(dataset, basis)?;
    if alpha_grid.is_empty() {
        return Err(FlodeError::InvalidArgument("empty initialization grid".into()));
    }
    let y0 = dataset.initial_positions();
    let mut best: Option<(f64, Vec<f64>, f64, DesignBundle)> = None;
    for &alpha in alpha_grid {
        let bundle = assemble_bundle(dataset, alpha, basis, &y0)?;
        let (b, loss) = match ols_fit(dataset, &bundle, &y0) {
            Ok(v) => v,
            Err(e) => {
                warn!("initial least squares failed at alpha = {alpha}: {e}");
                continue;
            }
        };
        if loss.is_finite() && best.as_ref().is_none_or(|(_, _, l, _)| loss < *l) {
            best = Some((alpha, b, loss, bundle));
        }
    }
    let (alpha, b, loss, bundle) = best.ok_or_else(|| {
        FlodeError::numerical("initialization", "no finite loss on the alpha grid")
    })?;
    let params = initial_params(dataset, alpha, b, loss, y0);
    Ok((params, bundle))
}

fn initial_params(dataset: &FunctionalDataset, alpha: f64, b: Vec<f64>, loss: f64, y0: Vec<f64>) -> FlodeParams {
    let nj = (dataset.n_trials() * dataset.n_grid()) as f64;
    FlodeParams {
        alpha,
        b,
        y0,
        sigma2: (loss / nj).max(VARIANCE_FLOOR),
        sigma2_d: INITIAL_PRIOR_VARIANCE,
        sigma2_b: INITIAL_PRIOR_VARIANCE,
    }
}

fn validate_options(options: &FitOptions) -> Result<()> {
    let (lo, hi) = options.alpha_bounds;
    if !(lo >= MIN_ALPHA && lo < hi && hi.is_finite()) {
        return Err(FlodeError::InvalidArgument(format!(
            "alpha bounds must satisfy {MIN_ALPHA} <= lo < hi < inf, got ({lo}, {hi})"
        )));
    }
    if options.tol.is_nan() || options.tol <= 0.0 {
        return Err(FlodeError::InvalidArgument(format!(
            "tolerance must be positive, got {}",
            options.tol
        )));
    }
    if options.max_iter == 0 {
        return Err(FlodeError::InvalidArgument("max_iter must be at least 1".into()));
    }
    if let Some(a) = options.fixed_alpha {
        if !(a.is_finite() && a >= 0.0) {
            return Err(FlodeError::InvalidArgument(format!("invalid fixed alpha {a}")));
        }
    }
    Ok(())
}

/// Fit the model by EM from the grid-search starting values.
pub fn fit(dataset: &FunctionalDataset, basis: &BasisSystem, options: &FitOptions) -> Result<FlodeFit> {
    validate_options(options)?;
    let grid = match options.fixed_alpha {
        Some(a) => vec![a],
        None => options.init_grid.clone(),
    };
    let (mut params, mut bundle) = init_with_bundle(dataset, basis, &grid)?;
    if options.fixed_alpha.is_none() {
        let (lo, hi) = options.alpha_bounds;
        let clamped = params.alpha.clamp(lo, hi);
        if clamped != params.alpha {
            params.alpha = clamped;
            bundle = assemble_bundle(dataset, clamped, basis, &params.y0)?;
        }
    }
    run_em(dataset, basis, bundle, params, options)
}

/// EM with `α` held at `bundle.alpha`, reusing the supplied design objects.
/// `bundle` must have been assembled for `dataset` (or selected alongside it).
pub fn fit_with_fixed_design(
    dataset: &FunctionalDataset,
    basis: &BasisSystem,
    bundle: DesignBundle,
    options: &FitOptions,
) -> Result<FlodeFit> {
    let mut options = options.clone();
    options.fixed_alpha = Some(bundle.alpha);
    validate_options(&options)?;
    check_compatible(dataset, basis)?;
    let y0 = dataset.initial_positions();
    let (b, loss) = ols_fit(dataset, &bundle, &y0)?;
    let params = initial_params(dataset, bundle.alpha, b, loss, y0);
    run_em(dataset, basis, bundle, params, &options)
}

/// Result of one application of the EM map.
/// The design is shared between steps until `α` moves; its `y0star` is not
/// kept current (the iterations use `params.y0` with `decay`).
struct EmStep {
    params: FlodeParams,
    bundle: Rc<DesignBundle>,
    objectives: SubstepObjectives,
    loglik: f64,
}

/// One E-step followed by the M-step sub-updates in the order α, b, y(0),
/// variances.
fn em_step(
    dataset: &FunctionalDataset,
    basis: &BasisSystem,
    bundle: &Rc<DesignBundle>,
    params: &FlodeParams,
    options: &FitOptions,
) -> Result<EmStep> {
    let mut params = params.clone();
    let mut bundle = Rc::clone(bundle);
    let moments = if options.random_effects {
        estep(dataset, &bundle, &params, basis)?
    } else {
        PosteriorMoments::zeros(dataset.n_trials(), basis.n_basis())
    };
    let start = expected_rss(dataset, &bundle, &moments, &params);

    if options.fixed_alpha.is_none() {
        let alpha = mstep_alpha(dataset, &params, &moments, basis, options.alpha_bounds)?;
        if alpha != params.alpha {
            params.alpha = alpha;
            bundle = Rc::new(assemble_bundle(dataset, alpha, basis, &params.y0)?);
        }
    }
    let after_alpha = expected_rss(dataset, &bundle, &moments, &params);

    let ratio = params.sigma2 / params.sigma2_b;
    let penalized_before_b = after_alpha + ratio * penalty_quadratic(&params.b, basis.penalty());
    params.b = mstep_b(dataset, &bundle, &moments, &params, basis)?;
    let after_b = expected_rss(dataset, &bundle, &moments, &params);
    let penalized_after_b = after_b + ratio * penalty_quadratic(&params.b, basis.penalty());

    params.y0 = mstep_y0(dataset, &bundle, &moments, &params);
    let after_y0 = expected_rss(dataset, &bundle, &moments, &params);

    let (s2, s2d, s2b) = mstep_variances(dataset, &bundle, &moments, &params, basis);
    params.sigma2 = s2;
    params.sigma2_d = if options.random_effects { s2d } else { VARIANCE_FLOOR };
    params.sigma2_b = s2b;

    let loglik = marginal_loglik(dataset, &bundle, &params, basis)?;
    Ok(EmStep {
        params,
        bundle,
        objectives: SubstepObjectives {
            start,
            after_alpha,
            after_b,
            after_y0,
            penalized_before_b,
            penalized_after_b,
        },
        loglik,
    })
}

/// Marginal log-likelihood plus the Gaussian log-prior of the fixed-effect
/// blocks. This is the quantity the EM iterations cannot decrease.
pub fn penalized_loglik(loglik: f64, params: &FlodeParams, basis: &BasisSystem) -> Result<f64> {
    let k = basis.n_basis() as f64;
    let blocks = params.n_blocks(basis.n_basis()) as f64;
    let logdet_p = log_det_spd(basis.penalty(), "penalized likelihood")?;
    let quad = penalty_quadratic(&params.b, basis.penalty());
    let prior = -0.5
        * (blocks * (k * (2.0 * std::f64::consts::PI * params.sigma2_b).ln() - logdet_p)
            + quad / params.sigma2_b);
    Ok(loglik + prior)
}

/// `[α, b, y(0), ln σ², ln σ_d², ln σ_b²]`.
fn pack(params: &FlodeParams) -> DVector<f64> {
    let mut v = Vec::with_capacity(4 + params.b.len() + params.y0.len());
    v.push(params.alpha);
    v.extend_from_slice(&params.b);
    v.extend_from_slice(&params.y0);
    v.push(params.sigma2.ln());
    v.push(params.sigma2_d.ln());
    v.push(params.sigma2_b.ln());
    DVector::from_vec(v)
}

fn unpack(v: &DVector<f64>, template: &FlodeParams, options: &FitOptions) -> FlodeParams {
    let nb = template.b.len();
    let ny = template.y0.len();
    let var = |x: f64| x.exp().max(VARIANCE_FLOOR);
    let (lo, hi) = options.alpha_bounds;
    FlodeParams {
        alpha: match options.fixed_alpha {
            Some(_) => template.alpha,
            None => v[0].clamp(lo, hi),
        },
        b: v.rows(1, nb).iter().copied().collect(),
        y0: v.rows(1 + nb, ny).iter().copied().collect(),
        sigma2: var(v[1 + nb + ny]),
        sigma2_d: if options.random_effects {
            var(v[2 + nb + ny])
        } else {
            VARIANCE_FLOOR
        },
        sigma2_b: var(v[3 + nb + ny]),
    }
}

struct Trace {
    loglik: Vec<f64>,
    objectives: Vec<SubstepObjectives>,
}

impl Trace {
    fn push(&mut self, step: &EmStep) {
        self.loglik.push(step.loglik);
        self.objectives.push(step.objectives);
    }
}

/// EM iterations, optionally accelerated by squared extrapolation: two EM
/// steps from `θ0` give `θ1, θ2`, the point `θ0 - 2a r + a² v` with
/// `r = θ1 - θ0`, `v = θ2 - 2θ1 + θ0` is fed through one more EM step and
/// kept only if its penalized likelihood is at least that of `θ2`. Every
/// recorded iteration is a plain EM step; convergence is tested between
/// consecutive EM iterates.
fn run_em(
    dataset: &FunctionalDataset,
    basis: &BasisSystem,
    bundle: DesignBundle,
    mut params: FlodeParams,
    options: &FitOptions,
) -> Result<FlodeFit> {
    if !options.random_effects {
        params.sigma2_d = VARIANCE_FLOOR;
    }
    let initial_loglik = marginal_loglik(dataset, &bundle, &params, basis)?;
    let mut trace = Trace {
        loglik: Vec::new(),
        objectives: Vec::new(),
    };
    let mut current = EmStep {
        params,
        bundle: Rc::new(bundle),
        objectives: SubstepObjectives {
            start: f64::NAN,
            after_alpha: f64::NAN,
            after_b: f64::NAN,
            after_y0: f64::NAN,
            penalized_before_b: f64::NAN,
            penalized_after_b: f64::NAN,
        },
        loglik: initial_loglik,
    };
    let mut converged = false;
    let mut step_max = 1.0;
    // `prev` is the EM predecessor; after a rejected extrapolation the last
    // recorded value differs from it and both must agree.
    let is_converged = |next: f64, prev: f64, trace: &Trace| {
        let n = trace.loglik.len();
        let recorded = if n >= 2 { trace.loglik[n - 2] } else { initial_loglik };
        (next - prev).abs() < options.tol && (next - recorded).abs() < options.tol
    };

    'outer: while trace.loglik.len() < options.max_iter {
        let theta0 = pack(&current.params);
        let mut chain = Vec::with_capacity(2);
        for _ in 0..2 {
            let from = chain.last().unwrap_or(&current);
            let prev = from.loglik;
            let next = em_step(dataset, basis, &from.bundle, &from.params, options)?;
            trace.push(&next);
            let done = is_converged(next.loglik, prev, &trace);
            chain.push(next);
            if done {
                converged = true;
                current = chain.pop().expect("just pushed");
                break 'outer;
            }
            if trace.loglik.len() >= options.max_iter {
                current = chain.pop().expect("just pushed");
                break 'outer;
            }
        }
        let second = chain.pop().expect("two steps");
        let first = chain.pop().expect("two steps");
        if !options.accelerate {
            current = second;
            continue;
        }

        let theta1 = pack(&first.params);
        let theta2 = pack(&second.params);
        let r = &theta1 - &theta0;
        let v = &theta2 - &theta1 * 2.0 + &theta0;
        let vn = v.norm();
        let mut a = if vn > 0.0 { -r.norm() / vn } else { -1.0 };
        if !a.is_finite() || a > -1.0 {
            a = -1.0;
        }
        let clamped = a < -step_max;
        a = a.max(-step_max);
        if a == -1.0 {
            // θ' = θ2: nothing to extrapolate, but allow longer steps next time
            if clamped {
                step_max *= 4.0;
            }
            current = second;
            continue;
        }
        let candidate = unpack(&(&theta0 - &r * (2.0 * a) + &v * (a * a)), &second.params, options);
        let design = if candidate.alpha == second.params.alpha {
            Ok(Rc::clone(&second.bundle))
        } else {
            assemble_bundle(dataset, candidate.alpha, basis, &candidate.y0).map(Rc::new)
        };
        let extrapolated = design.and_then(|b| em_step(dataset, basis, &b, &candidate, options));
        let stabilized = match extrapolated {
            Ok(s) => s,
            Err(_) => {
                step_max = 1.0;
                current = second;
                continue;
            }
        };
        trace.push(&stabilized);
        let better = penalized_loglik(stabilized.loglik, &stabilized.params, basis)?
            >= penalized_loglik(second.loglik, &second.params, basis)?;
        if better {
            if clamped {
                step_max *= 4.0;
            }
            current = stabilized;
        } else {
            step_max = (step_max / 4.0).max(1.0);
            current = second;
        }
    }

    let EmStep { params, bundle, .. } = current;
    let moments = if options.random_effects {
        estep(dataset, &bundle, &params, basis)?
    } else {
        PosteriorMoments::zeros(dataset.n_trials(), basis.n_basis())
    };
    let n_iter = trace.loglik.len();
    if params.sigma2_b <= 10.0 * VARIANCE_FLOOR {
        // the joint mode b = 0, σ_b² → 0 absorbs the fixed effects
        warn!("fixed-effect variance collapsed to {:e}; coefficient functions are shrunk to zero", params.sigma2_b);
    }
    Ok(FlodeFit {
        params,
        moments,
        basis: basis.clone(),
        loglik_trace: trace.loglik,
        initial_loglik,
        objective_trace: trace.objectives,
        n_iter,
        converged,
    })
}

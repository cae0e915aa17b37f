//! Synthetic datasets with known truth: trajectories generated either by the
//! functional ODE itself or by a historical (function-on-function) model.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::design::FunctionalDataset;
use crate::error::{FlodeError, Result};
use crate::metrics::Surface;
use crate::quadrature::{decayed_cumulative_into, trapezoid_unchecked};
use crate::splines::BSplineBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthKind {
    Flode,
    Fhist,
}

/// `height · exp(-(t - center)² / (2 sd²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: f64,
    pub sd: f64,
    pub height: f64,
}

impl Bump {
    pub fn eval(&self, t: f64) -> f64 {
        let z = (t - self.center) / self.sd;
        self.height * (-0.5 * z * z).exp()
    }
}

/// A coefficient function given as a sum of Gaussian bumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub bumps: Vec<Bump>,
}

impl CurveSpec {
    pub fn eval(&self, t: f64) -> f64 {
        self.bumps.iter().map(|b| b.eval(t)).sum()
    }

    pub fn on_grid(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&t| self.eval(t)).collect()
    }

    pub fn zero() -> Self {
        CurveSpec { bumps: Vec::new() }
    }
}

/// Isotropic Gaussian bump surface `β(s, t)` kept on `s ≤ t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    pub center_s: f64,
    pub center_t: f64,
    pub sd: f64,
    pub height: f64,
}

impl SurfaceSpec {
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        if s > t {
            return 0.0;
        }
        let zs = (s - self.center_s) / self.sd;
        let zt = (t - self.center_t) / self.sd;
        self.height * (-0.5 * (zs * zs + zt * zt)).exp()
    }

    pub fn on_grid(&self, grid: &[f64]) -> Surface {
        let j = grid.len();
        Surface {
            grid: grid.to_vec(),
            values: DMatrix::from_fn(j, j, |s, t| self.eval(grid[s], grid[t])),
        }
    }
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        SurfaceSpec {
            center_s: 0.25,
            center_t: 0.75,
            sd: 0.1,
            height: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_trials: usize,
    pub grid_size: usize,
    pub alpha: f64,
    pub sigma2: f64,
    pub sigma2_d: f64,
    pub y0_variance: f64,
    pub seed: u64,
    pub truth_kind: TruthKind,
    pub scale_range: (f64, f64),
    pub shift_range: (f64, f64),
    /// Size of the cubic basis carrying the trial-specific random intercepts.
    pub random_effect_df: usize,
    pub intercept: CurveSpec,
    /// One coefficient function per forcing.
    pub coefficients: Vec<CurveSpec>,
    pub surface: SurfaceSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_trials: 100,
            grid_size: 50,
            alpha: 4.0,
            sigma2: 0.1,
            sigma2_d: 50.0,
            y0_variance: 5.0,
            seed: 0,
            truth_kind: TruthKind::Flode,
            scale_range: (0.5, 2.0),
            shift_range: (0.0, FRAC_PI_2),
            random_effect_df: 10,
            intercept: CurveSpec {
                bumps: vec![
                    Bump { center: 0.25, sd: 0.12, height: 3.0 },
                    Bump { center: 0.7, sd: 0.15, height: -2.0 },
                ],
            },
            coefficients: vec![CurveSpec {
                bumps: vec![
                    Bump { center: 0.3, sd: 0.1, height: 4.0 },
                    Bump { center: 0.75, sd: 0.12, height: -3.0 },
                ],
            }],
            surface: SurfaceSpec::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(FlodeError::Config(format!("{field}: {msg}")));
        if self.n_trials == 0 {
            return bad("n_trials", "must be at least 1".into());
        }
        if self.grid_size < 3 {
            return bad("grid_size", format!("must be at least 3, got {}", self.grid_size));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha", format!("must be finite and non-negative, got {}", self.alpha));
        }
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("sigma2_d", self.sigma2_d),
            ("y0_variance", self.y0_variance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(name, format!("must be finite and non-negative, got {v}"));
            }
        }
        for (name, (lo, hi)) in [("scale_range", self.scale_range), ("shift_range", self.shift_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(name, format!("invalid range ({lo}, {hi})"));
            }
        }
        if self.random_effect_df < 4 || self.random_effect_df > self.grid_size {
            return bad(
                "random_effect_df",
                format!("must lie in [4, grid_size], got {}", self.random_effect_df),
            );
        }
        if self.coefficients.is_empty() {
            return bad("coefficients", "at least one forcing is required".into());
        }
        if !(self.surface.sd > 0.0) {
            return bad("surface.sd", "must be positive".into());
        }
        for c in self.coefficients.iter().chain(std::iter::once(&self.intercept)) {
            if c.bumps.iter().any(|b| !(b.sd > 0.0)) {
                return bad("bumps", "every bump needs a positive sd".into());
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        equal_grid(self.grid_size)
    }
}

/// `n` equally spaced points on `[0, 1]`.
pub fn equal_grid(n: usize) -> Vec<f64> {
    (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
}

/// `scale · sin(πt + shift)` on the grid.
pub fn forcing_curve(grid: &[f64], scale: f64, shift: f64) -> Vec<f64> {
    grid.iter().map(|t| scale * (PI * t + shift).sin()).collect()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn draw_forcing(rng: &mut ChaCha8Rng, grid: &[f64], scale: (f64, f64), shift: (f64, f64)) -> Vec<f64> {
    let a = uniform(rng, scale);
    let c = uniform(rng, shift);
    forcing_curve(grid, a, c)
}

/// Sinusoidal forcings with random per-trial scale in `[0.5, 2]` and shift in
/// `[0, π/2]`.
pub fn gen_forcings(n: usize, grid: &[f64], seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| draw_forcing(&mut rng, grid, (0.5, 2.0), (0.0, FRAC_PI_2)))
        .collect();
    DMatrix::from_fn(n, grid.len(), |i, j| rows[i][j])
}

/// Ground truth behind a simulated ODE dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlodeTruth {
    pub alpha: f64,
    pub grid: Vec<f64>,
    /// `B_0, B_1, …, B_P` on the grid.
    pub coefficients: Vec<Vec<f64>>,
    /// `N × J` random intercept curves.
    pub random_intercepts: DMatrix<f64>,
    pub y0: Vec<f64>,
    /// Noise-free trajectories.
    pub signal: DMatrix<f64>,
}

/// Ground truth behind a simulated historical-model dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FhistTruth {
    pub grid: Vec<f64>,
    pub surface: Surface,
    pub intercept: Vec<f64>,
    pub random_intercepts: DMatrix<f64>,
    pub signal: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Truth {
    Flode(FlodeTruth),
    Fhist(FhistTruth),
}

/// Per-trial random draws shared by both generators.
struct TrialDraws {
    forcings: Vec<Vec<f64>>,
    y0: f64,
    random_intercept: Vec<f64>,
    noise: Vec<f64>,
}

fn draw_trial(
    rng: &mut ChaCha8Rng,
    config: &SimConfig,
    grid: &[f64],
    re_basis: &BSplineBasis,
) -> Result<TrialDraws> {
    let normal = |v: f64| Normal::new(0.0, v.sqrt()).map_err(|e| FlodeError::Config(e.to_string()));
    let y0_dist = normal(config.y0_variance)?;
    let d_dist = normal(config.sigma2_d)?;
    let e_dist = normal(config.sigma2)?;
    let forcings = (0..config.coefficients.len())
        .map(|_| draw_forcing(rng, grid, config.scale_range, config.shift_range))
        .collect();
    let y0 = y0_dist.sample(rng);
    let d: Vec<f64> = (0..re_basis.n_basis()).map(|_| d_dist.sample(rng)).collect();
    let m = re_basis.matrix();
    let random_intercept = (0..grid.len())
        .map(|j| (0..d.len()).map(|k| m[(j, k)] * d[k]).sum())
        .collect();
    let noise = (0..grid.len()).map(|_| e_dist.sample(rng)).collect();
    Ok(TrialDraws {
        forcings,
        y0,
        random_intercept,
        noise,
    })
}

fn to_matrix(rows: &[Vec<f64>], cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

/// Noise-free ODE trajectory by trapezoid quadrature of the integrated form.
pub fn flode_trajectory(
    grid: &[f64],
    alpha: f64,
    y0: f64,
    coefficients: &[Vec<f64>],
    forcings: &[Vec<f64>],
    random_intercept: &[f64],
) -> Vec<f64> {
    let jn = grid.len();
    let driver: Vec<f64> = (0..jn)
        .map(|j| {
            coefficients[0][j]
                + random_intercept[j]
                + forcings
                    .iter()
                    .zip(&coefficients[1..])
                    .map(|(x, b)| x[j] * b[j])
                    .sum::<f64>()
        })
        .collect();
    let mut out = vec![0.0; jn];
    decayed_cumulative_into(grid, &driver, alpha, &mut out);
    for (v, t) in out.iter_mut().zip(grid) {
        *v += y0 * (-alpha * t).exp();
    }
    out
}

/// `∫_0^t β(s, t) x(s) ds` at every grid time by trapezoid over grid points
/// `s ≤ t`.
pub fn historical_integral(surface: &Surface, forcing: &[f64]) -> Vec<f64> {
    let grid = &surface.grid;
    (0..grid.len())
        .map(|t| {
            if t == 0 {
                return 0.0;
            }
            let vals: Vec<f64> = (0..=t).map(|s| surface.values[(s, t)] * forcing[s]).collect();
            trapezoid_unchecked(&grid[..=t], &vals)
        })
        .collect()
}

/// Data from the functional ODE with random intercepts.
pub fn gen_flode_dataset(config: &SimConfig) -> Result<(FunctionalDataset, FlodeTruth)> {
    config.validate()?;
    let grid = config.grid();
    let jn = grid.len();
    let re_basis = BSplineBasis::new(&grid, config.random_effect_df, 3)?;
    let mut coefficients = vec![config.intercept.on_grid(&grid)];
    coefficients.extend(config.coefficients.iter().map(|c| c.on_grid(&grid)));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let p = config.coefficients.len();
    let mut ys = Vec::with_capacity(config.n_trials);
    let mut signal = Vec::with_capacity(config.n_trials);
    let mut xs = vec![Vec::with_capacity(config.n_trials); p];
    let mut deltas = Vec::with_capacity(config.n_trials);
    let mut y0 = Vec::with_capacity(config.n_trials);
    for _ in 0..config.n_trials {
        let draw = draw_trial(&mut rng, config, &grid, &re_basis)?;
        let clean = flode_trajectory(
            &grid,
            config.alpha,
            draw.y0,
            &coefficients,
            &draw.forcings,
            &draw.random_intercept,
        );
        ys.push(clean.iter().zip(&draw.noise).map(|(a, e)| a + e).collect::<Vec<_>>());
        signal.push(clean);
        for (dst, x) in xs.iter_mut().zip(draw.forcings) {
            dst.push(x);
        }
        deltas.push(draw.random_intercept);
        y0.push(draw.y0);
    }
    let dataset = FunctionalDataset::from_rows(
        grid.clone(),
        to_matrix(&ys, jn),
        xs.iter().map(|x| to_matrix(x, jn)).collect(),
    )?;
    let truth = FlodeTruth {
        alpha: config.alpha,
        grid,
        coefficients,
        random_intercepts: to_matrix(&deltas, jn),
        y0,
        signal: to_matrix(&signal, jn),
    };
    Ok((dataset, truth))
}

/// Data from a historical model with a bump surface for the first forcing,
/// `config.intercept` as the intercept curve and random intercepts.
pub fn gen_fhist_dataset(config: &SimConfig) -> Result<(FunctionalDataset, FhistTruth)> {
    config.validate()?;
    let grid = config.grid();
    let jn = grid.len();
    let re_basis = BSplineBasis::new(&grid, config.random_effect_df, 3)?;
    let surface = config.surface.on_grid(&grid);
    let intercept = config.intercept.on_grid(&grid);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let p = config.coefficients.len();
    let mut ys = Vec::with_capacity(config.n_trials);
    let mut signal = Vec::with_capacity(config.n_trials);
    let mut xs = vec![Vec::with_capacity(config.n_trials); p];
    let mut gammas = Vec::with_capacity(config.n_trials);
    for _ in 0..config.n_trials {
        let draw = draw_trial(&mut rng, config, &grid, &re_basis)?;
        let hist = historical_integral(&surface, &draw.forcings[0]);
        let clean: Vec<f64> = (0..jn)
            .map(|j| draw.random_intercept[j] + intercept[j] + hist[j])
            .collect();
        ys.push(clean.iter().zip(&draw.noise).map(|(a, e)| a + e).collect::<Vec<_>>());
        signal.push(clean);
        for (dst, x) in xs.iter_mut().zip(draw.forcings) {
            dst.push(x);
        }
        gammas.push(draw.random_intercept);
    }
    let dataset = FunctionalDataset::from_rows(
        grid.clone(),
        to_matrix(&ys, jn),
        xs.iter().map(|x| to_matrix(x, jn)).collect(),
    )?;
    let truth = FhistTruth {
        grid,
        surface,
        intercept,
        random_intercepts: to_matrix(&gammas, jn),
        signal: to_matrix(&signal, jn),
    };
    Ok((dataset, truth))
}

/// Dispatch on `config.truth_kind`.
pub fn gen_dataset(config: &SimConfig) -> Result<(FunctionalDataset, Truth)> {
    match config.truth_kind {
        TruthKind::Flode => gen_flode_dataset(config).map(|(d, t)| (d, Truth::Flode(t))),
        TruthKind::Fhist => gen_fhist_dataset(config).map(|(d, t)| (d, Truth::Fhist(t))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(kind: TruthKind) -> SimConfig {
        SimConfig {
            n_trials: 5,
            grid_size: 30,
            sigma2: 0.0,
            sigma2_d: 0.0,
            y0_variance: 0.0,
            truth_kind: kind,
            ..SimConfig::default()
        }
    }

    #[test]
    fn forcing_curve_unit() {
        let grid = equal_grid(21);
        let row = forcing_curve(&grid, 1.0, 0.0);
        for (v, t) in row.iter().zip(&grid) {
            assert_eq!(*v, (PI * t).sin());
        }
    }

    #[test]
    fn forcings_deterministic() {
        let grid = equal_grid(20);
        assert_eq!(gen_forcings(7, &grid, 11), gen_forcings(7, &grid, 11));
        assert_ne!(gen_forcings(7, &grid, 11), gen_forcings(7, &grid, 12));
    }

    #[test]
    fn scale_moments() {
        // recover scale_i from the peak of each curve on a fine grid
        let grid = equal_grid(2001);
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scales: Vec<f64> = (0..n).map(|_| uniform(&mut rng, (0.5, 2.0))).collect();
        let mean = scales.iter().sum::<f64>() / n as f64;
        let var = scales.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (1.5f64.powi(2) / 12.0 / n as f64).sqrt();
        assert!((mean - 1.25).abs() < 3.0 * se);
        assert!((var - 1.5f64.powi(2) / 12.0).abs() < 0.01);

        let x = gen_forcings(2000, &grid, 4);
        // sin(πt + c) with c in [0, π/2] reaches its maximum inside [0, 1]
        let peaks: Vec<f64> = (0..2000).map(|i| x.row(i).max()).collect();
        let pmean = peaks.iter().sum::<f64>() / 2000.0;
        let pse = (1.5f64.powi(2) / 12.0 / 2000.0).sqrt();
        assert!((pmean - 1.25).abs() < 3.0 * pse, "{pmean}");
    }

    #[test]
    fn zero_flode_trajectories() {
        let mut cfg = quiet(TruthKind::Flode);
        cfg.intercept = CurveSpec::zero();
        cfg.coefficients = vec![CurveSpec::zero()];
        let (ds, truth) = gen_flode_dataset(&cfg).unwrap();
        assert!(ds.responses().iter().all(|v| *v == 0.0));
        assert!(truth.signal.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flode_trajectories_satisfy_ode() {
        // central-difference residual of y' + αy - Σ B_p x_p - δ shrinks like h²
        let residual = |j: usize| -> f64 {
            let cfg = SimConfig {
                grid_size: j,
                sigma2: 0.0,
                sigma2_d: 0.0,
                n_trials: 3,
                ..SimConfig::default()
            };
            let (ds, truth) = gen_flode_dataset(&cfg).unwrap();
            let g = &truth.grid;
            let h = g[1] - g[0];
            let mut worst: f64 = 0.0;
            for i in 0..3 {
                let y = ds.response(i);
                let x = ds.forcing(1, i);
                for k in 1..j - 1 {
                    let dy = (y[k + 1] - y[k - 1]) / (2.0 * h);
                    let rhs = truth.coefficients[0][k] + truth.coefficients[1][k] * x[k] - cfg.alpha * y[k];
                    worst = worst.max((dy - rhs).abs());
                }
            }
            worst
        };
        let coarse = residual(101);
        let fine = residual(201);
        assert!(fine < 0.35 * coarse, "{coarse} -> {fine}");
        assert!(fine < 0.05);
    }

    #[test]
    fn buffering_carries_initial_position() {
        let cfg = SimConfig {
            alpha: 1.0,
            ..SimConfig::default()
        };
        let (_, truth) = gen_flode_dataset(&cfg).unwrap();
        // with slow decay the early trajectory stays near y(0)
        let j = 2;
        let mut hits = 0;
        for i in 0..cfg.n_trials {
            if (truth.signal[(i, j)] - truth.y0[i]).abs() < 0.5 * truth.y0[i].abs().max(1.0) {
                hits += 1;
            }
        }
        assert!(hits > 80);
        let corr_late = {
            let a: Vec<f64> = truth.y0.clone();
            let b: Vec<f64> = (0..cfg.n_trials).map(|i| truth.signal[(i, 25)]).collect();
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        assert!(corr_late > 0.2, "{corr_late}");
    }

    #[test]
    fn zero_fhist_trajectories() {
        let mut cfg = quiet(TruthKind::Fhist);
        cfg.intercept = CurveSpec::zero();
        cfg.surface.height = 0.0;
        let (ds, _) = gen_fhist_dataset(&cfg).unwrap();
        assert!(ds.responses().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn historical_integral_oracle() {
        let cfg = quiet(TruthKind::Fhist);
        let (ds, truth) = gen_fhist_dataset(&cfg).unwrap();
        let g = &truth.grid;
        for i in 0..cfg.n_trials {
            let x = ds.forcing(1, i);
            for t in 0..g.len() {
                let mut acc = 0.0;
                for s in 1..=t {
                    let f1 = cfg.surface.eval(g[s - 1], g[t]) * x[s - 1];
                    let f2 = cfg.surface.eval(g[s], g[t]) * x[s];
                    acc += 0.5 * (g[s] - g[s - 1]) * (f1 + f2);
                }
                let expect = acc + truth.intercept[t];
                assert!((ds.responses()[(i, t)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn surface_support() {
        let s = SurfaceSpec::default().on_grid(&equal_grid(20));
        for a in 0..20 {
            for b in 0..a {
                assert_eq!(s.at(a, b), 0.0);
            }
        }
        assert!(s.values.max() > 3.0);
    }

    #[test]
    fn seed_determinism() {
        let cfg = SimConfig {
            n_trials: 10,
            seed: 7,
            ..SimConfig::default()
        };
        let (a, ta) = gen_flode_dataset(&cfg).unwrap();
        let (b, tb) = gen_flode_dataset(&cfg).unwrap();
        assert_eq!(a.responses(), b.responses());
        assert_eq!(ta, tb);
        let fh = SimConfig {
            truth_kind: TruthKind::Fhist,
            ..cfg.clone()
        };
        assert_eq!(gen_dataset(&fh).unwrap().1, gen_dataset(&fh).unwrap().1);
    }

    #[test]
    fn config_validation() {
        let mut c = SimConfig::default();
        c.grid_size = 2;
        assert!(c.validate().is_err());
        let mut c = SimConfig::default();
        c.sigma2 = -1.0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::default();
        c.coefficients.clear();
        assert!(c.validate().is_err());
        assert!(SimConfig::default().validate().is_ok());
    }
}

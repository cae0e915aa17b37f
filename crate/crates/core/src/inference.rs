//! Pointwise bootstrap bands for the coefficient functions, resampling whole
//! trials with the buffering parameter held at its full-data estimate.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{assemble_bundle, DesignBundle, FunctionalDataset};
use crate::em::{fit_with_fixed_design, FitOptions, FlodeFit};
use crate::error::{FlodeError, Result};
use crate::quadrature::trapezoid_unchecked;
use crate::splines::BasisSystem;

/// Two-sided normal quantile for 95% bands.
pub const Z_95: f64 = 1.96;

/// Largest tolerated share of failed replicate fits.
pub const MAX_FAILURE_RATE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBand {
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub n_boot: usize,
}

impl CoefficientBand {
    /// `estimate ± 1.96 se`.
    pub fn from_se(grid: Vec<f64>, estimate: Vec<f64>, se: Vec<f64>, n_boot: usize) -> Self {
        let lower = estimate.iter().zip(&se).map(|(e, s)| e - Z_95 * s).collect();
        let upper = estimate.iter().zip(&se).map(|(e, s)| e + Z_95 * s).collect();
        CoefficientBand {
            grid,
            estimate,
            se,
            lower,
            upper,
            n_boot,
        }
    }

    /// `∫ 1{lower(t) ≤ truth(t) ≤ upper(t)} dt`, by trapezoid on the grid.
    pub fn coverage(&self, truth: &[f64]) -> Result<f64> {
        if truth.len() != self.grid.len() {
            return Err(FlodeError::Dimension(format!(
                "truth has {} values on a grid of {}",
                truth.len(),
                self.grid.len()
            )));
        }
        let inside: Vec<f64> = truth
            .iter()
            .enumerate()
            .map(|(j, v)| f64::from(self.lower[j] <= *v && *v <= self.upper[j]))
            .collect();
        let span = self.grid[self.grid.len() - 1] - self.grid[0];
        Ok(trapezoid_unchecked(&self.grid, &inside) / span)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// One band per coefficient function, intercept first.
    pub bands: Vec<CoefficientBand>,
    pub n_failed: usize,
}

/// SplitMix64 finalizer; decorrelates replicate seeds derived from one
/// master seed.
pub fn replicate_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` trial indices drawn with replacement.
pub fn resample_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Bootstrap bands from `n_boot` replicates seeded from `seed`.
pub fn bootstrap_bands(
    dataset: &FunctionalDataset,
    basis: &BasisSystem,
    fit: &FlodeFit,
    n_boot: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<BootstrapResult> {
    if n_boot < 2 {
        return Err(FlodeError::InvalidArgument(format!(
            "need at least 2 bootstrap replicates, got {n_boot}"
        )));
    }
    let n = dataset.n_trials();
    let samples: Vec<Vec<usize>> = (0..n_boot as u64)
        .map(|b| resample_indices(n, replicate_seed(seed, b)))
        .collect();
    bootstrap_with_indices(dataset, basis, fit, &samples, options)
}

/// Bootstrap bands from explicit resamples (each a list of `N` trial indices).
pub fn bootstrap_with_indices(
    dataset: &FunctionalDataset,
    basis: &BasisSystem,
    fit: &FlodeFit,
    samples: &[Vec<usize>],
    options: &FitOptions,
) -> Result<BootstrapResult> {
    if samples.len() < 2 {
        return Err(FlodeError::InvalidArgument(format!(
            "need at least 2 bootstrap replicates, got {}",
            samples.len()
        )));
    }
    let n = dataset.n_trials();
    if let Some(bad) = samples.iter().find(|s| s.len() != n || s.iter().any(|&i| i >= n)) {
        return Err(FlodeError::InvalidArgument(format!(
            "resample of length {} does not index {n} trials",
            bad.len()
        )));
    }
    if !fit.converged {
        warn!("bootstrapping around a fit that did not converge");
    }
    let design = assemble_bundle(dataset, fit.params.alpha, basis, &dataset.initial_positions())?;
    let replicates: Vec<Result<Vec<Vec<f64>>>> = samples
        .par_iter()
        .map(|idx| replicate(dataset, basis, &design, idx, options))
        .collect();

    let mut curves = Vec::with_capacity(samples.len());
    let mut n_failed = 0;
    for (b, r) in replicates.into_iter().enumerate() {
        match r {
            Ok(c) => curves.push(c),
            Err(e) => {
                warn!("bootstrap replicate {b} failed: {e}");
                n_failed += 1;
            }
        }
    }
    if n_failed as f64 > MAX_FAILURE_RATE * samples.len() as f64 || curves.len() < 2 {
        return Err(FlodeError::numerical(
            "bootstrap",
            format!("{n_failed} of {} replicate fits failed", samples.len()),
        ));
    }

    let grid = basis.grid().to_vec();
    let bands = (0..=fit.n_forcings())
        .map(|p| {
            let estimate = fit.coefficient_function(p);
            let se = pointwise_sd(curves.iter().map(|c| c[p].as_slice()), grid.len());
            CoefficientBand::from_se(grid.clone(), estimate, se, curves.len())
        })
        .collect();
    Ok(BootstrapResult { bands, n_failed })
}

fn replicate(
    dataset: &FunctionalDataset,
    basis: &BasisSystem,
    design: &DesignBundle,
    idx: &[usize],
    options: &FitOptions,
) -> Result<Vec<Vec<f64>>> {
    let data = dataset.select(idx);
    let fit = fit_with_fixed_design(&data, basis, design.select(idx), options)?;
    Ok(fit.coefficient_functions())
}

/// Sample standard deviation (denominator `n - 1`) at each grid point.
fn pointwise_sd<'a>(curves: impl Iterator<Item = &'a [f64]> + Clone, len: usize) -> Vec<f64> {
    let n = curves.clone().count() as f64;
    let mut mean = vec![0.0; len];
    for c in curves.clone() {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; len];
    for c in curves {
        for j in 0..len {
            var[j] += (c[j] - mean[j]).powi(2) / (n - 1.0);
        }
    }
    var.into_iter().map(f64::sqrt).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::fit;
    use crate::simulate::{gen_flode_dataset, SimConfig};

    fn small() -> (FunctionalDataset, BasisSystem, FlodeFit, FitOptions) {
        let cfg = SimConfig {
            n_trials: 15,
            grid_size: 20,
            seed: 3,
            ..SimConfig::default()
        };
        let (ds, _) = gen_flode_dataset(&cfg).unwrap();
        let basis = BasisSystem::cubic(ds.grid(), 8).unwrap();
        let opts = FitOptions {
            max_iter: 30,
            init_grid: crate::em::default_alpha_grid(9),
            ..FitOptions::default()
        };
        let f = fit(&ds, &basis, &opts).unwrap();
        (ds, basis, f, opts)
    }

    #[test]
    fn identical_resamples_collapse() {
        let (ds, basis, f, opts) = small();
        let idx: Vec<usize> = (0..15).map(|i| (i * 7) % 15).collect();
        let res = bootstrap_with_indices(&ds, &basis, &f, &[idx.clone(), idx.clone(), idx], &opts).unwrap();
        for band in &res.bands {
            let scale = band.estimate.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            assert!(band.se.iter().all(|s| *s < 1e-12 * scale));
        }
    }

    #[test]
    fn two_replicate_sd_identity() {
        let (ds, basis, f, opts) = small();
        let a: Vec<usize> = (0..15).collect();
        let b: Vec<usize> = (0..15).map(|i| i / 2).collect();
        let res = bootstrap_with_indices(&ds, &basis, &f, &[a.clone(), b.clone()], &opts).unwrap();
        let design = assemble_bundle(&ds, f.params.alpha, &basis, &ds.initial_positions()).unwrap();
        let ca = replicate(&ds, &basis, &design, &a, &opts).unwrap();
        let cb = replicate(&ds, &basis, &design, &b, &opts).unwrap();
        for p in 0..2 {
            for j in 0..20 {
                let expect = (ca[p][j] - cb[p][j]).abs() / 2f64.sqrt();
                assert!((res.bands[p].se[j] - expect).abs() < 1e-10 * expect.max(1.0));
            }
        }
    }

    #[test]
    fn bands_symmetric_and_reproducible() {
        let (ds, basis, f, opts) = small();
        let r1 = bootstrap_bands(&ds, &basis, &f, 6, 42, &opts).unwrap();
        let r2 = bootstrap_bands(&ds, &basis, &f, 6, 42, &opts).unwrap();
        assert_eq!(r1, r2);
        for band in &r1.bands {
            assert_eq!(band.n_boot, 6);
            for j in 0..band.grid.len() {
                assert!(band.lower[j] <= band.estimate[j] && band.estimate[j] <= band.upper[j]);
                let up = band.upper[j] - band.estimate[j];
                let down = band.estimate[j] - band.lower[j];
                assert!((up - down).abs() < 1e-12 * up.max(1.0));
                assert!((up - Z_95 * band.se[j]).abs() < 1e-12 * up.max(1.0));
            }
        }
    }

    #[test]
    fn resampling_unit_is_the_trial() {
        for s in 0..20 {
            let idx = resample_indices(37, replicate_seed(9, s));
            assert_eq!(idx.len(), 37);
            assert!(idx.iter().all(|&i| i < 37));
        }
        assert_ne!(replicate_seed(1, 0), replicate_seed(1, 1));
        assert_ne!(replicate_seed(1, 0), replicate_seed(2, 0));
    }

    #[test]
    fn rejects_bad_input() {
        let (ds, basis, f, opts) = small();
        assert!(bootstrap_bands(&ds, &basis, &f, 1, 0, &opts).is_err());
        let short = vec![vec![0usize; 3], vec![0usize; 3]];
        assert!(bootstrap_with_indices(&ds, &basis, &f, &short, &opts).is_err());
    }

    #[test]
    fn coverage_of_band() {
        let grid = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let band = CoefficientBand::from_se(grid, vec![0.0; 5], vec![1.0; 5], 10);
        assert_eq!(band.coverage(&[0.0; 5]).unwrap(), 1.0);
        assert_eq!(band.coverage(&[5.0; 5]).unwrap(), 0.0);
        // indicator 1,1,1,0,0: two full intervals plus half of the third
        let part = band.coverage(&[0.0, 0.0, 0.0, 3.0, 3.0]).unwrap();
        assert!((part - 0.625).abs() < 1e-12);
        assert!(band.coverage(&[0.0; 2]).is_err());
    }
}

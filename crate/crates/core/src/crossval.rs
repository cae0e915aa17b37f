//! K-fold cross-validated prediction error for the ODE model and the two
//! baselines.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_concurrent_cv, fit_historical_cv, predict_concurrent, predict_historical};
use crate::design::FunctionalDataset;
use crate::error::{FlodeError, Result};
use crate::inference::replicate_seed;
use crate::metrics::predict;
use crate::quadrature::trapezoid_unchecked;
use crate::study::{fit_flode, ModelSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Flode,
    Fhist,
    Fconc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Flode, Method::Fhist, Method::Fconc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Flode => "flode",
            Method::Fhist => "fhist",
            Method::Fconc => "fconc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = FlodeError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| FlodeError::InvalidArgument(format!("unknown method '{s}' (expected flode, fhist or fconc)")))
    }
}

/// Shuffle `0..n` and deal it into `k` folds of near-equal size; each fold is
/// returned sorted.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(FlodeError::InvalidArgument(format!(
            "fold count must lie in [2, {n}], got {k}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, i) in order.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn complement(n: usize, fold: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| fold.binary_search(i).is_err()).collect()
}

/// `∫ |ŷ_i - y_i| dt` for every row.
pub fn integrated_abs_errors(pred: &DMatrix<f64>, truth: &DMatrix<f64>, grid: &[f64]) -> Vec<f64> {
    (0..pred.nrows())
        .map(|i| {
            let abs: Vec<f64> = (0..grid.len()).map(|j| (pred[(i, j)] - truth[(i, j)]).abs()).collect();
            trapezoid_unchecked(grid, &abs)
        })
        .collect()
}

/// Fit `method` on `train` and predict the curves of `test`.
pub fn fit_and_predict(
    method: Method,
    train: &FunctionalDataset,
    test: &FunctionalDataset,
    settings: &ModelSettings,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let ridge_folds = |n: usize| settings.ridge_folds.min(n);
    match method {
        Method::Flode => {
            let fit = fit_flode(train, settings)?;
            predict(&fit.params, &fit.basis, test.forcings(), &test.initial_positions())
        }
        Method::Fhist => {
            let folds = kfold(train.n_trials(), ridge_folds(train.n_trials()), seed)?;
            let (fit, _) = fit_historical_cv(train, settings.hist_marginal_size, &folds)?;
            predict_historical(&fit, test.forcings())
        }
        Method::Fconc => {
            let folds = kfold(train.n_trials(), ridge_folds(train.n_trials()), seed)?;
            let (fit, _) = fit_concurrent_cv(train, settings.conc_basis, &folds)?;
            predict_concurrent(&fit, test.forcings())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub method: Method,
    /// Mean held-out error of each fold.
    pub fold_mape: Vec<f64>,
    pub fold_sizes: Vec<usize>,
    /// Mean over all trials of the held-out integrated absolute error.
    pub mape: f64,
}

pub fn cross_validate(
    dataset: &FunctionalDataset,
    methods: &[Method],
    folds: &[Vec<usize>],
    settings: &ModelSettings,
    seed: u64,
) -> Result<Vec<CvResult>> {
    let n = dataset.n_trials();
    let mut seen = vec![0usize; n];
    for &i in folds.iter().flatten() {
        if i >= n {
            return Err(FlodeError::InvalidArgument(format!("fold index {i} out of range")));
        }
        seen[i] += 1;
    }
    if seen.iter().any(|&c| c != 1) {
        return Err(FlodeError::InvalidArgument("folds must partition the trials".into()));
    }
    let jobs: Vec<(Method, usize)> = methods
        .iter()
        .flat_map(|&m| (0..folds.len()).map(move |f| (m, f)))
        .collect();
    let errors: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(m, f)| {
            let test = dataset.select(&folds[f]);
            let train = dataset.select(&complement(n, &folds[f]));
            let pred = fit_and_predict(m, &train, &test, settings, replicate_seed(seed, f as u64))?;
            Ok(integrated_abs_errors(&pred, test.responses(), dataset.grid()))
        })
        .collect();
    let mut errors = errors.into_iter();
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let mut fold_mape = Vec::with_capacity(folds.len());
        let mut total = 0.0;
        for fold in folds {
            let e = errors.next().expect("one result per job")?;
            total += e.iter().sum::<f64>();
            fold_mape.push(e.iter().sum::<f64>() / fold.len() as f64);
        }
        out.push(CvResult {
            method,
            fold_mape,
            fold_sizes: folds.iter().map(Vec::len).collect(),
            mape: total / n as f64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_flode_dataset, SimConfig};
    use proptest::prelude::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("pffr".parse::<Method>().is_err());
    }

    #[test]
    fn leave_one_out_folds() {
        let folds = kfold(7, 7, 3).unwrap();
        assert!(folds.iter().all(|f| f.len() == 1));
        assert!(kfold(7, 8, 0).is_err());
        assert!(kfold(7, 1, 0).is_err());
    }

    #[test]
    fn cross_validation_runs_every_method() {
        let cfg = SimConfig {
            n_trials: 12,
            grid_size: 15,
            seed: 4,
            ..SimConfig::default()
        };
        let (ds, _) = gen_flode_dataset(&cfg).unwrap();
        let settings = ModelSettings {
            n_basis: 6,
            hist_marginal_size: 5,
            conc_basis: 6,
            fit: crate::em::FitOptions {
                max_iter: 20,
                init_grid: crate::em::default_alpha_grid(5),
                ..Default::default()
            },
            ..ModelSettings::default()
        };
        let folds = kfold(12, 3, 1).unwrap();
        let res = cross_validate(&ds, &Method::ALL, &folds, &settings, 9).unwrap();
        assert_eq!(res.len(), 3);
        for r in &res {
            assert!(r.mape.is_finite() && r.mape > 0.0);
            let weighted: f64 = r.fold_mape.iter().zip(&r.fold_sizes).map(|(m, s)| m * *s as f64).sum();
            assert!((weighted / 12.0 - r.mape).abs() < 1e-12);
        }
        let again = cross_validate(&ds, &Method::ALL, &folds, &settings, 9).unwrap();
        assert_eq!(res, again);
        let overlapping = vec![vec![0, 1], (1..12).collect()];
        assert!(cross_validate(&ds, &[Method::Fconc], &overlapping, &settings, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_trials(n in 2usize..60, k_frac in 0.0f64..1.0, seed: u64) {
            let k = 2 + ((n - 2) as f64 * k_frac) as usize;
            let folds = kfold(n, k, seed).unwrap();
            prop_assert_eq!(folds.len(), k);
            let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}

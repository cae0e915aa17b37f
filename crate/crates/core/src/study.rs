//! Simulation studies comparing the ODE model with the baselines on
//! replicated synthetic datasets.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_historical_cv, predict_historical, HIST_MARGINAL_SIZE, RIDGE_CV_FOLDS};
use crate::crossval::{fit_and_predict, integrated_abs_errors, kfold, Method};
use crate::design::FunctionalDataset;
use crate::em::{fit, FitOptions, FlodeFit};
use crate::error::{FlodeError, Result};
use crate::inference::replicate_seed;
use crate::metrics::{alpha_error, flode_surface, integrated_error, predict, surface_ise, Surface};
use crate::simulate::{gen_dataset, SimConfig, Truth};
use crate::splines::{BasisSystem, DEFAULT_LAMBDA};

/// Everything needed to fit the three estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub n_basis: usize,
    pub lambda: f64,
    pub fit: FitOptions,
    pub hist_marginal_size: usize,
    pub conc_basis: usize,
    /// Folds used to pick baseline penalty weights.
    pub ridge_folds: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            n_basis: 20,
            lambda: DEFAULT_LAMBDA,
            fit: FitOptions::default(),
            hist_marginal_size: HIST_MARGINAL_SIZE,
            conc_basis: 20,
            ridge_folds: RIDGE_CV_FOLDS,
        }
    }
}

impl ModelSettings {
    pub fn basis(&self, grid: &[f64]) -> Result<BasisSystem> {
        BasisSystem::new(grid, self.n_basis, 3, self.lambda)
    }
}

pub fn fit_flode(dataset: &FunctionalDataset, settings: &ModelSettings) -> Result<FlodeFit> {
    fit(dataset, &settings.basis(dataset.grid())?, &settings.fit)
}

/// One row of a comparison report. Entries that do not apply to a method or
/// a data-generating model are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub replicate: usize,
    pub method: Method,
    pub alpha_truth: Option<f64>,
    pub alpha_error: Option<f64>,
    pub ie_b0: Option<f64>,
    pub ie_b1: Option<f64>,
    pub ise: Option<f64>,
    pub mape: f64,
}

pub struct ReplicateOutcome {
    pub rows: Vec<ReportRow>,
    pub flode_fit: Option<FlodeFit>,
}

/// Data seed of replicate `r`.
pub fn replicate_data_seed(seed: u64, r: usize) -> u64 {
    replicate_seed(seed, r as u64)
}

/// Independent evaluation curves drawn from the same generator.
pub fn evaluation_set(sim: &SimConfig, n_eval: usize, seed: u64) -> Result<FunctionalDataset> {
    let cfg = SimConfig {
        n_trials: n_eval,
        seed: replicate_seed(seed, u64::MAX),
        ..sim.clone()
    };
    Ok(gen_dataset(&cfg)?.0)
}

fn truth_surface(truth: &Truth) -> Result<Surface> {
    match truth {
        Truth::Flode(t) => flode_surface(t.alpha, &t.coefficients[1], &t.grid),
        Truth::Fhist(t) => Ok(t.surface.clone()),
    }
}

fn mape_of(pred: &DMatrix<f64>, eval: &FunctionalDataset) -> f64 {
    let e = integrated_abs_errors(pred, eval.responses(), eval.grid());
    e.iter().sum::<f64>() / e.len() as f64
}

/// Fit every method on one simulated training set and score it against the
/// truth and the evaluation curves.
pub fn run_replicate(
    sim: &SimConfig,
    settings: &ModelSettings,
    methods: &[Method],
    eval: &FunctionalDataset,
    replicate: usize,
    seed: u64,
) -> Result<ReplicateOutcome> {
    let data_seed = replicate_data_seed(seed, replicate);
    let cfg = SimConfig {
        seed: data_seed,
        ..sim.clone()
    };
    let (train, truth) = gen_dataset(&cfg)?;
    let grid = train.grid().to_vec();
    let true_surface = truth_surface(&truth)?;
    let alpha_truth = match &truth {
        Truth::Flode(t) => Some(t.alpha),
        Truth::Fhist(_) => None,
    };
    let mut rows = Vec::with_capacity(methods.len());
    let mut flode_fit = None;
    for &method in methods {
        let ridge_seed = replicate_seed(data_seed, 1);
        let mut row = ReportRow {
            replicate,
            method,
            alpha_truth,
            alpha_error: None,
            ie_b0: None,
            ie_b1: None,
            ise: None,
            mape: f64::NAN,
        };
        match method {
            Method::Flode => {
                let f = fit_flode(&train, settings)?;
                let b = f.coefficient_functions();
                if let Truth::Flode(t) = &truth {
                    row.alpha_error = Some(alpha_error(t.alpha, f.params.alpha));
                    row.ie_b0 = Some(integrated_error(&t.coefficients[0], &b[0], &grid)?);
                    row.ie_b1 = Some(integrated_error(&t.coefficients[1], &b[1], &grid)?);
                }
                let est = flode_surface(f.params.alpha, &b[1], &grid)?;
                row.ise = Some(surface_ise(&est, &true_surface)?);
                let pred = predict(&f.params, &f.basis, eval.forcings(), &eval.initial_positions())?;
                row.mape = mape_of(&pred, eval);
                flode_fit = Some(f);
            }
            Method::Fhist => {
                let folds = kfold(train.n_trials(), settings.ridge_folds.min(train.n_trials()), ridge_seed)?;
                let (h, _) = fit_historical_cv(&train, settings.hist_marginal_size, &folds)?;
                row.ise = Some(surface_ise(h.surface(), &true_surface)?);
                let pred = predict_historical(&h, eval.forcings())?;
                row.mape = mape_of(&pred, eval);
            }
            Method::Fconc => {
                let pred = fit_and_predict(Method::Fconc, &train, eval, settings, ridge_seed)?;
                row.mape = mape_of(&pred, eval);
            }
        }
        rows.push(row);
    }
    Ok(ReplicateOutcome { rows, flode_fit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub n_replicates: usize,
    pub n_eval: usize,
    pub methods: Vec<Method>,
}

/// Rows for every replicate and method, ordered by replicate then method.
pub fn run_comparison(
    sim: &SimConfig,
    settings: &ModelSettings,
    compare: &CompareConfig,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    if compare.n_replicates == 0 || compare.n_eval == 0 || compare.methods.is_empty() {
        return Err(FlodeError::Config(
            "comparison needs at least one replicate, one evaluation curve and one method".into(),
        ));
    }
    let eval = evaluation_set(sim, compare.n_eval, seed)?;
    let per_rep: Vec<Result<Vec<ReportRow>>> = (0..compare.n_replicates)
        .into_par_iter()
        .map(|r| run_replicate(sim, settings, &compare.methods, &eval, r, seed).map(|o| o.rows))
        .collect();
    let mut rows = Vec::new();
    for r in per_rep {
        rows.extend(r?);
    }
    Ok(rows)
}

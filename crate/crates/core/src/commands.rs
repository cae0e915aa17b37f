//! The command-line workflows. Each command reads its inputs, writes CSV or
//! JSON outputs with a `.meta.json` sidecar into the output directory, and
//! returns the paths it wrote. Outputs depend only on the inputs and seed.

use std::fs;
use std::path::{Path, PathBuf};

use crate::crossval::{cross_validate, kfold};
use crate::design::FunctionalDataset;
use crate::em::FlodeFit;
use crate::error::{FlodeError, Result};
use crate::inference::bootstrap_bands;
use crate::io::{csv_bytes, ingest, json_bytes, opt_field, write_dataset, write_with_meta, FitRecord, Metadata, RunConfig, VERSION};
use crate::metrics::flode_surface;
use crate::simulate::gen_dataset;
use crate::study::{fit_flode, run_comparison};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    Bootstrap,
    Surface,
    Cv,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Bootstrap => "bootstrap",
            Command::Surface => "surface",
            Command::Cv => "cv",
            Command::Compare => "compare",
        }
    }
}

/// Resolved inputs of one invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: RunConfig,
    pub data: Option<PathBuf>,
    /// Previously written `fit.json`, for `bootstrap` and `surface`.
    pub fit: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Invocation {
    fn meta(&self, command: Command) -> Metadata {
        let inputs = [&self.data, &self.fit]
            .into_iter()
            .flatten()
            .map(|p| p.display().to_string())
            .collect();
        Metadata {
            software: "flode".into(),
            version: VERSION.into(),
            command: command.name().into(),
            seed: self.config.seed,
            inputs,
            config: self.config.clone(),
        }
    }

    fn dataset(&self, command: Command) -> Result<FunctionalDataset> {
        let path = self
            .data
            .as_ref()
            .ok_or_else(|| FlodeError::Config(format!("{} needs --data <csv>", command.name())))?;
        ingest(path, self.config.grid_size)
    }

    fn load_or_fit(&self, command: Command) -> Result<(FlodeFit, Option<FunctionalDataset>)> {
        match &self.fit {
            Some(path) => Ok((FitRecord::load(path)?.to_fit()?, None)),
            None => {
                let data = self.dataset(command)?;
                let fit = fit_flode(&data, &self.config.model_settings())?;
                Ok((fit, Some(data)))
            }
        }
    }

    fn write(&self, name: &str, bytes: &[u8], command: Command, written: &mut Vec<PathBuf>) -> Result<()> {
        let path = self.out_dir.join(name);
        write_with_meta(&path, bytes, &self.meta(command))?;
        written.push(path);
        Ok(())
    }
}

pub fn run(command: Command, inv: &Invocation) -> Result<Vec<PathBuf>> {
    inv.config.validate()?;
    fs::create_dir_all(&inv.out_dir)?;
    let mut written = Vec::new();
    match command {
        Command::Simulate => simulate(inv, &mut written)?,
        Command::Fit => fit_cmd(inv, &mut written)?,
        Command::Bootstrap => bootstrap(inv, &mut written)?,
        Command::Surface => surface(inv, &mut written)?,
        Command::Cv => cv(inv, &mut written)?,
        Command::Compare => compare(inv, &mut written)?,
    }
    Ok(written)
}

fn simulate(inv: &Invocation, written: &mut Vec<PathBuf>) -> Result<()> {
    let (data, truth) = gen_dataset(&inv.config.sim_config())?;
    let mut buf = Vec::new();
    write_dataset(&mut buf, &data)?;
    inv.write("data.csv", &buf, Command::Simulate, written)?;
    inv.write("truth.json", &json_bytes(&truth)?, Command::Simulate, written)
}

fn coefficient_csv(fit: &FlodeFit) -> Result<Vec<u8>> {
    let curves = fit.coefficient_functions();
    let names: Vec<String> = (0..curves.len()).map(|p| format!("B{p}")).collect();
    let mut header = vec!["t"];
    header.extend(names.iter().map(String::as_str));
    let rows = fit.basis.grid().iter().enumerate().map(|(j, t)| {
        let mut r = vec![t.to_string()];
        r.extend(curves.iter().map(|c| c[j].to_string()));
        r
    });
    csv_bytes(&header, rows)
}

fn fit_cmd(inv: &Invocation, written: &mut Vec<PathBuf>) -> Result<()> {
    let data = inv.dataset(Command::Fit)?;
    let fit = fit_flode(&data, &inv.config.model_settings())?;
    if !fit.converged {
        log::warn!("fit stopped after {} iterations without converging", fit.n_iter);
    }
    let record = FitRecord::from_fit(&fit, data.trial_ids());
    inv.write("fit.json", &json_bytes(&record)?, Command::Fit, written)?;
    inv.write("coefficients.csv", &coefficient_csv(&fit)?, Command::Fit, written)
}

fn bootstrap(inv: &Invocation, written: &mut Vec<PathBuf>) -> Result<()> {
    let (fit, fitted_data) = inv.load_or_fit(Command::Bootstrap)?;
    let data = match fitted_data {
        Some(d) => d,
        None => inv.dataset(Command::Bootstrap)?,
    };
    if data.grid() != fit.basis.grid() || data.n_forcings() != fit.n_forcings() {
        return Err(FlodeError::Config(
            "fit does not match the dataset (grid or number of forcings differs)".into(),
        ));
    }
    let res = bootstrap_bands(
        &data,
        &fit.basis,
        &fit,
        inv.config.n_boot,
        inv.config.seed,
        &inv.config.fit_options(),
    )?;
    if res.n_failed > 0 {
        log::warn!("{} bootstrap replicates failed and were skipped", res.n_failed);
    }
    for (p, band) in res.bands.iter().enumerate() {
        let rows = (0..band.grid.len()).map(|j| {
            vec![
                band.grid[j].to_string(),
                band.estimate[j].to_string(),
                band.se[j].to_string(),
                band.lower[j].to_string(),
                band.upper[j].to_string(),
            ]
        });
        let bytes = csv_bytes(&["t", "estimate", "se", "lower", "upper"], rows)?;
        inv.write(&format!("band_B{p}.csv"), &bytes, Command::Bootstrap, written)?;
    }
    Ok(())
}

fn surface(inv: &Invocation, written: &mut Vec<PathBuf>) -> Result<()> {
    let (fit, _) = inv.load_or_fit(Command::Surface)?;
    let grid = fit.basis.grid();
    for p in 1..=fit.n_forcings() {
        let s = flode_surface(fit.params.alpha, &fit.coefficient_function(p), grid)?;
        let rows = (0..grid.len())
            .flat_map(|a| (0..grid.len()).map(move |b| (a, b)))
            .map(|(a, b)| vec![grid[a].to_string(), grid[b].to_string(), s.at(a, b).to_string()]);
        let bytes = csv_bytes(&["s", "t", "value"], rows)?;
        inv.write(&format!("surface_x{p}.csv"), &bytes, Command::Surface, written)?;
    }
    Ok(())
}

fn cv(inv: &Invocation, written: &mut Vec<PathBuf>) -> Result<()> {
    let data = inv.dataset(Command::Cv)?;
    let cfg = &inv.config;
    if cfg.cv_folds > data.n_trials() {
        return Err(FlodeError::Config(format!(
            "cv_folds: {} folds for {} trials",
            cfg.cv_folds,
            data.n_trials()
        )));
    }
    let folds = kfold(data.n_trials(), cfg.cv_folds, cfg.seed)?;
    let results = cross_validate(&data, &cfg.methods, &folds, &cfg.model_settings(), cfg.seed)?;
    let mut rows = Vec::new();
    for r in &results {
        for (f, (m, size)) in r.fold_mape.iter().zip(&r.fold_sizes).enumerate() {
            rows.push(vec![r.method.to_string(), (f + 1).to_string(), size.to_string(), m.to_string()]);
        }
        rows.push(vec![r.method.to_string(), "all".into(), data.n_trials().to_string(), r.mape.to_string()]);
    }
    let bytes = csv_bytes(&["method", "fold", "n_test", "mape"], rows)?;
    inv.write("cv.csv", &bytes, Command::Cv, written)
}

fn compare(inv: &Invocation, written: &mut Vec<PathBuf>) -> Result<()> {
    let cfg = &inv.config;
    let rows = run_comparison(&cfg.sim_config(), &cfg.model_settings(), &cfg.compare_config(), cfg.seed)?;
    let fields = rows.iter().map(|r| {
        vec![
            r.replicate.to_string(),
            r.method.to_string(),
            opt_field(r.alpha_truth),
            opt_field(r.alpha_error),
            opt_field(r.ie_b0),
            opt_field(r.ie_b1),
            opt_field(r.ise),
            r.mape.to_string(),
        ]
    });
    let header = ["replicate", "method", "alpha_truth", "alpha_error", "ie_b0", "ie_b1", "ise", "mape"];
    inv.write("compare.csv", &csv_bytes(&header, fields)?, Command::Compare, written)
}

/// Read a config file, applying a seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

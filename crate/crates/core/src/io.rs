//! Long-format CSV ingestion and export, run configuration, and the JSON
//! record of a fitted model.
//!
//! Dataset CSV: header `trial_id,time,y,x1[,x2,...]`, one row per
//! observation. Each trial's times are rescaled to `[0, 1]` and its curves
//! are linearly interpolated onto an equally spaced grid.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::crossval::Method;
use crate::design::FunctionalDataset;
use crate::em::{default_alpha_grid, FitOptions, FlodeFit, FlodeParams, PosteriorMoments, MIN_ALPHA};
use crate::error::{FlodeError, Result};
use crate::simulate::{equal_grid, SimConfig};
use crate::splines::{BasisSystem, DEFAULT_LAMBDA};
use crate::study::{CompareConfig, ModelSettings};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

struct TrialRows {
    id: String,
    times: Vec<f64>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    first_line: usize,
}

fn parse_err(line: usize, message: impl Into<String>) -> FlodeError {
    FlodeError::Parse {
        line,
        message: message.into(),
    }
}

/// Linear interpolation of `(t, v)` at each point of `at`; `t` strictly
/// increasing and covering `at`.
pub fn interpolate(t: &[f64], v: &[f64], at: &[f64]) -> Vec<f64> {
    at.iter()
        .map(|&x| {
            let hi = t.partition_point(|&s| s <= x).clamp(1, t.len() - 1);
            let lo = hi - 1;
            if x == t[lo] {
                return v[lo];
            }
            if x == t[hi] {
                return v[hi];
            }
            let w = (x - t[lo]) / (t[hi] - t[lo]);
            v[lo] + w * (v[hi] - v[lo])
        })
        .collect()
}

/// Read a long-format dataset and put every trial on `target_j` equally
/// spaced points of `[0, 1]`. Trials keep their order of first appearance.
pub fn ingest_reader<R: Read>(reader: R, target_j: usize) -> Result<FunctionalDataset> {
    if target_j < 3 {
        return Err(FlodeError::InvalidArgument(format!(
            "target grid needs at least 3 points, got {target_j}"
        )));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[..3] != ["trial_id", "time", "y"] {
        return Err(parse_err(1, "header must start with trial_id,time,y followed by x1,x2,..."));
    }
    for (p, name) in cols[3..].iter().enumerate() {
        if *name != format!("x{}", p + 1) {
            return Err(parse_err(1, format!("column {} should be named x{}, found '{name}'", p + 4, p + 1)));
        }
    }
    let n_forcings = cols.len() - 3;

    let mut trials: Vec<TrialRows> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != cols.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", cols.len(), rec.len())));
        }
        let num = |c: usize| -> Result<f64> {
            let field = &rec[c];
            if field.is_empty() {
                return Err(parse_err(line, format!("missing value for {}", cols[c])));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("{} = '{field}' is not a number", cols[c])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("{} is not finite", cols[c])));
            }
            Ok(v)
        };
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty trial_id"));
        }
        let time = num(1)?;
        let y = num(2)?;
        let xs = (0..n_forcings).map(|p| num(3 + p)).collect::<Result<Vec<_>>>()?;
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            trials.push(TrialRows {
                id,
                times: Vec::new(),
                y: Vec::new(),
                x: vec![Vec::new(); n_forcings],
                first_line: line,
            });
            trials.len() - 1
        });
        let tr = &mut trials[slot];
        if let Some(&last) = tr.times.last() {
            if time <= last {
                return Err(parse_err(
                    line,
                    format!("times of trial '{}' must be strictly increasing ({time} after {last})", tr.id),
                ));
            }
        }
        tr.times.push(time);
        tr.y.push(y);
        for (p, v) in xs.into_iter().enumerate() {
            tr.x[p].push(v);
        }
    }
    if trials.is_empty() {
        return Err(parse_err(2, "no observations"));
    }

    let grid = equal_grid(target_j);
    let n = trials.len();
    let mut responses = DMatrix::zeros(n, target_j);
    let mut forcings = vec![DMatrix::zeros(n, target_j); n_forcings];
    for (i, tr) in trials.iter().enumerate() {
        if tr.times.len() < 3 {
            return Err(parse_err(
                tr.first_line,
                format!("trial '{}' has {} observations, need at least 3", tr.id, tr.times.len()),
            ));
        }
        let t0 = tr.times[0];
        let span = tr.times[tr.times.len() - 1] - t0;
        let scaled: Vec<f64> = tr.times.iter().map(|t| (t - t0) / span).collect();
        for (j, v) in interpolate(&scaled, &tr.y, &grid).into_iter().enumerate() {
            responses[(i, j)] = v;
        }
        for p in 0..n_forcings {
            for (j, v) in interpolate(&scaled, &tr.x[p], &grid).into_iter().enumerate() {
                forcings[p][(i, j)] = v;
            }
        }
    }
    let ids = trials.into_iter().map(|t| t.id).collect();
    FunctionalDataset::new(grid, responses, forcings, ids)
}

pub fn ingest(path: &Path, target_j: usize) -> Result<FunctionalDataset> {
    let file = fs::File::open(path)?;
    ingest_reader(file, target_j)
}

/// Write a dataset in the long format read by [`ingest`].
pub fn write_dataset<W: Write>(writer: W, dataset: &FunctionalDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["trial_id".to_string(), "time".into(), "y".into()];
    header.extend((1..=dataset.n_forcings()).map(|p| format!("x{p}")));
    w.write_record(&header)?;
    for i in 0..dataset.n_trials() {
        for (j, t) in dataset.grid().iter().enumerate() {
            let mut rec = vec![dataset.trial_ids()[i].clone(), t.to_string(), dataset.responses()[(i, j)].to_string()];
            rec.extend(dataset.forcings().iter().map(|x| x[(i, j)].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Settings shared by every command, read from TOML. Unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_basis: usize,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub alpha_bounds: (f64, f64),
    /// Points of the initial search grid on `[0, 20]`.
    pub alpha_grid_points: usize,
    pub accelerate: bool,
    pub random_effects: bool,
    pub n_boot: usize,
    pub cv_folds: usize,
    pub seed: u64,
    /// Points of the grid that ingested data are interpolated onto.
    pub grid_size: usize,
    pub hist_marginal_size: usize,
    pub conc_basis: usize,
    pub ridge_folds: usize,
    pub methods: Vec<Method>,
    pub n_replicates: usize,
    pub n_eval: usize,
    /// Data-generating settings for `simulate` and `compare`; its `seed` is
    /// replaced by the run seed.
    pub simulate: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = ModelSettings::default();
        RunConfig {
            n_basis: s.n_basis,
            lambda: DEFAULT_LAMBDA,
            tol: s.fit.tol,
            max_iter: s.fit.max_iter,
            alpha_bounds: s.fit.alpha_bounds,
            alpha_grid_points: 41,
            accelerate: true,
            random_effects: true,
            n_boot: 200,
            cv_folds: 10,
            seed: 0,
            grid_size: 50,
            hist_marginal_size: s.hist_marginal_size,
            conc_basis: s.conc_basis,
            ridge_folds: s.ridge_folds,
            methods: Method::ALL.to_vec(),
            n_replicates: 50,
            n_eval: 1000,
            simulate: SimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| FlodeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| FlodeError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(FlodeError::Config(format!("{field}: {msg}")));
        if self.n_basis < 4 {
            return bad("n_basis", format!("must be at least 4, got {}", self.n_basis));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda", format!("must lie in (0, 1], got {}", self.lambda));
        }
        if !(self.tol > 0.0) {
            return bad("tol", format!("must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return bad("max_iter", "must be at least 1".into());
        }
        let (lo, hi) = self.alpha_bounds;
        if !(lo >= MIN_ALPHA && hi > lo && hi.is_finite()) {
            return bad("alpha_bounds", format!("need {MIN_ALPHA} <= lower < upper, got ({lo}, {hi})"));
        }
        if self.alpha_grid_points == 0 {
            return bad("alpha_grid_points", "must be at least 1".into());
        }
        if self.n_boot < 2 {
            return bad("n_boot", format!("must be at least 2, got {}", self.n_boot));
        }
        if self.cv_folds < 2 {
            return bad("cv_folds", format!("must be at least 2, got {}", self.cv_folds));
        }
        if self.grid_size < 3 {
            return bad("grid_size", format!("must be at least 3, got {}", self.grid_size));
        }
        if self.n_basis > self.grid_size {
            return bad("n_basis", format!("exceeds grid_size {}", self.grid_size));
        }
        if self.hist_marginal_size < 4 {
            return bad("hist_marginal_size", "must be at least 4".into());
        }
        if self.conc_basis < 4 {
            return bad("conc_basis", "must be at least 4".into());
        }
        if self.ridge_folds < 2 {
            return bad("ridge_folds", "must be at least 2".into());
        }
        if self.methods.is_empty() {
            return bad("methods", "list at least one of flode, fhist, fconc".into());
        }
        if self.n_replicates == 0 {
            return bad("n_replicates", "must be at least 1".into());
        }
        if self.n_eval == 0 {
            return bad("n_eval", "must be at least 1".into());
        }
        self.simulate.validate().map_err(|e| match e {
            FlodeError::Config(m) => FlodeError::Config(format!("simulate.{m}")),
            other => other,
        })?;
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            alpha_bounds: self.alpha_bounds,
            random_effects: self.random_effects,
            init_grid: default_alpha_grid(self.alpha_grid_points),
            fixed_alpha: None,
            accelerate: self.accelerate,
        }
    }

    pub fn model_settings(&self) -> ModelSettings {
        ModelSettings {
            n_basis: self.n_basis,
            lambda: self.lambda,
            fit: self.fit_options(),
            hist_marginal_size: self.hist_marginal_size,
            conc_basis: self.conc_basis,
            ridge_folds: self.ridge_folds,
        }
    }

    pub fn compare_config(&self) -> CompareConfig {
        CompareConfig {
            n_replicates: self.n_replicates,
            n_eval: self.n_eval,
            methods: self.methods.clone(),
        }
    }

    /// Simulation settings with the run seed applied.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            ..self.simulate.clone()
        }
    }
}

/// Serialized form of a fit: parameters, basis settings and convergence
/// history. Posterior moments are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRecord {
    pub version: String,
    pub alpha: f64,
    /// Spline coefficients, intercept block first.
    pub b_blocks: Vec<Vec<f64>>,
    pub y0: Vec<f64>,
    pub sigma2: f64,
    pub sigma2_d: f64,
    pub sigma2_b: f64,
    pub n_basis: usize,
    pub degree: usize,
    pub lambda: f64,
    pub grid: Vec<f64>,
    pub trial_ids: Vec<String>,
    pub initial_loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
}

impl FitRecord {
    pub fn from_fit(fit: &FlodeFit, trial_ids: &[String]) -> Self {
        let k = fit.basis.n_basis();
        FitRecord {
            version: VERSION.to_string(),
            alpha: fit.params.alpha,
            b_blocks: fit.params.b.chunks(k).map(<[f64]>::to_vec).collect(),
            y0: fit.params.y0.clone(),
            sigma2: fit.params.sigma2,
            sigma2_d: fit.params.sigma2_d,
            sigma2_b: fit.params.sigma2_b,
            n_basis: k,
            degree: fit.basis.degree(),
            lambda: fit.basis.lambda(),
            grid: fit.basis.grid().to_vec(),
            trial_ids: trial_ids.to_vec(),
            initial_loglik: fit.initial_loglik,
            loglik_trace: fit.loglik_trace.clone(),
            n_iter: fit.n_iter,
            converged: fit.converged,
        }
    }

    /// Rebuild the fit; posterior moments come back as zeros.
    pub fn to_fit(&self) -> Result<FlodeFit> {
        let basis = BasisSystem::new(&self.grid, self.n_basis, self.degree, self.lambda)?;
        if self.b_blocks.is_empty() || self.b_blocks.iter().any(|b| b.len() != self.n_basis) {
            return Err(FlodeError::Dimension(format!(
                "every coefficient block must have {} entries",
                self.n_basis
            )));
        }
        Ok(FlodeFit {
            params: FlodeParams {
                alpha: self.alpha,
                b: self.b_blocks.concat(),
                y0: self.y0.clone(),
                sigma2: self.sigma2,
                sigma2_d: self.sigma2_d,
                sigma2_b: self.sigma2_b,
            },
            moments: PosteriorMoments::zeros(self.y0.len(), self.n_basis),
            basis,
            loglik_trace: self.loglik_trace.clone(),
            initial_loglik: self.initial_loglik,
            objective_trace: Vec::new(),
            n_iter: self.n_iter,
            converged: self.converged,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Contents of the `<file>.meta.json` written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub software: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub config: RunConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Write `bytes` to `path` and its metadata sidecar.
pub fn write_with_meta(path: &Path, bytes: &[u8], meta: &Metadata) -> Result<()> {
    fs::write(path, bytes)?;
    let mut json = serde_json::to_vec_pretty(meta)?;
    json.push(b'\n');
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// CSV bytes from a header and rows of pre-formatted fields.
pub fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| FlodeError::Io(e.into_error()))
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Empty field for absent values.
pub fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_flode_dataset, SimConfig};
    use proptest::prelude::*;

    fn parse(text: &str, j: usize) -> Result<FunctionalDataset> {
        ingest_reader(text.as_bytes(), j)
    }

    #[test]
    fn interpolates_onto_target_grid() {
        let ds = parse("trial_id,time,y,x1\na,0,0,1\na,0.5,1,1\na,1,2,1\n", 5).unwrap();
        assert_eq!(ds.response(0), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(ds.forcing(1, 0), vec![1.0; 5]);
    }

    #[test]
    fn rescales_each_trial_to_unit_interval() {
        let text = "trial_id,time,y,x1\nb,10,0,0\nb,15,5,2\nb,30,20,4\na,0,1,1\na,1,1,1\na,2,1,1\n";
        let ds = parse(text, 3).unwrap();
        assert_eq!(ds.trial_ids(), &["b".to_string(), "a".to_string()]);
        assert_eq!(ds.response(0), vec![0.0, 10.0, 20.0]);
        let x = ds.forcing(1, 0);
        assert!((x[1] - (2.0 + 2.0 / 3.0)).abs() < 1e-12 && x[2] == 4.0);
        assert_eq!(ds.response(1), vec![1.0; 3]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let line_of = |text: &str| match parse(text, 5) {
            Err(FlodeError::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(line_of("trial_id,time,y,x1\na,0,0,1\na,zz,1,1\n"), 3);
        assert_eq!(line_of("trial_id,time,y,x1\na,0,0,1\na,0.5,1,\na,1,2,1\n"), 3);
        assert_eq!(line_of("trial_id,time,y,x1\na,0,0,1\na,0.5,1,1\na,0.4,2,1\n"), 4);
        // trial a has two observations only
        assert_eq!(line_of("trial_id,time,y,x1\na,0,0,1\nb,0,0,1\nb,1,0,1\nb,2,0,1\na,1,1,1\n"), 2);
        assert_eq!(line_of("trial_id,time,y\na,0,0\n"), 1);
        assert_eq!(line_of("trial_id,time,y,x2\na,0,0,1\n"), 1);
        assert_eq!(line_of("trial_id,time,y,x1\na,0,0,1,7\n"), 2);
    }

    #[test]
    fn on_grid_data_pass_through() {
        let (ds, _) = gen_flode_dataset(&SimConfig {
            n_trials: 4,
            grid_size: 11,
            ..SimConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = ingest_reader(buf.as_slice(), 11).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn run_config_defaults_and_rejections() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.n_basis, 20);
        assert_eq!(cfg.cv_folds, 10);
        let cfg = RunConfig::from_toml("n_boot = 50\n[simulate]\nalpha = 12.0\n").unwrap();
        assert_eq!(cfg.n_boot, 50);
        assert_eq!(cfg.simulate.alpha, 12.0);
        for (text, field) in [
            ("n_bases = 3", "n_bases"),
            ("lambda = 2.0", "lambda"),
            ("alpha_bounds = [0.0, 5.0]", "alpha_bounds"),
            ("methods = []", "methods"),
            ("[simulate]\nsigma2 = -1.0", "sigma2"),
            ("[simulate]\nbogus = 1", "bogus"),
        ] {
            let msg = RunConfig::from_toml(text).unwrap_err().to_string();
            assert!(msg.contains(field), "{msg}");
        }
    }

    #[test]
    fn fit_record_round_trip() {
        let (ds, _) = gen_flode_dataset(&SimConfig {
            n_trials: 8,
            grid_size: 15,
            ..SimConfig::default()
        })
        .unwrap();
        let basis = BasisSystem::cubic(ds.grid(), 6).unwrap();
        let opts = FitOptions {
            max_iter: 10,
            init_grid: default_alpha_grid(5),
            ..FitOptions::default()
        };
        let fit = crate::em::fit(&ds, &basis, &opts).unwrap();
        let rec = FitRecord::from_fit(&fit, ds.trial_ids());
        let text = String::from_utf8(json_bytes(&rec).unwrap()).unwrap();
        let back: FitRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rec);
        let rebuilt = back.to_fit().unwrap();
        assert_eq!(rebuilt.params, fit.params);
        assert_eq!(rebuilt.coefficient_functions(), fit.coefficient_functions());
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(sidecar_path(Path::new("out/fit.json")), PathBuf::from("out/fit.json.meta.json"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn export_ingest_round_trip(n in 1usize..5, j in 3usize..20, seed: u64) {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let grid = equal_grid(j);
            let y = DMatrix::from_fn(n, j, |_, _| rand::Rng::random_range(&mut rng, -1e3..1e3));
            let x = DMatrix::from_fn(n, j, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
            let ds = FunctionalDataset::from_rows(grid, y, vec![x]).unwrap();
            let mut buf = Vec::new();
            write_dataset(&mut buf, &ds).unwrap();
            prop_assert_eq!(ingest_reader(buf.as_slice(), j).unwrap(), ds);
        }

        #[test]
        fn interpolation_reproduces_lines(a in -5.0f64..5.0, b in -5.0f64..5.0, m in 3usize..12) {
            let t: Vec<f64> = (0..m).map(|i| (i as f64 / (m - 1) as f64).powi(2)).collect();
            let v: Vec<f64> = t.iter().map(|x| a + b * x).collect();
            let at = equal_grid(17);
            for (x, y) in at.iter().zip(interpolate(&t, &v, &at)) {
                prop_assert!((y - (a + b * x)).abs() < 1e-12);
            }
        }
    }
}

//! Historical and concurrent functional regression baselines with
//! cross-validated penalty weights.

use flode::baselines::{fit_concurrent_cv, fit_historical_cv, predict_concurrent, predict_historical};
use flode::crossval::kfold;
use flode::metrics::mape;
use flode::simulate::{gen_dataset, SimConfig, TruthKind};

fn main() -> flode::Result<()> {
    let cfg = SimConfig {
        n_trials: 60,
        truth_kind: TruthKind::Fhist,
        seed: 8,
        ..SimConfig::default()
    };
    let (train, _) = gen_dataset(&cfg)?;
    let (test, _) = gen_dataset(&SimConfig { seed: 9, n_trials: 30, ..cfg })?;
    let folds = kfold(train.n_trials(), 5, 0)?;

    let (hist, sel) = fit_historical_cv(&train, 15, &folds)?;
    println!("historical: ridge weight {:e}", sel.ridge_weight);
    let pred = predict_historical(&hist, test.forcings())?;
    println!("historical: held-out MAPE {:.4}", mape(&pred, test.responses(), test.grid())?);

    let (conc, sel) = fit_concurrent_cv(&train, 20, &folds)?;
    println!("concurrent: ridge weight {:e}", sel.ridge_weight);
    let pred = predict_concurrent(&conc, test.forcings())?;
    println!("concurrent: held-out MAPE {:.4}", mape(&pred, test.responses(), test.grid())?);
    Ok(())
}

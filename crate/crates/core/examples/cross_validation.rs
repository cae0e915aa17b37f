//! K-fold cross-validated prediction error of all three estimators.

use flode::crossval::{cross_validate, kfold, Method};
use flode::simulate::{gen_flode_dataset, SimConfig};
use flode::study::ModelSettings;

fn main() -> flode::Result<()> {
    let cfg = SimConfig {
        n_trials: 40,
        alpha: 0.5,
        seed: 4,
        ..SimConfig::default()
    };
    let (data, _) = gen_flode_dataset(&cfg)?;
    let folds = kfold(data.n_trials(), 5, 1)?;
    let results = cross_validate(&data, &Method::ALL, &folds, &ModelSettings::default(), 1)?;
    for r in &results {
        let folds: Vec<String> = r.fold_mape.iter().map(|m| format!("{m:.3}")).collect();
        println!("{:>6}: MAPE {:.4}  folds [{}]", r.method, r.mape, folds.join(", "));
    }
    Ok(())
}

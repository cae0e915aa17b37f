//! Pointwise 95% bootstrap bands for the coefficient functions.

use flode::bootstrap_bands;
use flode::simulate::{gen_flode_dataset, SimConfig};
use flode::study::{fit_flode, ModelSettings};

fn main() -> flode::Result<()> {
    let cfg = SimConfig {
        n_trials: 100,
        alpha: 12.0,
        seed: 5,
        ..SimConfig::default()
    };
    let (data, truth) = gen_flode_dataset(&cfg)?;
    let settings = ModelSettings::default();
    let fit = fit_flode(&data, &settings)?;
    let res = bootstrap_bands(&data, &fit.basis, &fit, 40, 11, &settings.fit)?;

    println!("failed replicates: {}", res.n_failed);
    for (p, band) in res.bands.iter().enumerate() {
        let cov = band.coverage(&truth.coefficients[p])?;
        let mid = band.grid.len() / 2;
        println!(
            "B{p}: at t={:.2} estimate {:.3} in [{:.3}, {:.3}]; fraction of time truth covered {cov:.2}",
            band.grid[mid], band.estimate[mid], band.lower[mid], band.upper[mid]
        );
    }
    Ok(())
}

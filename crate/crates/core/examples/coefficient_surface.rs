//! The implied coefficient surface e^{-α(t-s)} B(s) and its error against the
//! generating surface.

use flode::metrics::{flode_surface, surface_ise};
use flode::simulate::{gen_flode_dataset, SimConfig};
use flode::study::{fit_flode, ModelSettings};

fn main() -> flode::Result<()> {
    let cfg = SimConfig {
        n_trials: 50,
        alpha: 4.0,
        sigma2: 1e-6,
        sigma2_d: 0.0,
        seed: 2,
        ..SimConfig::default()
    };
    let (data, truth) = gen_flode_dataset(&cfg)?;
    let fit = fit_flode(&data, &ModelSettings::default())?;
    let grid = data.grid();

    let est = flode_surface(fit.params.alpha, &fit.coefficient_function(1), grid)?;
    let tru = flode_surface(truth.alpha, &truth.coefficients[1], grid)?;
    println!("surface ISE {:.3e}", surface_ise(&est, &tru)?);
    for (s, t) in [(10, 20), (20, 10), (25, 40)] {
        println!(
            "beta(s={:.2}, t={:.2}): estimate {:+.4} truth {:+.4}",
            grid[s],
            grid[t],
            est.at(s, t),
            tru.at(s, t)
        );
    }
    Ok(())
}

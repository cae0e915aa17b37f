//! Simulate data from the ODE model and fit it by EM.

use flode::metrics::integrated_error;
use flode::simulate::{gen_flode_dataset, SimConfig};
use flode::study::{fit_flode, ModelSettings};

fn main() -> flode::Result<()> {
    let cfg = SimConfig {
        n_trials: 100,
        alpha: 12.0,
        seed: 3,
        ..SimConfig::default()
    };
    let (data, truth) = gen_flode_dataset(&cfg)?;
    let fit = fit_flode(&data, &ModelSettings::default())?;

    println!("alpha: true {} estimated {:.3}", truth.alpha, fit.params.alpha);
    println!(
        "sigma2 {:.4}  sigma2_d {:.3}  sigma2_b {:.4}",
        fit.params.sigma2, fit.params.sigma2_d, fit.params.sigma2_b
    );
    println!("iterations {} converged {}", fit.n_iter, fit.converged);
    for (p, est) in fit.coefficient_functions().iter().enumerate() {
        let ie = integrated_error(&truth.coefficients[p], est, data.grid())?;
        println!("B{p}: integrated error {ie:+.4}");
    }
    Ok(())
}

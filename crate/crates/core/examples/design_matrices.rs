//! Build the integrated-form design for a simulated dataset at a given α.

use flode::assemble_bundle;
use flode::simulate::{gen_flode_dataset, SimConfig};
use flode::splines::BasisSystem;

fn main() -> flode::Result<()> {
    let cfg = SimConfig {
        n_trials: 5,
        grid_size: 30,
        seed: 1,
        ..SimConfig::default()
    };
    let (data, truth) = gen_flode_dataset(&cfg)?;
    let basis = BasisSystem::cubic(data.grid(), 10)?;
    let bundle = assemble_bundle(&data, truth.alpha, &basis, &data.initial_positions())?;

    println!("trials: {}", bundle.n_trials());
    println!("trial design x*: {} x {}", bundle.xstar[0].nrows(), bundle.xstar[0].ncols());
    println!("random-intercept design D*: {} x {}", bundle.dstar.nrows(), bundle.dstar.ncols());

    // Fitted curve of trial 0 with arbitrary coefficients.
    let b = vec![0.1; bundle.xstar[0].ncols()];
    let fitted = bundle.fitted(0, &b, None);
    println!("fitted start {:.4}, observed start {:.4}", fitted[0], data.response(0)[0]);
    Ok(())
}

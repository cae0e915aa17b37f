//! A small replicated comparison of the three estimators on simulated data.

use flode::crossval::Method;
use flode::simulate::SimConfig;
use flode::study::{run_comparison, CompareConfig, ModelSettings};

fn main() -> flode::Result<()> {
    let sim = SimConfig {
        n_trials: 50,
        alpha: 4.0,
        ..SimConfig::default()
    };
    let cmp = CompareConfig {
        n_replicates: 3,
        n_eval: 200,
        methods: Method::ALL.to_vec(),
    };
    let rows = run_comparison(&sim, &ModelSettings::default(), &cmp, 21)?;
    println!("replicate method  alpha_err   ISE       MAPE");
    for r in &rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:>9} {:<7} {:>9} {:>9} {:>8.4}",
            r.replicate,
            r.method,
            f(r.alpha_error),
            f(r.ise),
            r.mape
        );
    }
    Ok(())
}

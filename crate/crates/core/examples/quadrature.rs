//! Trapezoid integrals, including the exponentially weighted running integral
//! behind the model's integrated form.

use flode::quadrature::{cumulative_trapezoid, decayed_cumulative, trapezoid};
use flode::simulate::equal_grid;

fn main() -> flode::Result<()> {
    let grid = equal_grid(201);
    let f: Vec<f64> = grid.iter().map(|t| (3.0 * t).cos()).collect();
    let exact = (3.0f64).sin() / 3.0;
    println!("∫cos(3t) = {:.8} (exact {exact:.8})", trapezoid(&grid, &f)?);

    let running = cumulative_trapezoid(&grid, &f)?;
    println!("running integral at t=0.5: {:.8} (exact {:.8})", running[100], (1.5f64).sin() / 3.0);

    // ∫_0^t e^{-α(t-s)} ds = (1 - e^{-αt}) / α
    let ones = vec![1.0; grid.len()];
    for alpha in [0.5, 4.0, 12.0, 40.0] {
        let d = decayed_cumulative(&grid, &ones, alpha);
        let exact = (1.0 - (-alpha as f64).exp()) / alpha;
        println!("alpha={alpha:>5}: decayed integral at t=1 {:.6} (exact {exact:.6})", d[200]);
    }
    Ok(())
}

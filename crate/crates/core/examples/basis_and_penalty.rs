//! Cubic B-spline basis on a grid and the blended ridge/difference penalty.

use flode::splines::{build_penalty, BasisSystem};
use flode::simulate::equal_grid;

fn main() -> flode::Result<()> {
    let grid = equal_grid(50);
    let basis = BasisSystem::cubic(&grid, 20)?;
    let theta = basis.matrix();
    println!("basis matrix: {} x {}", theta.nrows(), theta.ncols());

    let worst = (0..theta.nrows())
        .map(|j| (theta.row(j).sum() - 1.0).abs())
        .fold(0.0, f64::max);
    println!("max deviation of row sums from 1: {worst:.2e}");

    let coefs: Vec<f64> = (0..20).map(|k| (k as f64 / 3.0).sin()).collect();
    let curve = basis.curve(&coefs);
    println!("curve at t=0, 0.5, 1: {:.4} {:.4} {:.4}", curve[0], curve[25], curve[49]);

    for lambda in [1.0, 0.1, 0.001] {
        let p = build_penalty(20, lambda)?;
        let eig = p.symmetric_eigen().eigenvalues;
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("lambda={lambda}: smallest penalty eigenvalue {min:.3e}");
    }
    Ok(())
}

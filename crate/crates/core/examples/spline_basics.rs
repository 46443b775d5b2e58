//! Evaluate a cubic B-spline basis and fit a spline to sin(pi x).

use kanconv::spline::{bspline_basis, fit_spline_to_function, spline_value, KnotGrid};

fn main() -> kanconv::Result<()> {
    let grid = KnotGrid::uniform(-1.0, 1.0, 10, 3)?;
    println!(
        "{} basis functions, knot spacing {:.3}",
        grid.basis_count(),
        grid.spacing()
    );

    let b = bspline_basis(&grid, 0.37);
    let active: Vec<String> = b
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| format!("B{i}={v:.4}"))
        .collect();
    println!("x = 0.37: {} (sum {:.12})", active.join(" "), b.iter().sum::<f64>());

    let f = |x: f64| (std::f64::consts::PI * x).sin();
    let samples: Vec<(f64, f64)> = (0..=200).map(|i| -1.0 + i as f64 / 100.0).map(|x| (x, f(x))).collect();
    let coeffs = fit_spline_to_function(&grid, &samples)?;
    let worst = samples
        .iter()
        .map(|&(x, y)| (spline_value(&coeffs.0, &grid, x) - y).abs())
        .fold(0.0, f64::max);
    println!("least-squares fit of sin(pi x): max error {worst:.2e}");
    Ok(())
}

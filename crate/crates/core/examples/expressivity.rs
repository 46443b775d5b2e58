//! Shapes a single learnable activation can take: a shifted ReLU and a
//! piecewise brightness boost.

use kanconv::spline::{fit_spline_to_function, spline_value, KnotGrid};

fn max_error(grid: &KnotGrid, f: impl Fn(f64) -> f64, skip: impl Fn(f64) -> bool) -> kanconv::Result<f64> {
    let (lo, hi) = grid.range();
    let xs: Vec<f64> = (0..=4000).map(|i| lo + (hi - lo) * i as f64 / 4000.0).collect();
    let samples: Vec<_> = xs.iter().map(|&x| (x, f(x))).collect();
    let c = fit_spline_to_function(grid, &samples)?;
    Ok(xs
        .iter()
        .filter(|&&x| !skip(x))
        .map(|&x| (spline_value(&c.0, grid, x) - f(x)).abs())
        .fold(0.0, f64::max))
}

fn main() -> kanconv::Result<()> {
    let relu = max_error(&KnotGrid::uniform(-2.0, 2.0, 16, 3)?, |x| (x - 1.0).max(0.0), |_| false)?;
    println!("max(0, x - 1) on [-2, 2], G=16: max error {relu:.4}");

    // Dark pixels are halved, bright ones doubled; the jump at 0.5 cannot be
    // matched by a continuous spline, so its neighbourhood is excluded.
    let boost = |x: f64| if x >= 0.5 { 2.0 * x } else { 0.5 * x };
    let err = max_error(&KnotGrid::uniform(0.0, 1.0, 16, 3)?, boost, |x| (x - 0.5).abs() <= 0.1)?;
    println!("brightness boost on [0, 1], G=16: max error {err:.4} away from the threshold");
    Ok(())
}

//! Move a fitted spline onto a wider grid without changing its shape.

use kanconv::spline::{extend_grid, fit_spline_to_function, spline_value, KnotGrid};

fn main() -> kanconv::Result<()> {
    let grid = KnotGrid::uniform(-1.0, 1.0, 10, 3)?;
    let xs: Vec<f64> = (0..=300).map(|i| -1.0 + 2.0 * i as f64 / 300.0).collect();
    let samples: Vec<_> = xs.iter().map(|&x| (x, (std::f64::consts::PI * x).sin())).collect();
    let coeffs = fit_spline_to_function(&grid, &samples)?;

    for new_g in [10, 30] {
        let (wide, moved) = extend_grid(&grid, &coeffs, (-3.0, 3.0), new_g, &xs)?;
        let rms = (xs
            .iter()
            .map(|&x| (spline_value(&moved.0, &wide, x) - spline_value(&coeffs.0, &grid, x)).powi(2))
            .sum::<f64>()
            / xs.len() as f64)
            .sqrt();
        println!("[-1, 1] G=10 -> [-3, 3] G={new_g}: RMS change on the old range {rms:.2e}");
    }
    Ok(())
}

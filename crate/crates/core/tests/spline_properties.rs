use kanconv::spline::{
    bspline_basis, extend_grid, fit_spline_to_function, spline_derivative, spline_value, KnotGrid, SplineCoeffs,
};
use kanconv::{Tape, Tensor};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = KnotGrid> {
    (-3.0..0.0f64, 0.5..4.0f64, 2usize..20, 1usize..5)
        .prop_map(|(lo, width, g, k)| KnotGrid::uniform(lo, lo + width, g, k).unwrap())
}

fn uniform_xs(grid: &KnotGrid, n: usize) -> Vec<f64> {
    let (lo, hi) = grid.range();
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partition_of_unity(grid in grid_strategy(), t in 0.0..1.0f64) {
        let (lo, hi) = grid.range();
        let x = lo + t * (hi - lo);
        let s: f64 = bspline_basis(&grid, x).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn compact_support(grid in grid_strategy(), x in -10.0..10.0f64) {
        let b = bspline_basis(&grid, x);
        prop_assert_eq!(b.len(), grid.basis_count());
        prop_assert!(b.iter().filter(|v| **v != 0.0).count() <= grid.degree() + 1);
        if !grid.in_support(x) {
            prop_assert!(b.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn polynomials_up_to_degree_are_reproduced(grid in grid_strategy(), a in proptest::collection::vec(-2.0..2.0f64, 5)) {
        let k = grid.degree();
        let poly = |x: f64| a.iter().take(k + 1).rev().fold(0.0, |acc, c| acc * x + c);
        let xs = uniform_xs(&grid, 8 * grid.basis_count());
        let samples: Vec<_> = xs.iter().map(|&x| (x, poly(x))).collect();
        let c = fit_spline_to_function(&grid, &samples).unwrap();
        let scale = 1.0 + xs.iter().map(|&x| poly(x).abs()).fold(0.0, f64::max);
        for &x in &xs {
            prop_assert!((spline_value(&c.0, &grid, x) - poly(x)).abs() < 1e-8 * scale);
        }
    }

    #[test]
    fn fit_residual_is_orthogonal_to_basis(grid in grid_strategy(), seed in 0u64..1000) {
        let xs = uniform_xs(&grid, 6 * grid.basis_count());
        let f = |x: f64| (x * 1.7 + seed as f64).sin() + (x * x * 0.3).cos();
        let samples: Vec<_> = xs.iter().map(|&x| (x, f(x))).collect();
        let c = fit_spline_to_function(&grid, &samples).unwrap();
        let mut dot = vec![0.0; grid.basis_count()];
        for &x in &xs {
            let r = spline_value(&c.0, &grid, x) - f(x);
            for (d, b) in dot.iter_mut().zip(bspline_basis(&grid, x)) {
                *d += r * b;
            }
        }
        prop_assert!(dot.iter().all(|d| d.abs() < 1e-8), "{dot:?}");
    }

    #[test]
    fn coefficient_gradient_is_the_basis(grid in grid_strategy(), t in 0.0..1.0f64, seed in any::<u64>()) {
        let (lo, hi) = grid.range();
        let x = lo + t * (hi - lo);
        let nb = grid.basis_count();
        let coeffs: Vec<f64> = (0..nb).map(|i| ((i as u64 ^ seed) % 7) as f64 - 3.0).collect();
        let mut tape = Tape::new();
        let c = tape.param(&Tensor::from_vec(coeffs));
        let xv = tape.param(&Tensor::from_vec(vec![x]));
        let y = tape.spline(c, &grid, xv).unwrap();
        let y = tape.sum(y);
        tape.backward(y).unwrap();
        prop_assert_eq!(tape.grad(c).unwrap(), &bspline_basis(&grid, x)[..]);
    }

    #[test]
    fn input_gradient_matches_differences(grid in grid_strategy(), t in 0.0..1.0f64) {
        let (lo, hi) = grid.range();
        let x = lo + t * (hi - lo);
        let h = grid.spacing();
        let to_knot = grid.knots().iter().map(|k| (k - x).abs()).fold(f64::INFINITY, f64::min);
        prop_assume!(to_knot > 1e-3 * h);
        let coeffs: Vec<f64> = (0..grid.basis_count()).map(|i| (i as f64 * 0.9).sin()).collect();
        let eps = 1e-6 * h;
        let fd = (spline_value(&coeffs, &grid, x + eps) - spline_value(&coeffs, &grid, x - eps)) / (2.0 * eps);
        let an = spline_derivative(&coeffs, &grid, x);
        prop_assert!((fd - an).abs() < 1e-5 * an.abs().max(1.0), "{fd} vs {an}");
    }
}

fn extension_rms(new_g: usize) -> f64 {
    let grid = KnotGrid::uniform(-1.0, 1.0, 10, 3).unwrap();
    let samples: Vec<_> = uniform_xs(&grid, 301)
        .into_iter()
        .map(|x| (x, (std::f64::consts::PI * x).sin()))
        .collect();
    let c = fit_spline_to_function(&grid, &samples).unwrap();
    let xs = uniform_xs(&grid, 500);
    let (g2, c2) = extend_grid(&grid, &c, (-3.0, 3.0), new_g, &xs).unwrap();
    (xs.iter()
        .map(|&x| (spline_value(&c2.0, &g2, x) - spline_value(&c.0, &grid, x)).powi(2))
        .sum::<f64>()
        / xs.len() as f64)
        .sqrt()
}

#[test]
fn sin_extension_to_wider_grid() {
    // Same knot spacing on the wider range: the old knots are a subset.
    let rms = extension_rms(30);
    assert!(rms < 1e-2, "{rms}");
    // Keeping ten intervals triples the spacing, so the refit can only
    // approximate the old shape.
    let coarse = extension_rms(10);
    assert!(coarse < 2e-2, "{coarse}");
}

#[test]
fn zero_coefficients_fit_zero_target() {
    let grid = KnotGrid::uniform(-1.0, 1.0, 10, 3).unwrap();
    let samples: Vec<_> = uniform_xs(&grid, 100).into_iter().map(|x| (x, 0.0)).collect();
    let c = fit_spline_to_function(&grid, &samples).unwrap();
    assert!(c.0.iter().all(|v| v.abs() < 1e-10));
    assert_eq!(SplineCoeffs::zeros(&grid).0.len(), 13);
}

//! A KAN convolution whose activations are all scaled identities computes
//! exactly what an ordinary convolution with those scales as weights does.

use kanconv::layers::{GridSpec, KanActivation, Layer, LayerSpec};
use kanconv::spline::fit_spline_to_function;
use kanconv::{Model, Tensor};

fn main() -> kanconv::Result<()> {
    let grid = GridSpec::default().build()?;
    let (lo, hi) = grid.range();
    let line: Vec<_> = (0..=200)
        .map(|i| lo + (hi - lo) * i as f64 / 200.0)
        .map(|x| (x, x))
        .collect();
    let identity = fit_spline_to_function(&grid, &line)?;

    let kan_spec = LayerSpec::KanConv {
        in_channels: 1,
        out_channels: 1,
        kernel: (3, 3),
        stride: 1,
        padding: 1,
        grid: GridSpec::default(),
    };
    let conv_spec = LayerSpec::Conv {
        in_channels: 1,
        out_channels: 1,
        kernel: (3, 3),
        stride: 1,
        padding: 1,
    };
    let mut kan = Model::from_specs("kan", &[1, 5, 5], &[kan_spec], 0)?;
    let mut conv = Model::from_specs("conv", &[1, 5, 5], &[conv_spec], 0)?;

    // A 3x3 edge detector.
    let kernel = [-1.0, -1.0, -1.0, -1.0, 8.0, -1.0, -1.0, -1.0, -1.0];
    let Layer::Conv(c) = &mut conv.layers[0] else {
        unreachable!()
    };
    c.weight.data_mut().copy_from_slice(&kernel);
    c.bias.data_mut().fill(0.0);
    let Layer::KanConv(k) = &mut kan.layers[0] else {
        unreachable!()
    };
    for (a, &w) in kernel.iter().enumerate() {
        let coeffs = kanconv::spline::SplineCoeffs(identity.0.iter().map(|v| v * w).collect());
        k.bank
            .set_activation(a, &KanActivation::new(1.0, 0.0, coeffs, grid.clone())?)?;
    }

    let x = Tensor::new(
        vec![1, 1, 5, 5],
        (0..25).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect(),
    )?;
    let (p, q) = (kan.predict(&x)?, conv.predict(&x)?);
    let diff = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "output shape {:?}, max difference from the ordinary convolution {diff:.2e}",
        p.shape()
    );
    Ok(())
}

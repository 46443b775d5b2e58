//! Compare reverse-mode gradients of a small KAN network with central
//! differences.

use kanconv::gradcheck::gradient_check;
use kanconv::layers::{GridSpec, LayerSpec, Mode};
use kanconv::{Model, Tensor};

fn main() -> kanconv::Result<()> {
    let specs = [
        LayerSpec::KanConv {
            in_channels: 1,
            out_channels: 2,
            kernel: (3, 3),
            stride: 1,
            padding: 0,
            grid: GridSpec::default(),
        },
        LayerSpec::Flatten,
        LayerSpec::KanLinear {
            n_in: 8,
            n_out: 3,
            grid: GridSpec::default(),
        },
        LayerSpec::LogSoftmax,
    ];
    let model = Model::from_specs("check", &[1, 4, 4], &specs, 11)?;
    let x = Tensor::new(
        vec![1, 1, 4, 4],
        (0..16).map(|i| (i as f64 * 0.37).sin() * 0.8).collect(),
    )?;
    let err = gradient_check(
        |tape, xv| {
            let b = model.bind(tape, false);
            let outs = model.forward(tape, xv, &b, Mode::Train)?;
            tape.cross_entropy(*outs.last().unwrap(), &[2])
        },
        &x,
        1e-6,
    )?;
    println!("max relative gradient error with respect to the input: {err:.2e}");
    Ok(())
}

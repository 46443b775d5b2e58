//! Dump the learnable activations of a KAN layer as CSV.

use kanconv::cli::export_splines;
use kanconv::layers::{GridSpec, LayerSpec};
use kanconv::Model;

fn main() -> kanconv::Result<()> {
    let spec = LayerSpec::KanLinear {
        n_in: 2,
        n_out: 1,
        grid: GridSpec::default(),
    };
    let model = Model::from_specs("tiny", &[2], &[spec], 0)?;
    let csv = export_splines(&model, 0, 9)?;
    print!("{csv}");
    Ok(())
}

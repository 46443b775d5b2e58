//! Save a model to the binary weight format and load it back.

use std::path::Path;

use kanconv::config::ModelConfig;
use kanconv::{weights, Tensor};

fn main() -> kanconv::Result<()> {
    let config = ModelConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/kkan_small.cfg"))?;
    let model = config.build(42)?;
    let path = std::env::temp_dir().join("kkan_small_example.kanc");
    weights::save(&model, &path)?;
    let loaded = weights::load(&path)?;

    let x = Tensor::full(&[1, 1, 28, 28], 0.25);
    let same = model.predict(&x)?.data() == loaded.predict(&x)?.data();
    let size = std::fs::metadata(&path)?.len();
    println!(
        "{} bytes written to {}; identical predictions after reload: {same}",
        size,
        path.display()
    );
    std::fs::remove_file(&path)?;
    Ok(())
}

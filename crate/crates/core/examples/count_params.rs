//! Parameter counts for every bundled architecture.

use std::path::Path;

use kanconv::config::ModelConfig;

fn main() -> kanconv::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut paths: Vec<_> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();
    println!("{:<24} {:>10} {:>10}", "model", "exact", "formula");
    for path in paths.iter().filter(|p| p.extension().is_some_and(|e| e == "cfg")) {
        let model = ModelConfig::load(path)?.build(0)?;
        let c = model.count_parameters();
        println!("{:<24} {:>10} {:>10}", model.name, c.exact, c.formula);
    }
    Ok(())
}

//! Load a Planetoid-format dataset (`<name>.content` and `<name>.cites`),
//! print its statistics and split it vertically between two parties.
//!
//! Usage: `load_planetoid [DIR] [NAME]`. Without arguments a synthetic graph
//! is written to a temporary directory and read back.

use std::path::PathBuf;

use fedvgcn::graph::synthetic::{write_planetoid, SyntheticConfig};
use fedvgcn::graph::{five_fold, load_planetoid_dir, split_vertical};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let tmp = tempfile::tempdir()?;
    let dir = match args.first() {
        Some(d) => PathBuf::from(d),
        None => {
            let d = SyntheticConfig::default().generate(1);
            write_planetoid(&d, tmp.path())?;
            tmp.path().to_path_buf()
        }
    };
    let d = load_planetoid_dir(&dir, args.get(1).map(String::as_str))?;
    println!("{}: {}", d.name, d.stats());
    println!("loader report: {:?}", d.report);
    if let Some(delta) = d.check_reference() {
        println!("reference {}: {}", delta.expected, if delta.is_exact() { "match" } else { "MISMATCH" });
    }

    let (a, b) = split_vertical(&d, 0.5, 0.5, 0)?;
    for v in [&a, &b] {
        println!(
            "{:?}: {} features, {} edges, labels: {}",
            v.party,
            v.features.ncols(),
            v.edges.len(),
            v.labels.is_some()
        );
    }
    let folds = five_fold(d.num_nodes(), 0)?;
    println!("fold sizes (train/test): {:?}", folds.iter().map(|f| (f.train.len(), f.test.len())).collect::<Vec<_>>());
    Ok(())
}

//! All four settings through the experiment harness, rendered as a
//! comparison table. Uses `$FEDVGCN_DATA_DIR/cora` when present, otherwise a
//! small synthetic graph with a shortened schedule.

use std::path::PathBuf;

use fedvgcn::graph::synthetic::{write_planetoid, SyntheticConfig};
use fedvgcn::harness::{self, ExperimentConfig, Setting};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let real = std::env::var_os("FEDVGCN_DATA_DIR").map(|d| PathBuf::from(d).join("cora"));
    let base = match real.filter(|p| p.join("cora.content").exists()) {
        Some(dir) => ExperimentConfig { folds: 1, ..ExperimentConfig::new(dir, Some("cora"), Setting::Combined) },
        None => {
            let d =
                SyntheticConfig { num_nodes: 100, num_classes: 3, feature_dim: 30, ..Default::default() }.generate(4);
            write_planetoid(&d, tmp.path())?;
            ExperimentConfig {
                epochs: 10,
                hidden: vec![8],
                learning_rate: 5e-3,
                folds: 1,
                ..ExperimentConfig::new(tmp.path(), Some("synthetic"), Setting::Combined)
            }
        }
    };
    let mut records = Vec::new();
    for setting in Setting::ALL {
        let r = harness::run(&ExperimentConfig { setting, ..base.clone() })?;
        println!("{:<14} {:.4}  ({:.1}s)", r.label, r.mean_accuracy, r.wall_seconds);
        records.push(r);
    }
    let out = tmp.path().join("runs.jsonl");
    print!("\n{}", harness::compare(&records, Some(&out))?);
    println!("\nrecords written to {}", out.display());
    Ok(())
}

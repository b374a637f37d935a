//! Plaintext GraphSage with mean aggregation: five-fold training on a
//! synthetic citation-like graph, ReLU against the quadratic activation.

use fedvgcn::gnn::{train_plaintext, Activation, GraphInput, ModelSpec, TrainConfig};
use fedvgcn::graph::five_fold;
use fedvgcn::graph::synthetic::SyntheticConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = SyntheticConfig { num_nodes: 400, ..Default::default() }.generate(11);
    let input = GraphInput::from_dataset(&d)?;
    let folds = five_fold(d.num_nodes(), 11)?;
    let cfg = TrainConfig { epochs: 60, seed: 11, ..Default::default() };

    for activation in [Activation::Relu, Activation::Quad(1.0)] {
        let spec =
            ModelSpec { hidden: vec![32, 32], learning_rate: 2e-3, ..ModelSpec::new(d.num_classes(), activation) };
        let r = train_plaintext(&spec, &input, &d.labels, &folds, &cfg)?;
        let accs: Vec<String> = r.fold_accuracies.iter().map(|a| format!("{a:.3}")).collect();
        println!("{activation:?}: mean accuracy {:.3} (folds {})", r.mean_accuracy, accs.join(" "));
    }
    Ok(())
}

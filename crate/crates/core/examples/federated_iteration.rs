//! One encrypted training iteration between the passive party, the active
//! party and the key-holding server, checked against the same step taken on
//! the combined plaintext data.

use fedvgcn::gnn::{train_step, Activation, GraphInput, ModelSpec, SageModel};
use fedvgcn::graph::split_vertical;
use fedvgcn::graph::synthetic::SyntheticConfig;
use fedvgcn::paillier::KeySize;
use fedvgcn::protocol::{FederatedSession, SessionConfig, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = SyntheticConfig { num_nodes: 12, num_classes: 3, feature_dim: 10, ..Default::default() }.generate(5);
    let (a, b) = split_vertical(&d, 0.5, 0.5, 5)?;
    let input = GraphInput::vertical(&a, &b)?;
    let spec = ModelSpec {
        hidden: vec![4, 4],
        num_classes: 3,
        activation: Activation::Quad(1.0),
        dropout: 0.5,
        learning_rate: 0.05,
    };
    let model = SageModel::init(&spec, &input, 5);
    let train: Vec<usize> = (0..12).filter(|v| v % 4 != 0).collect();

    let mut cfg = SessionConfig::new(KeySize::Test512, 5);
    cfg.dropout_seed = 99;
    let mut s = FederatedSession::new(&cfg, &a, &b, &model, train.clone(), vec![Task::Calibrate, Task::Train])?;
    let report = s.run_in_process()?;
    let fed = s.merged_model()?;

    let mut plain = model.clone();
    plain.calibrate_activation(&input)?;
    let labels = b.labels.as_ref().expect("active party holds labels");
    train_step(&mut plain, &input, labels, &train, &mut ChaCha20Rng::seed_from_u64(99), None)?;

    let diff = fed
        .layers
        .iter()
        .zip(&plain.layers)
        .flat_map(|(x, y)| {
            let xs = std::iter::once(&x.w_self).chain(&x.w_neigh);
            let ys = std::iter::once(&y.w_self).chain(&y.w_neigh);
            xs.zip(ys).flat_map(|(p, q)| p.iter().zip(q.iter()).map(|(u, v)| (u - v).abs()).collect::<Vec<_>>())
        })
        .fold(0.0f64, f64::max);
    println!("loss {:.6}, max weight difference to plaintext {diff:.2e}", s.active.losses()[0]);

    let c = s.counters();
    println!("{} frames, {} bytes", report.frames, report.bytes);
    println!("forward items {}, backward items {}", c.forward_messages(), c.backward_messages());
    for (l, lc) in c.layers.iter().enumerate() {
        println!("  layer {l}: {lc:?}");
    }
    println!("max product depth {}", c.max_product_depth);
    Ok(())
}

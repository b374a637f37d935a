//! The three parties on separate threads, exchanging framed messages over
//! loopback TCP. The outcome matches the same session on the single-thread
//! scheduler.

use fedvgcn::gnn::{Activation, GraphInput, ModelSpec, SageModel};
use fedvgcn::graph::split_vertical;
use fedvgcn::graph::synthetic::SyntheticConfig;
use fedvgcn::paillier::KeySize;
use fedvgcn::protocol::{tcp_mesh, Endpoint, FederatedSession, SessionConfig, Task};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = SyntheticConfig { num_nodes: 20, num_classes: 3, feature_dim: 12, ..Default::default() }.generate(2);
    let (a, b) = split_vertical(&d, 0.5, 0.5, 2)?;
    let input = GraphInput::vertical(&a, &b)?;
    let spec =
        ModelSpec { hidden: vec![4], learning_rate: 0.05, dropout: 0.0, ..ModelSpec::new(3, Activation::Quad(1.0)) };
    let model = SageModel::init(&spec, &input, 2);
    let train: Vec<usize> = (0..16).collect();
    let tasks = [vec![Task::Calibrate], vec![Task::Train; 3], vec![Task::Evaluate]].concat();
    let cfg = SessionConfig::new(KeySize::Test512, 2);
    let mut s = FederatedSession::new(&cfg, &a, &b, &model, train.clone(), tasks.clone())?;

    let [ea, eb, ec] = tcp_mesh()?;
    let endpoints: [Box<dyn Endpoint>; 3] = [Box::new(ea), Box::new(eb), Box::new(ec)];
    s.run_threaded(endpoints)?;

    println!("losses per iteration: {:?}", s.active.losses());

    let mut local = FederatedSession::new(&cfg, &a, &b, &model, train, tasks)?;
    local.run_in_process()?;
    println!("same losses as in-process run: {}", local.active.losses() == s.active.losses());
    println!("same predictions: {}", local.active.predictions() == s.active.predictions());
    Ok(())
}

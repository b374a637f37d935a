mod common;

use common::{max_weight_diff, tiny_model, tiny_views};
use fedvgcn::gnn::{train_step, GraphInput};
use fedvgcn::paillier::KeySize;
use fedvgcn::protocol::{
    tcp_mesh, Endpoint, FederatedSession, ObservedKind, PartyRole, ProtocolError, SessionConfig, Task,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn session(
    seed: u64,
    nodes: usize,
    dropout: f64,
    tasks: Vec<Task>,
) -> (FederatedSession, fedvgcn::gnn::SageModel, GraphInput) {
    let (a, b) = tiny_views(seed, nodes, 6, 3);
    let input = GraphInput::vertical(&a, &b).unwrap();
    let model = tiny_model(&input, vec![4, 4], 3, dropout, seed);
    let train: Vec<usize> = (0..nodes).filter(|v| v % 3 != 0).collect();
    let mut cfg = SessionConfig::new(KeySize::Test512, seed);
    cfg.dropout_seed = seed + 100;
    let s = FederatedSession::new(&cfg, &a, &b, &model, train, tasks).unwrap();
    (s, model, input)
}

#[test]
fn one_iteration_matches_plaintext_update() {
    for (seed, dropout) in [(1, 0.0), (2, 0.0), (3, 0.5)] {
        let (mut s, model, input) = session(seed, 8, dropout, vec![Task::Train]);
        s.run_in_process().unwrap();
        let fed = s.merged_model().unwrap();

        let labels = s.active.losses().len();
        assert_eq!(labels, 1);
        let (_, b) = tiny_views(seed, 8, 6, 3);
        let mut plain = model.clone();
        let train: Vec<usize> = (0..8).filter(|v| v % 3 != 0).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed + 100);
        let loss = train_step(&mut plain, &input, b.labels.as_ref().unwrap(), &train, &mut rng, None).unwrap();

        assert!(max_weight_diff(&model, &plain) > 1e-3, "update too small to compare");
        let diff = max_weight_diff(&fed, &plain);
        assert!(diff < 1e-6, "seed {seed}: federated and plaintext differ by {diff}");
        assert!((s.active.losses()[0] - loss).abs() < 1e-6);
    }
}

#[test]
fn calibration_and_evaluation_match_plaintext() {
    let (mut s, mut model, input) = session(4, 9, 0.0, vec![Task::Calibrate, Task::Evaluate]);
    s.run_in_process().unwrap();
    model.calibrate_activation(&input).unwrap();
    let fed_a = s.active.params().activation.scale();
    let plain_a = model.activation.as_quad().unwrap().scale();
    assert!((fed_a - plain_a).abs() < 1e-8);
    assert_eq!(s.passive.params().activation.scale(), fed_a);
    assert_eq!(s.active.predictions().unwrap(), model.predict(&input).unwrap());
    assert_eq!(s.counters().iterations, 0);
}

#[test]
fn server_sees_only_sums_losses_and_blinded_values() {
    let (mut s, model, input) = session(5, 7, 0.0, vec![Task::Train]);
    s.server.record_observations(true);
    s.run_in_process().unwrap();

    let cache = model.forward(&input, None).unwrap();
    let (_, b) = tiny_views(5, 7, 6, 3);
    let train: Vec<usize> = (0..7).filter(|v| v % 3 != 0).collect();
    let (_, d_logits) = fedvgcn::gnn::batch_supervised_loss(&cache.logits, b.labels.as_ref().unwrap(), &train).unwrap();
    let grads = model.backward(&input, &cache, &d_logits).unwrap();
    let true_values: Vec<f64> = grads
        .layers
        .iter()
        .flat_map(|g| g.w_self.iter().chain(g.w_neigh.iter().flat_map(|m| m.iter())).copied())
        .filter(|v| v.abs() > 1e-9)
        .collect();

    let obs = s.server.observations();
    assert!(!obs.is_empty());
    for o in obs {
        match o.kind {
            ObservedKind::PreActivation | ObservedKind::Loss => {}
            ObservedKind::MaskedGradient(_) | ObservedKind::MaskedUpstream => {
                for v in &o.values {
                    assert!(true_values.iter().all(|t| (t - v).abs() > 1e-6), "gradient {v} visible at server");
                }
            }
        }
    }
    let grads_seen = obs.iter().filter(|o| matches!(o.kind, ObservedKind::MaskedGradient(_))).count();
    assert_eq!(grads_seen, 2 * model.layers.len());
}

#[test]
fn runs_are_bit_identical() {
    let run = || {
        let (mut s, _, _) = session(6, 6, 0.5, vec![Task::Train, Task::Train, Task::Evaluate]);
        let report = s.run_in_process().unwrap();
        (report, s.merged_model().unwrap(), s.active.predictions().unwrap().to_vec())
    };
    let (r1, m1, p1) = run();
    let (r2, m2, p2) = run();
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
    assert_eq!(p1, p2);
}

#[test]
fn distinct_sessions_use_distinct_keys() {
    let (s1, _, _) = session(7, 5, 0.0, vec![]);
    let (s2, _, _) = session(8, 5, 0.0, vec![]);
    assert_ne!(s1.server.public_key().key_id(), s2.server.public_key().key_id());
}

#[test]
fn zero_tasks_leave_counters_at_zero() {
    let (mut s, _, _) = session(9, 5, 0.0, vec![]);
    s.run_in_process().unwrap();
    let c = s.counters();
    assert_eq!(c.forward_messages(), 0);
    assert_eq!(c.backward_messages(), 0);
    assert_eq!(c.iterations, 0);
}

#[test]
fn tcp_transport_matches_in_process() {
    let tasks = vec![Task::Train, Task::Evaluate];
    let (mut local, _, _) = session(10, 6, 0.5, tasks.clone());
    local.run_in_process().unwrap();
    let (mut remote, _, _) = session(10, 6, 0.5, tasks);
    let [a, b, c] = tcp_mesh().unwrap();
    let eps: [Box<dyn Endpoint>; 3] = [Box::new(a), Box::new(b), Box::new(c)];
    remote.run_threaded(eps).unwrap();
    assert_eq!(remote.merged_model().unwrap(), local.merged_model().unwrap());
    assert_eq!(remote.active.predictions(), local.active.predictions());
    assert_eq!(remote.counters(), local.counters());
}

#[test]
fn tcp_peer_failure_surfaces_as_error() {
    let (mut s, _, _) = session(11, 6, 0.0, vec![Task::Train]);
    let [a, b, c] = tcp_mesh().unwrap();
    drop(c);
    let eps: [Box<dyn Endpoint>; 3] = [Box::new(a), Box::new(b), Box::new(NeverEndpoint)];
    let err = s.run_threaded(eps).unwrap_err();
    assert!(matches!(err, ProtocolError::Transport(_)), "{err}");
}

/// An endpoint whose party never hears anything and cannot send.
struct NeverEndpoint;

impl Endpoint for NeverEndpoint {
    fn send(&mut self, to: PartyRole, _: &fedvgcn::protocol::Envelope) -> fedvgcn::protocol::Result<()> {
        Err(ProtocolError::Transport(format!("no route to {to:?}")))
    }

    fn recv_timeout(
        &mut self,
        _: std::time::Duration,
    ) -> fedvgcn::protocol::Result<Option<fedvgcn::protocol::Envelope>> {
        Ok(None)
    }
}

#![allow(dead_code)]

use fedvgcn::gnn::{Activation, GraphInput, ModelSpec, SageModel};
use fedvgcn::graph::synthetic::SyntheticConfig;
use fedvgcn::graph::{split_vertical, VerticalView};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Aligned passive/active views of a small random graph with real-valued
/// features.
pub fn tiny_views(seed: u64, nodes: usize, features: usize, classes: usize) -> (VerticalView, VerticalView) {
    let cfg = SyntheticConfig {
        num_nodes: nodes,
        num_classes: classes,
        feature_dim: features,
        avg_degree: 2.5,
        words_per_node: 3,
        topic_words: 2,
        ..Default::default()
    };
    let mut d = cfg.generate(seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xFEED);
    d.features =
        Array2::from_shape_fn(d.features.dim(), |_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(-1.0..1.0) });
    split_vertical(&d, 0.5, 0.5, seed).unwrap()
}

pub fn tiny_model(input: &GraphInput, hidden: Vec<usize>, classes: usize, dropout: f64, seed: u64) -> SageModel {
    let spec =
        ModelSpec { hidden, num_classes: classes, activation: Activation::Quad(1.3), dropout, learning_rate: 0.05 };
    SageModel::init(&spec, input, seed)
}

pub fn max_weight_diff(x: &SageModel, y: &SageModel) -> f64 {
    let mut worst: f64 = 0.0;
    for (lx, ly) in x.layers.iter().zip(&y.layers) {
        let mats = std::iter::once((&lx.w_self, &ly.w_self)).chain(lx.w_neigh.iter().zip(&ly.w_neigh));
        for (a, b) in mats {
            assert_eq!(a.dim(), b.dim());
            for (u, v) in a.iter().zip(b.iter()) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    worst
}

pub type Triple = (usize, usize, Vec<usize>);

/// A random small model for gradient checks: one or two relations, one or
/// two hidden layers, a random activation scale and optional dropout.
pub struct GradCase {
    pub model: SageModel,
    pub input: GraphInput,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub dropout_seed: u64,
    /// `(u, v, negatives)` triples with their weight.
    pub unsup: Option<(Vec<Triple>, f64)>,
}

pub fn grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let nodes = rng.gen_range(5..=9);
    let classes = rng.gen_range(2..=3);
    let (a, b) = tiny_views(seed, nodes, 6, classes);
    let input = if rng.gen_bool(0.5) {
        GraphInput::vertical(&a, &b).unwrap()
    } else {
        let d =
            fedvgcn::graph::reconstruct(&a, &b, &(0..classes).map(|c| c.to_string()).collect::<Vec<_>>(), "t").unwrap();
        GraphInput::from_dataset(&d).unwrap()
    };
    let hidden: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(2..=4)).collect();
    let spec = ModelSpec {
        hidden,
        num_classes: classes,
        activation: Activation::Quad(rng.gen_range(0.5..3.0)),
        dropout: if rng.gen_bool(0.5) { 0.5 } else { 0.0 },
        learning_rate: 0.1,
    };
    let model = SageModel::init(&spec, &input, seed);
    let train: Vec<usize> = (0..nodes).filter(|_| rng.gen_bool(0.7)).collect();
    let unsup = rng.gen_bool(0.5).then(|| {
        let triples =
            (0..3).map(|_| (rng.gen_range(0..nodes), rng.gen_range(0..nodes), vec![rng.gen_range(0..nodes)])).collect();
        (triples, 0.3)
    });
    GradCase { model, input, labels: b.labels.unwrap(), train, dropout_seed: seed ^ 0xABC, unsup }
}

impl GradCase {
    pub fn loss(&self, model: &SageModel) -> f64 {
        let cache = model.forward(&self.input, Some(&mut ChaCha20Rng::seed_from_u64(self.dropout_seed))).unwrap();
        let (mut loss, _) = fedvgcn::gnn::batch_supervised_loss(&cache.logits, &self.labels, &self.train).unwrap();
        if let Some((triples, w)) = &self.unsup {
            for (u, v, negs) in triples {
                loss += w * fedvgcn::gnn::unsup_loss(&cache.logits, *u, *v, negs);
            }
        }
        loss
    }

    pub fn analytic(&self) -> fedvgcn::gnn::Gradients {
        let cache = self.model.forward(&self.input, Some(&mut ChaCha20Rng::seed_from_u64(self.dropout_seed))).unwrap();
        let (_, mut d) = fedvgcn::gnn::batch_supervised_loss(&cache.logits, &self.labels, &self.train).unwrap();
        if let Some((triples, w)) = &self.unsup {
            for (u, v, negs) in triples {
                fedvgcn::gnn::unsup_loss_grad(&cache.logits, *u, *v, negs, *w, &mut d);
            }
        }
        self.model.backward(&self.input, &cache, &d).unwrap()
    }

    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over
    /// every weight, with central differences of step `h`.
    pub fn max_relative_error(&self, h: f64, floor: f64) -> f64 {
        let grads = self.analytic();
        let mut worst: f64 = 0.0;
        for l in 0..self.model.layers.len() {
            for m in 0..=self.model.layers[l].w_neigh.len() {
                let g = if m == 0 { &grads.layers[l].w_self } else { &grads.layers[l].w_neigh[m - 1] };
                for (idx, &analytic) in g.indexed_iter() {
                    let mut probe = self.model.clone();
                    weight_mut(&mut probe, l, m)[idx] += h;
                    let up = self.loss(&probe);
                    weight_mut(&mut probe, l, m)[idx] -= 2.0 * h;
                    let dn = self.loss(&probe);
                    let numeric = (up - dn) / (2.0 * h);
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
                    worst = worst.max(rel);
                }
            }
        }
        worst
    }
}

/// Matrix `m` of layer `l`: 0 is the self weight, `r + 1` relation `r`.
pub fn weight_mut(model: &mut SageModel, l: usize, m: usize) -> &mut Array2<f64> {
    let layer = &mut model.layers[l];
    if m == 0 {
        &mut layer.w_self
    } else {
        &mut layer.w_neigh[m - 1]
    }
}

//! Plaintext GraphSage with mean aggregation: forward pass, losses, analytic
//! gradients and SGD training.
//!
//! A layer computes `z_v = W_selfᵀ h_v + Σ_r W_rᵀ agg_r(v)` where
//! `agg_r(v) = Σ_{u ∈ N_r(v)} h_u / deg(v)` sums over the neighbors in edge
//! relation `r` and `deg(v)` counts neighbors over all relations. With one
//! relation this is the usual mean aggregator. The vertically partitioned
//! model uses two relations, one per party's edge set, so every party can
//! compute its share of `z` from its own edges once the per-node neighbor
//! counts have been exchanged. At the first layer relation `r` only sees the
//! feature columns its owner holds.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Dataset, FoldSplit, VerticalView};
use crate::polyact::{fit_scale_param, PolyError, QuadActivation};

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const DEFAULT_LEARNING_RATE: f64 = 1e-5;
pub const DEFAULT_DROPOUT: f64 = 0.5;

const CHECKPOINT_MAGIC: &[u8; 16] = b"FEDVGCN-SAGE-V1\0";

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GnnError>;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Quad(f64),
}

impl Activation {
    pub fn quad(q: QuadActivation) -> Self {
        Activation::Quad(q.scale())
    }

    pub fn as_quad(&self) -> Option<QuadActivation> {
        match *self {
            Activation::Quad(a) => QuadActivation::new(a).ok(),
            Activation::Relu => None,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::Quad(a) => quad(a).apply(x),
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Quad(a) => quad(a).deriv(x),
        }
    }
}

fn quad(a: f64) -> QuadActivation {
    QuadActivation::new(a).expect("activation scale validated on construction")
}

/// One edge relation.
#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub adjacency: Vec<Vec<usize>>,
    /// Input columns aggregated at the first layer; `None` means all.
    pub first_layer_columns: Option<Vec<usize>>,
}

/// Node features plus one or more edge relations over the same node set.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub features: Array2<f64>,
    pub relations: Vec<Relation>,
    /// Neighbor count over all relations.
    pub degree: Vec<f64>,
}

impl GraphInput {
    pub fn new(features: Array2<f64>, relations: Vec<Relation>) -> Result<Self> {
        let n = features.nrows();
        for r in &relations {
            if r.adjacency.len() != n {
                return Err(GnnError::Dimension(format!(
                    "relation covers {} nodes, features {}",
                    r.adjacency.len(),
                    n
                )));
            }
            if let Some(cols) = &r.first_layer_columns {
                if cols.iter().any(|&c| c >= features.ncols()) {
                    return Err(GnnError::Dimension("relation column out of range".into()));
                }
            }
        }
        let degree = (0..n).map(|v| relations.iter().map(|r| r.adjacency[v].len()).sum::<usize>() as f64).collect();
        Ok(Self { features, relations, degree })
    }

    /// Standard single-relation input.
    pub fn standard(features: Array2<f64>, adjacency: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(features, vec![Relation { adjacency, first_layer_columns: None }])
    }

    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        Self::standard(d.features.clone(), d.adjacency())
    }

    /// Two-relation input over aligned views: features laid out as
    /// `[passive columns | active columns]`, relation 0 is the passive party's
    /// edge set over its columns and relation 1 the active party's.
    pub fn vertical(a: &VerticalView, b: &VerticalView) -> Result<Self> {
        if a.node_ids != b.node_ids {
            return Err(GnnError::Dimension("views are not aligned".into()));
        }
        let da = a.features.ncols();
        let db = b.features.ncols();
        let features = ndarray::concatenate(Axis(1), &[a.features.view(), b.features.view()])
            .map_err(|e| GnnError::Dimension(e.to_string()))?;
        Self::new(
            features,
            vec![
                Relation { adjacency: a.adjacency(), first_layer_columns: Some((0..da).collect()) },
                Relation { adjacency: b.adjacency(), first_layer_columns: Some((da..da + db).collect()) },
            ],
        )
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    fn relation_input_dim(&self, r: usize) -> usize {
        self.relations[r].first_layer_columns.as_ref().map_or(self.input_dim(), Vec::len)
    }
}

/// Arithmetic mean of the neighbor vectors; zero when there are none.
pub fn mean_aggregate(h: &Array2<f64>, neighbors: &[usize]) -> Array1<f64> {
    let mut out = Array1::zeros(h.ncols());
    if neighbors.is_empty() {
        return out;
    }
    for &u in neighbors {
        out += &h.row(u);
    }
    out / neighbors.len() as f64
}

/// Neighbor sums of `h` over `adjacency`, divided by `degree` (zero rows stay
/// zero).
pub fn aggregate_rows(h: &Array2<f64>, adjacency: &[Vec<usize>], degree: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros(h.dim());
    for (v, nbrs) in adjacency.iter().enumerate() {
        if degree[v] == 0.0 {
            continue;
        }
        let mut row = out.row_mut(v);
        for &u in nbrs {
            row += &h.row(u);
        }
        row /= degree[v];
    }
    out
}

/// Transpose of [`aggregate_rows`] for undirected adjacency: scatters
/// `g_v / deg(v)` to every neighbor `u` of `v`.
pub fn aggregate_rows_transpose(g: &Array2<f64>, adjacency: &[Vec<usize>], degree: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros(g.dim());
    for (v, nbrs) in adjacency.iter().enumerate() {
        if degree[v] == 0.0 {
            continue;
        }
        let scaled = g.row(v).to_owned() / degree[v];
        for &u in nbrs {
            let mut row = out.row_mut(u);
            row += &scaled;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SageLayer {
    /// `in × out`
    pub w_self: Array2<f64>,
    /// One `in_r × out` matrix per relation.
    pub w_neigh: Vec<Array2<f64>>,
}

impl SageLayer {
    pub fn out_dim(&self) -> usize {
        self.w_self.ncols()
    }

    pub fn in_dim(&self) -> usize {
        self.w_self.nrows()
    }

    fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
    }
}

/// Single-node layer: `z = W_selfᵀ h_self + W_neighᵀ h_agg`, `out = act(z)`.
pub fn layer_forward(
    w_self: &Array2<f64>,
    w_neigh: &Array2<f64>,
    act: Activation,
    h_self: ArrayView1<f64>,
    h_agg: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if w_self.nrows() != h_self.len() || w_neigh.nrows() != h_agg.len() || w_self.ncols() != w_neigh.ncols() {
        return Err(GnnError::Dimension(format!(
            "weights {:?}/{:?} against inputs {}/{}",
            w_self.dim(),
            w_neigh.dim(),
            h_self.len(),
            h_agg.len()
        )));
    }
    let z = w_self.t().dot(&h_self) + w_neigh.t().dot(&h_agg);
    let out = z.mapv(|x| act.apply(x));
    Ok((z, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SageModel {
    pub layers: Vec<SageLayer>,
    pub activation: Activation,
    pub dropout: f64,
    pub learning_rate: f64,
}

/// Shape of a model to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub learning_rate: f64,
}

impl ModelSpec {
    pub fn new(num_classes: usize, activation: Activation) -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            num_classes,
            activation,
            dropout: DEFAULT_DROPOUT,
            learning_rate: DEFAULT_LEARNING_RATE,
        }
    }
}

/// Per-layer values kept from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// Layer input `h` (`n × in`).
    pub input: Array2<f64>,
    /// Per-relation aggregated input.
    pub aggregated: Vec<Array2<f64>>,
    /// Pre-activation `z` (`n × out`).
    pub z: Array2<f64>,
    /// Dropout multipliers applied after the activation (hidden layers only).
    pub dropout_mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    /// Output of the final layer, `n × classes`.
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w_self: Array2<f64>,
    pub w_neigh: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

/// Bernoulli keep-mask scaled by `1/(1-p)`.
pub fn dropout_mask(rng: &mut impl Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    let keep = 1.0 - p;
    Array2::from_shape_fn((rows, cols), |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

impl SageModel {
    /// Glorot-uniform initialization, seeded.
    pub fn init(spec: &ModelSpec, input: &GraphInput, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut dims = vec![input.input_dim()];
        dims.extend(&spec.hidden);
        dims.push(spec.num_classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (din, dout) = (w[0], w[1]);
                let w_self = SageLayer::glorot(&mut rng, din, dout);
                let w_neigh = (0..input.relations.len())
                    .map(|r| {
                        let rows = if l == 0 { input.relation_input_dim(r) } else { din };
                        SageLayer::glorot(&mut rng, rows, dout)
                    })
                    .collect();
                SageLayer { w_self, w_neigh }
            })
            .collect();
        Self { layers, activation: spec.activation, dropout: spec.dropout, learning_rate: spec.learning_rate }
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, SageLayer::out_dim)
    }

    fn relation_input(input: &GraphInput, h: &Array2<f64>, l: usize, r: usize) -> Array2<f64> {
        match (&input.relations[r].first_layer_columns, l) {
            (Some(cols), 0) => h.select(Axis(1), cols),
            _ => h.clone(),
        }
    }

    /// Full-graph forward pass. Dropout is applied only when `dropout_rng` is
    /// given.
    pub fn forward(&self, input: &GraphInput, mut dropout_rng: Option<&mut ChaCha20Rng>) -> Result<ForwardCache> {
        let n = input.num_nodes();
        if self.layers.is_empty() || self.layers[0].in_dim() != input.input_dim() {
            return Err(GnnError::Dimension("model input width does not match features".into()));
        }
        let mut h = input.features.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.w_neigh.len() != input.relations.len() {
                return Err(GnnError::Dimension("relation count mismatch".into()));
            }
            let mut z = h.dot(&layer.w_self);
            let mut aggregated = Vec::with_capacity(input.relations.len());
            for (r, rel) in input.relations.iter().enumerate() {
                let agg = aggregate_rows(&Self::relation_input(input, &h, l, r), &rel.adjacency, &input.degree);
                z += &agg.dot(&layer.w_neigh[r]);
                aggregated.push(agg);
            }
            let (next, mask) = if l == last {
                (z.clone(), None)
            } else {
                let mut out = z.mapv(|x| self.activation.apply(x));
                let mask = match dropout_rng.as_deref_mut() {
                    Some(rng) if self.dropout > 0.0 => {
                        let m = dropout_mask(rng, n, layer.out_dim(), self.dropout);
                        out *= &m;
                        Some(m)
                    }
                    _ => None,
                };
                (out, mask)
            };
            caches.push(LayerCache { input: std::mem::replace(&mut h, next), aggregated, z, dropout_mask: mask });
        }
        Ok(ForwardCache { layers: caches, logits: h })
    }

    /// Gradients of the loss whose derivative with respect to the logits is
    /// `d_logits`.
    pub fn backward(&self, input: &GraphInput, cache: &ForwardCache, d_logits: &Array2<f64>) -> Result<Gradients> {
        if d_logits.dim() != cache.logits.dim() {
            return Err(GnnError::Dimension("upstream gradient shape".into()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dz = d_logits.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let c = &cache.layers[l];
            let w_self = c.input.t().dot(&dz);
            let w_neigh = c.aggregated.iter().map(|agg| agg.t().dot(&dz)).collect();
            grads.push(LayerGrad { w_self, w_neigh });
            if l == 0 {
                break;
            }
            let mut dh = dz.dot(&layer.w_self.t());
            for (r, rel) in input.relations.iter().enumerate() {
                let through = dz.dot(&layer.w_neigh[r].t());
                dh += &aggregate_rows_transpose(&through, &rel.adjacency, &input.degree);
            }
            let below = &cache.layers[l - 1];
            if let Some(mask) = &below.dropout_mask {
                dh *= mask;
            }
            dz = dh * below.z.mapv(|x| self.activation.deriv(x));
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Plain SGD step `w ← w − η·g`.
    pub fn apply_gradients(&mut self, grads: &Gradients) {
        let lr = self.learning_rate;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.w_self.scaled_add(-lr, &g.w_self);
            for (w, gw) in layer.w_neigh.iter_mut().zip(&g.w_neigh) {
                w.scaled_add(-lr, gw);
            }
        }
    }

    /// Fit the quadratic activation's scale to the first layer's
    /// pre-activations on a dropout-free pass. No-op for ReLU.
    pub fn calibrate_activation(&mut self, input: &GraphInput) -> Result<()> {
        if let Activation::Quad(_) = self.activation {
            let z = first_layer_preactivation(self, input)?;
            self.activation = Activation::quad(fit_scale_param(z.as_slice().expect("standard layout"))?);
        }
        Ok(())
    }

    pub fn predict(&self, input: &GraphInput) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(input, None)?.logits))
    }

    /// Serialize as magic, activation, then per layer the dimensions followed
    /// by row-major little-endian weights.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let (tag, a) = match self.activation {
            Activation::Relu => (0u8, 0.0),
            Activation::Quad(a) => (1u8, a),
        };
        w.write_all(&[tag])?;
        for v in [a, self.dropout, self.learning_rate] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        let write_matrix = |w: &mut W, m: &Array2<f64>| -> Result<()> {
            w.write_all(&(m.nrows() as u32).to_le_bytes())?;
            w.write_all(&(m.ncols() as u32).to_le_bytes())?;
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for layer in &self.layers {
            w.write_all(&(layer.w_neigh.len() as u32).to_le_bytes())?;
            write_matrix(&mut w, &layer.w_self)?;
            for m in &layer.w_neigh {
                write_matrix(&mut w, m)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(GnnError::Checkpoint("bad magic".into()));
        }
        let mut b1 = [0u8; 1];
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b1)?;
        let mut f64s = [0.0; 3];
        for v in &mut f64s {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        let activation = match b1[0] {
            0 => Activation::Relu,
            1 => Activation::quad(QuadActivation::new(f64s[0])?),
            t => return Err(GnnError::Checkpoint(format!("unknown activation tag {t}"))),
        };
        let mut read_u32 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4) as usize)
        };
        let num_layers = read_u32(&mut r)?;
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let rels = read_u32(&mut r)?;
            let mut mats = Vec::with_capacity(rels + 1);
            for _ in 0..=rels {
                let rows = read_u32(&mut r)?;
                let cols = read_u32(&mut r)?;
                let mut data = vec![0.0; rows * cols];
                for v in &mut data {
                    r.read_exact(&mut b8)?;
                    *v = f64::from_le_bytes(b8);
                }
                mats.push(Array2::from_shape_vec((rows, cols), data).map_err(|e| GnnError::Checkpoint(e.to_string()))?);
            }
            let w_self = mats.remove(0);
            layers.push(SageLayer { w_self, w_neigh: mats });
        }
        Ok(Self { layers, activation, dropout: f64s[1], learning_rate: f64s[2] })
    }
}

fn first_layer_preactivation(model: &SageModel, input: &GraphInput) -> Result<Array2<f64>> {
    let layer = &model.layers[0];
    let mut z = input.features.dot(&layer.w_self);
    for (r, rel) in input.relations.iter().enumerate() {
        let h = SageModel::relation_input(input, &input.features, 0, r);
        z += &aggregate_rows(&h, &rel.adjacency, &input.degree).dot(&layer.w_neigh[r]);
    }
    Ok(z)
}

pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|x| (x - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Softmax cross-entropy and its gradient `softmax(logits) - one_hot(label)`.
pub fn supervised_loss(logits: ArrayView1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if label >= logits.len() {
        return Err(GnnError::LabelOutOfRange { label, classes: logits.len() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((log_sum - logits[label], grad))
}

/// Summed cross-entropy over `nodes` and the matching `n × classes` gradient.
pub fn batch_supervised_loss(logits: &Array2<f64>, labels: &[usize], nodes: &[usize]) -> Result<(f64, Array2<f64>)> {
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for &v in nodes {
        let (loss, g) = supervised_loss(logits.row(v), labels[v])?;
        total += loss;
        grad.row_mut(v).assign(&g);
    }
    Ok((total, grad))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Graph-based unsupervised loss for one positive pair and its negatives:
/// `-ln σ(z_u·z_v) - Σ_n ln σ(-z_u·z_n)`.
pub fn unsup_loss(z: &Array2<f64>, u: usize, v: usize, negatives: &[usize]) -> f64 {
    let zu = z.row(u);
    let pos = neg_log_sigmoid(zu.dot(&z.row(v)));
    pos + negatives.iter().map(|&n| neg_log_sigmoid(-zu.dot(&z.row(n)))).sum::<f64>()
}

/// Accumulate the gradient of [`unsup_loss`] into `grad`, scaled by `weight`.
pub fn unsup_loss_grad(z: &Array2<f64>, u: usize, v: usize, negatives: &[usize], weight: f64, grad: &mut Array2<f64>) {
    let zu = z.row(u).to_owned();
    let zv = z.row(v).to_owned();
    let c = -(1.0 - sigmoid(zu.dot(&zv))) * weight;
    grad.row_mut(u).scaled_add(c, &zv);
    grad.row_mut(v).scaled_add(c, &zu);
    for &n in negatives {
        let zn = z.row(n).to_owned();
        let c = sigmoid(zu.dot(&zn)) * weight;
        grad.row_mut(u).scaled_add(c, &zn);
        grad.row_mut(n).scaled_add(c, &zu);
    }
}

/// Co-occurrence pairs from one random walk of `length` steps per node.
/// Isolated nodes contribute nothing.
pub fn random_walk_pairs(adjacency: &[Vec<usize>], length: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for start in 0..adjacency.len() {
        let mut cur = start;
        for _ in 0..length {
            let Some(&next) = adjacency[cur].choose(&mut rng) else { break };
            if next != start {
                pairs.push((start, next));
            }
            cur = next;
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub walk_length: usize,
    pub negatives: usize,
    /// Exponent on node degree for the negative-sampling distribution.
    pub degree_exponent: f64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self { walk_length: 5, negatives: 5, degree_exponent: 0.75 }
    }
}

/// Draws negatives from `P_n(v) ∝ deg(v)^exponent`.
pub struct NegativeSampler {
    cumulative: Vec<f64>,
}

impl NegativeSampler {
    pub fn new(adjacency: &[Vec<usize>], exponent: f64) -> Self {
        let mut acc = 0.0;
        let cumulative = adjacency
            .iter()
            .map(|n| {
                acc += (n.len() as f64).powf(exponent);
                acc
            })
            .collect();
        Self { cumulative }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Option<usize> {
        let total = *self.cumulative.last()?;
        if total <= 0.0 {
            return None;
        }
        let x = rng.gen::<f64>() * total;
        Some(self.cumulative.partition_point(|&c| c <= x).min(self.cumulative.len() - 1))
    }
}

/// Options for [`train_plaintext`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the unsupervised term; 0 disables it.
    pub unsup_weight: f64,
    pub walk: WalkConfig,
    /// Fit the quadratic activation scale on a warm-up pass.
    pub auto_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, seed: 0, unsup_weight: 0.0, walk: WalkConfig::default(), auto_scale: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub final_losses: Vec<f64>,
}

pub fn accuracy(pred: &[usize], labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    nodes.iter().filter(|&&v| pred[v] == labels[v]).count() as f64 / nodes.len() as f64
}

/// Seed of the model for a given fold.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

/// Walk pairs, negative sampler, walk settings, weight and sampling stream of
/// the unsupervised term.
pub type UnsupBatch<'a> = (&'a [(usize, usize)], &'a NegativeSampler, &'a WalkConfig, f64, &'a mut ChaCha20Rng);

/// One SGD iteration on `train` nodes. Returns the supervised loss before the
/// update.
pub fn train_step(
    model: &mut SageModel,
    input: &GraphInput,
    labels: &[usize],
    train: &[usize],
    dropout_rng: &mut ChaCha20Rng,
    unsup: Option<UnsupBatch<'_>>,
) -> Result<f64> {
    let cache = model.forward(input, Some(dropout_rng))?;
    let (loss, mut grad) = batch_supervised_loss(&cache.logits, labels, train)?;
    if let Some((pairs, sampler, walk, weight, rng)) = unsup {
        for &(u, v) in pairs {
            let negs: Vec<usize> = (0..walk.negatives).filter_map(|_| sampler.sample(rng)).collect();
            unsup_loss_grad(&cache.logits, u, v, &negs, weight, &mut grad);
        }
    }
    let grads = model.backward(input, &cache, &grad)?;
    model.apply_gradients(&grads);
    Ok(loss)
}

/// Five-fold training: a fresh model per fold, `epochs` full-graph SGD steps
/// on the fold's training nodes, accuracy on its test nodes.
pub fn train_plaintext(
    spec: &ModelSpec,
    input: &GraphInput,
    labels: &[usize],
    folds: &[FoldSplit],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut fold_accuracies = Vec::with_capacity(folds.len());
    let mut final_losses = Vec::with_capacity(folds.len());
    let adjacency: Vec<Vec<usize>> = (0..input.num_nodes())
        .map(|v| input.relations.iter().flat_map(|r| r.adjacency[v].iter().copied()).collect())
        .collect();
    for fold in folds {
        let seed = fold_seed(cfg.seed, fold.fold_index);
        let mut model = SageModel::init(spec, input, seed);
        if cfg.auto_scale {
            model.calibrate_activation(input)?;
        }
        let mut dropout_rng = ChaCha20Rng::seed_from_u64(seed ^ 0xD50);
        let mut walk_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x3A1C);
        let sampler = NegativeSampler::new(&adjacency, cfg.walk.degree_exponent);
        let mut last = f64::NAN;
        for epoch in 0..cfg.epochs {
            let unsup_pairs = (cfg.unsup_weight > 0.0)
                .then(|| random_walk_pairs(&adjacency, cfg.walk.walk_length, seed.wrapping_add(epoch as u64)));
            let unsup = unsup_pairs.as_deref().map(|p| (p, &sampler, &cfg.walk, cfg.unsup_weight, &mut walk_rng));
            last = train_step(&mut model, input, labels, &fold.train, &mut dropout_rng, unsup)?;
        }
        let pred = model.predict(input)?;
        fold_accuracies.push(accuracy(&pred, labels, &fold.test));
        final_losses.push(last);
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / fold_accuracies.len().max(1) as f64;
    Ok(TrainReport { fold_accuracies, mean_accuracy, final_losses })
}

/// Rows `rows` of `m` as a new matrix.
pub fn take_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

/// Column block `[start, end)` of `m`.
pub fn column_block(m: &Array2<f64>, start: usize, end: usize) -> Array2<f64> {
    m.slice(s![.., start..end]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::PI;

    #[test]
    fn mean_aggregate_cases() {
        let h = array![[1.0, 0.0], [0.0, 1.0], [3.0, -2.0]];
        assert_eq!(mean_aggregate(&h, &[2]), array![3.0, -2.0]);
        assert_eq!(mean_aggregate(&h, &[0, 1]), array![0.5, 0.5]);
        assert_eq!(mean_aggregate(&h, &[]), array![0.0, 0.0]);
        assert_eq!(mean_aggregate(&h, &[1, 0, 2]), mean_aggregate(&h, &[2, 1, 0]));
    }

    #[test]
    fn layer_forward_cases() {
        let q = Activation::Quad(1.0);
        let eye = Array2::eye(2);
        let h = array![0.4, -1.2];
        let (_, out) = layer_forward(&eye, &eye, q, h.view(), array![0.0, 0.0].view()).unwrap();
        assert_eq!(out, h.mapv(|x| q.apply(x)));

        let one = array![[1.0]];
        let (z, out) = layer_forward(&one, &one, q, array![0.3].view(), array![-0.3].view()).unwrap();
        assert!(z[0].abs() < 1e-15);
        assert!((out[0] - 1.0 / (2.0 * PI)).abs() < 1e-12);

        let ws = array![[0.5, -1.0], [2.0, 0.25]];
        let wn = array![[-0.75, 1.5], [0.1, 0.2]];
        let (hs, ha) = (array![0.7, -0.2], array![1.1, 0.4]);
        let (z, out) = layer_forward(&ws, &wn, q, hs.view(), ha.view()).unwrap();
        for j in 0..2 {
            let mut want = 0.0;
            for i in 0..2 {
                want += ws[[i, j]] * hs[i] + wn[[i, j]] * ha[i];
            }
            assert!((z[j] - want).abs() < 1e-12);
            let p = 4.0 / (3.0 * PI) * want * want + 0.5 * want + 1.0 / (2.0 * PI);
            assert!((out[j] - p).abs() < 1e-12);
        }
        assert!(layer_forward(&ws, &wn, q, array![1.0].view(), ha.view()).is_err());
    }

    #[test]
    fn supervised_loss_cases() {
        let (loss, grad) = supervised_loss(Array1::from_elem(7, 0.3).view(), 2).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!(grad.sum().abs() < 1e-12);
        assert!(matches!(
            supervised_loss(array![0.0, 1.0].view(), 2),
            Err(GnnError::LabelOutOfRange { label: 2, classes: 2 })
        ));
        let logits = array![0.3, -1.2, 2.2, 0.05];
        let (_, grad) = supervised_loss(logits.view(), 1).unwrap();
        for i in 0..4 {
            let h = 1e-6;
            let mut up = logits.clone();
            up[i] += h;
            let mut dn = logits.clone();
            dn[i] -= h;
            let fd = (supervised_loss(up.view(), 1).unwrap().0 - supervised_loss(dn.view(), 1).unwrap().0) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn unsup_loss_cases() {
        let z = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        assert!((unsup_loss(&z, 0, 1, &[2]) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let s = 10f64.sqrt();
        let z = array![[s, 0.0], [s, 0.0]];
        let want = -(1.0 / (1.0 + (-10f64).exp())).ln();
        assert!((unsup_loss(&z, 0, 1, &[]) - want).abs() < 1e-12);
        assert!((want - 4.54e-5).abs() < 1e-7);
        let z = array![[s, 0.0], [0.0, 1.0], [s, 0.0]];
        let got = unsup_loss(&z, 0, 1, &[2]);
        assert!((got - (2f64.ln() + 10.000_045_4)).abs() < 1e-6);
    }

    #[test]
    fn unsup_grad_matches_finite_differences() {
        let mut z = array![[0.3, -0.5], [0.9, 0.1], [-0.4, 0.7], [0.2, 0.2]];
        let mut grad = Array2::zeros(z.dim());
        unsup_loss_grad(&z, 0, 1, &[2, 3], 1.0, &mut grad);
        for i in 0..4 {
            for j in 0..2 {
                let h = 1e-6;
                z[[i, j]] += h;
                let up = unsup_loss(&z, 0, 1, &[2, 3]);
                z[[i, j]] -= 2.0 * h;
                let dn = unsup_loss(&z, 0, 1, &[2, 3]);
                z[[i, j]] += h;
                assert!(((up - dn) / (2.0 * h) - grad[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn random_walks() {
        let path = vec![vec![1], vec![0]];
        let mut pairs = random_walk_pairs(&path, 1, 0);
        pairs.sort_unstable();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        let isolated = vec![vec![], vec![2], vec![1]];
        assert!(random_walk_pairs(&isolated, 3, 1).iter().all(|&(s, _)| s != 0));
        let tri = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        assert_eq!(random_walk_pairs(&tri, 2, 5), random_walk_pairs(&tri, 2, 5));
    }

    #[test]
    fn negative_sampler_follows_degree() {
        let adj = vec![vec![1, 2, 3], vec![0], vec![0], vec![0], vec![]];
        let s = NegativeSampler::new(&adj, 1.0);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut counts = [0usize; 5];
        for _ in 0..6000 {
            counts[s.sample(&mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[4], 0);
        assert!((counts[0] as f64 / 6000.0 - 0.5).abs() < 0.03);
    }

    fn tiny_input(seed: u64) -> GraphInput {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = 6;
        let x = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let adj = vec![vec![1, 2], vec![0], vec![0, 3], vec![2, 4], vec![3], vec![]];
        GraphInput::standard(x, adj).unwrap()
    }

    #[test]
    fn scalar_network_at_zero_weights() {
        // one layer, scalar everything, zero weights: d p(z)/dw_self = p'(0)·h = h/2
        let input = GraphInput::standard(array![[0.8]], vec![vec![]]).unwrap();
        let model = SageModel {
            layers: vec![
                SageLayer { w_self: array![[0.0]], w_neigh: vec![array![[0.0]]] },
                SageLayer { w_self: array![[1.0]], w_neigh: vec![array![[0.0]]] },
            ],
            activation: Activation::Quad(1.0),
            dropout: 0.0,
            learning_rate: 1.0,
        };
        let cache = model.forward(&input, None).unwrap();
        let grads = model.backward(&input, &cache, &array![[1.0]]).unwrap();
        assert!((grads.layers[0].w_self[[0, 0]] - 0.5 * 0.8).abs() < 1e-15);
        assert_eq!(grads.layers[0].w_neigh[0][[0, 0]], 0.0);
    }

    #[test]
    fn zero_input_gives_zero_first_layer_gradient() {
        let mut input = tiny_input(3);
        input.features.fill(0.0);
        let model =
            SageModel::init(&ModelSpec { hidden: vec![4], ..ModelSpec::new(2, Activation::Quad(1.0)) }, &input, 1);
        let cache = model.forward(&input, None).unwrap();
        let (_, g) = batch_supervised_loss(&cache.logits, &[0, 1, 0, 1, 0, 1], &[0, 1, 2, 3]).unwrap();
        let grads = model.backward(&input, &cache, &g).unwrap();
        assert!(grads.layers[0].w_self.iter().all(|&v| v == 0.0));
        assert!(grads.layers[0].w_neigh[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let input = tiny_input(4);
        let model =
            SageModel::init(&ModelSpec { hidden: vec![5, 4], ..ModelSpec::new(3, Activation::Quad(0.7)) }, &input, 2);
        let a = model.forward(&input, None).unwrap();
        let b = model.forward(&input, None).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let input = tiny_input(5);
        let model =
            SageModel::init(&ModelSpec { hidden: vec![4], ..ModelSpec::new(2, Activation::Quad(0.9)) }, &input, 3);
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..16], CHECKPOINT_MAGIC);
        let back = SageModel::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        buf[0] = b'X';
        assert!(SageModel::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn aggregate_transpose_is_adjoint() {
        let input = tiny_input(6);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
        let adj = &input.relations[0].adjacency;
        let lhs = (&aggregate_rows(&x, adj, &input.degree) * &y).sum();
        let rhs = (&x * &aggregate_rows_transpose(&y, adj, &input.degree)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

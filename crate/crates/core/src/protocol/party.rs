//! Message-driven state machines for the three roles.
//!
//! A party buffers every delivered message keyed by sender, kind and layer,
//! and [`Party::step`] advances as far as the buffered messages allow. The
//! same machines run under the deterministic scheduler and over sockets.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{
    encrypt_partial_loss, encrypt_reals, encrypted_neighbor_sum, encrypted_transpose_product, encrypted_weight_product,
    loss_decompose_encrypted, to_matrix, FixedPointCodecExt, MaskLedger, MessageKind, NoiseMask, PartyIo, PartyRole,
    PartyWeights, Payload, ProtocolError, Result, SessionConfig, Task, TrainingParams,
};
use crate::gnn::{
    aggregate_rows, aggregate_rows_transpose, argmax_rows, batch_supervised_loss, dropout_mask, random_walk_pairs,
    unsup_loss_grad, NegativeSampler, WalkConfig,
};
use crate::graph::VerticalView;
use crate::paillier::{keygen, Ciphertext, FixedPointCodec, PublicKey, Scale, SecretKey};
use crate::polyact::fit_scale_param;

use MessageKind as K;
use PartyRole::{Active, Passive, Server};

const SALT_KEYS: u64 = 0x4B45_5953;
const SALT_PASSIVE: u64 = 0x5041_5353;
const SALT_ACTIVE: u64 = 0x4143_5449;

/// A protocol participant driven by message delivery.
pub trait Party: Send {
    fn role(&self) -> PartyRole;
    /// Buffer one incoming message after session, round and key checks.
    fn deliver(&mut self, env: super::Envelope) -> Result<()>;
    /// Advance as far as buffered messages allow. Returns whether anything
    /// happened.
    fn step(&mut self) -> Result<bool>;
    fn drain_outbox(&mut self) -> Vec<(PartyRole, super::Envelope)>;
    fn is_done(&self) -> bool;
    fn counters(&self) -> &super::CostCounters;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Back {
    Start,
    AwaitDelta,
    AwaitResult,
    AwaitUpstream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    AwaitKey,
    AwaitDegrees,
    Forward { layer: usize, sent: bool },
    Backward { layer: usize, stage: Back },
    Done,
}

/// State and arithmetic shared by the two data parties.
struct DataCore {
    io: PartyIo,
    features: Array2<f64>,
    adjacency: Vec<Vec<usize>>,
    own_degree: Vec<u32>,
    total_degree: Vec<f64>,
    weights: PartyWeights,
    params: TrainingParams,
    dropout_rng: ChaCha20Rng,
    rng: ChaCha20Rng,
    frac_bits: u32,
    key: Option<(PublicKey, FixedPointCodec)>,
    masks: MaskLedger,
    tasks: Vec<Task>,
    task: usize,
    phase: Phase,
    /// Per-layer forward cache of the running task.
    inputs: Vec<Array2<f64>>,
    shares: Vec<Array2<f64>>,
    z: Vec<Array2<f64>>,
    dropout: Vec<Option<Array2<f64>>>,
    h: Array2<f64>,
    grads: Vec<Vec<f64>>,
}

impl DataCore {
    fn new(
        role: PartyRole,
        cfg: &SessionConfig,
        view: &VerticalView,
        weights: PartyWeights,
        params: TrainingParams,
        tasks: Vec<Task>,
        salt: u64,
    ) -> Result<Self> {
        if weights.num_layers() == 0 {
            return Err(ProtocolError::Config("model has no layers".into()));
        }
        let in_dim = weights.w_neigh[0].nrows();
        if view.features.ncols() != in_dim || weights.w_self[0].as_ref().is_some_and(|w| w.nrows() != in_dim) {
            return Err(ProtocolError::Dimension(format!(
                "{role:?} holds {} columns, first layer expects {in_dim}",
                view.features.ncols()
            )));
        }
        Ok(Self {
            io: PartyIo::new(role, cfg.session_id),
            features: view.features.clone(),
            adjacency: view.adjacency(),
            own_degree: view.degrees(),
            total_degree: Vec::new(),
            weights,
            params,
            dropout_rng: ChaCha20Rng::seed_from_u64(cfg.dropout_seed),
            rng: ChaCha20Rng::seed_from_u64(cfg.derive(salt)),
            frac_bits: cfg.frac_bits,
            key: None,
            masks: MaskLedger::default(),
            tasks,
            task: 0,
            phase: Phase::AwaitKey,
            inputs: Vec::new(),
            shares: Vec::new(),
            z: Vec::new(),
            dropout: Vec::new(),
            h: Array2::zeros((0, 0)),
            grads: Vec::new(),
        })
    }

    fn num_layers(&self) -> usize {
        self.weights.num_layers()
    }

    fn n(&self) -> usize {
        self.features.nrows()
    }

    fn current_task(&self) -> Task {
        self.tasks[self.task]
    }

    /// Handle setup phases; returns `Ok(None)` once past them.
    fn setup_step(&mut self) -> Result<Option<bool>> {
        match self.phase {
            Phase::AwaitKey => {
                let Some(Payload::PubKeyDist { modulus }) = self.io.take(Server, K::PubKeyDist, 0) else {
                    return Ok(Some(false));
                };
                let pk = PublicKey::from_modulus(modulus)?;
                self.io.set_key(pk.key_id());
                let codec = FixedPointCodec::for_key(&pk, self.frac_bits);
                self.key = Some((pk, codec));
                self.io.send(Server, Payload::NeighborCount { counts: self.own_degree.clone() })?;
                self.phase = Phase::AwaitDegrees;
                Ok(Some(true))
            }
            Phase::AwaitDegrees => {
                let Some(Payload::NeighborCount { counts }) = self.io.take(Server, K::NeighborCount, 0) else {
                    return Ok(Some(false));
                };
                if counts.len() != self.n() || counts.iter().zip(&self.own_degree).any(|(t, o)| t < o) {
                    return Err(ProtocolError::Dimension("neighbor totals do not cover local counts".into()));
                }
                self.total_degree = counts.into_iter().map(f64::from).collect();
                self.start_task();
                Ok(Some(true))
            }
            _ => Ok(None),
        }
    }

    fn start_task(&mut self) {
        if self.task >= self.tasks.len() {
            self.phase = Phase::Done;
            return;
        }
        self.inputs.clear();
        self.shares.clear();
        self.z.clear();
        self.dropout.clear();
        self.grads = vec![Vec::new(); self.num_layers()];
        self.h = self.features.clone();
        self.phase = Phase::Forward { layer: 0, sent: false };
    }

    fn finish_task(&mut self) {
        if self.current_task() == Task::Train {
            self.io.counters.iterations += 1;
        }
        self.task += 1;
        self.start_task();
    }

    /// `share = h·W_self (if owned) + agg_own(h)·W_neigh`, aggregation over
    /// this party's edges normalized by the total degree.
    fn local_share(&mut self, l: usize) -> Array2<f64> {
        let input = std::mem::replace(&mut self.h, Array2::zeros((0, 0)));
        let agg = aggregate_rows(&input, &self.adjacency, &self.total_degree);
        let mut share = agg.dot(&self.weights.w_neigh[l]);
        if let Some(ws) = &self.weights.w_self[l] {
            share += &input.dot(ws);
        }
        self.inputs.push(input);
        self.shares.push(share.clone());
        share
    }

    fn send_forward_share(&mut self, l: usize) -> Result<()> {
        let share = self.local_share(l);
        let (pk, codec) = key_of(&self.key)?;
        let cts = encrypt_reals(pk, codec, share.iter().copied(), Scale::Single, &mut self.rng)?;
        self.io.counters.layer_mut(l).encryptions += cts.len() as u64;
        self.io.send(Server, Payload::EncShare { layer: l as u32, shares: cts })
    }

    /// Take the server's sum for layer `l`. Returns `false` if not yet here.
    fn absorb_sum(&mut self, l: usize) -> Result<bool> {
        let Some(Payload::PlainSum { values, .. }) = self.io.take(Server, K::PlainSum, l) else {
            return Ok(false);
        };
        let z = to_matrix(values, self.n(), self.weights.out_dim(l))?;
        let task = self.current_task();
        if task == Task::Calibrate {
            self.params.activation = fit_scale_param(z.as_slice().expect("standard layout"))?;
            self.z.push(z);
            return Ok(true);
        }
        if l + 1 < self.num_layers() {
            let act = self.params.activation;
            let mut h = z.mapv(|x| act.apply(x));
            let mask = (task == Task::Train && self.params.dropout > 0.0).then(|| {
                let m = dropout_mask(&mut self.dropout_rng, h.nrows(), h.ncols(), self.params.dropout);
                h *= &m;
                m
            });
            self.dropout.push(mask);
            self.h = h;
        }
        self.z.push(z);
        Ok(true)
    }

    /// After the forward pass of layer `l`: the next phase for tasks that end
    /// or continue without backward.
    fn after_forward(&mut self, l: usize) -> Option<Phase> {
        match self.current_task() {
            Task::Calibrate => None,
            _ if l + 1 < self.num_layers() => Some(Phase::Forward { layer: l + 1, sent: false }),
            Task::Train => Some(Phase::Backward { layer: l, stage: Back::Start }),
            Task::Evaluate => None,
        }
    }

    /// Blinded encrypted weight gradient of layer `l` from `[[δ]]` and
    /// `[[δ/deg]]`. Also returns `S = Σ_{v∈N_own(u)} [[δ/deg]]_v`, reused for
    /// the upstream term.
    fn masked_gradient(
        &mut self,
        l: usize,
        delta: &[Ciphertext],
        delta_deg: &[Ciphertext],
    ) -> Result<(Vec<Ciphertext>, NoiseMask, Vec<Ciphertext>)> {
        let out = self.weights.out_dim(l);
        let expected = self.n() * out;
        if delta.len() != expected || delta_deg.len() != expected {
            return Err(ProtocolError::Dimension(format!(
                "layer {l} error has {}/{} entries, expected {expected}",
                delta.len(),
                delta_deg.len()
            )));
        }
        let (pk, codec) = key_of(&self.key)?;
        let input = &self.inputs[l];
        let (s, adds) = encrypted_neighbor_sum(pk, &self.adjacency, delta_deg, out)?;
        let mut grads = Vec::with_capacity(self.weights.grad_len(l));
        let mut muls = 0;
        if self.weights.w_self[l].is_some() {
            let (g, m) = encrypted_transpose_product(pk, codec, input, delta, out)?;
            grads.extend(g);
            muls += m;
        }
        let (g, m) = encrypted_transpose_product(pk, codec, input, &s, out)?;
        grads.extend(g);
        muls += m;
        let mask = NoiseMask::draw(&mut self.rng, grads.len(), self.frac_bits);
        self.masks.admit(self.io.role, &mask)?;
        let masked = mask.apply(pk, codec, &grads)?;
        let c = self.io.counters.layer_mut(l);
        c.ciphertext_adds += adds + muls + masked.len() as u64;
        c.scalar_muls += muls;
        Ok((masked, mask, s))
    }

    fn store_gradient(&mut self, l: usize, residues: &[num_bigint::BigUint], mask: NoiseMask) -> Result<()> {
        let (_, codec) = key_of(&self.key)?;
        self.grads[l] = codec.unmask(residues, mask)?;
        Ok(())
    }

    fn apply_sgd(&mut self) -> Result<()> {
        let lr = self.params.learning_rate;
        for l in 0..self.num_layers() {
            let g = std::mem::take(&mut self.grads[l]);
            self.weights.sgd(l, &g, lr)?;
        }
        Ok(())
    }
}

fn key_of(k: &Option<(PublicKey, FixedPointCodec)>) -> Result<(&PublicKey, &FixedPointCodec)> {
    k.as_ref().map(|(p, c)| (p, c)).ok_or_else(|| ProtocolError::Transport("no public key yet".into()))
}

/// Company A: features and edges, no labels, no secret key.
pub struct PassiveParty {
    core: DataCore,
    pending: Option<(NoiseMask, Option<NoiseMask>)>,
}

impl PassiveParty {
    pub fn new(
        cfg: &SessionConfig,
        view: &VerticalView,
        weights: PartyWeights,
        params: TrainingParams,
        tasks: Vec<Task>,
    ) -> Result<Self> {
        Ok(Self { core: DataCore::new(Passive, cfg, view, weights, params, tasks, SALT_PASSIVE)?, pending: None })
    }

    pub fn weights(&self) -> &PartyWeights {
        &self.core.weights
    }

    pub fn params(&self) -> &TrainingParams {
        &self.core.params
    }

    fn backward_step(&mut self, l: usize, stage: Back) -> Result<bool> {
        let c = &mut self.core;
        let top = l + 1 == c.num_layers();
        match stage {
            Back::Start => {
                if !top {
                    let (pk, codec) = key_of(&c.key)?;
                    let x: Vec<f64> = c.shares[l].iter().copied().collect();
                    let shares = encrypt_reals(pk, codec, x.iter().copied(), Scale::Single, &mut c.rng)?;
                    let losses = encrypt_partial_loss(pk, codec, &c.params.activation, &x, &mut c.rng)?;
                    c.io.counters.layer_mut(l).encryptions += (shares.len() + losses.len()) as u64;
                    c.io.send(Active, Payload::BackwardShare { layer: l as u32, shares })?;
                    c.io.send(Active, Payload::EncPartialLoss { layer: l as u32, losses })?;
                }
                c.phase = Phase::Backward { layer: l, stage: Back::AwaitDelta };
            }
            Back::AwaitDelta => {
                if !(c.io.has(Active, K::BackwardShare, l) && c.io.has(Active, K::EncDelta, l)) {
                    return Ok(false);
                }
                let Some(Payload::BackwardShare { shares, .. }) = c.io.take(Active, K::BackwardShare, l) else {
                    unreachable!("checked above")
                };
                if shares.len() != c.n() * c.weights.out_dim(l) {
                    return Err(ProtocolError::Dimension(format!("active share of layer {l}")));
                }
                let Some(Payload::EncDelta { delta, delta_over_degree, .. }) = c.io.take(Active, K::EncDelta, l) else {
                    unreachable!("checked above")
                };
                let (grads, gmask, s) = c.masked_gradient(l, &delta, &delta_over_degree)?;
                c.io.send(Server, Payload::MaskedEncGrad { layer: l as u32, grads })?;
                let umask = if l > 0 {
                    let (pk, codec) = key_of(&c.key)?;
                    let (up, muls) = encrypted_weight_product(pk, codec, &s, &c.weights.w_neigh[l])?;
                    let mask = NoiseMask::draw(&mut c.rng, up.len(), c.frac_bits);
                    c.masks.admit(Passive, &mask)?;
                    let values = mask.apply(pk, codec, &up)?;
                    let lc = c.io.counters.layer_mut(l);
                    lc.scalar_muls += muls;
                    lc.ciphertext_adds += muls + values.len() as u64;
                    c.io.send(Server, Payload::MaskedEncUpstream { layer: l as u32, values })?;
                    Some(mask)
                } else {
                    None
                };
                self.pending = Some((gmask, umask));
                c.phase = Phase::Backward { layer: l, stage: Back::AwaitResult };
            }
            Back::AwaitResult => {
                if !c.io.has(Server, K::MaskedPlainGrad, l) || (l > 0 && !c.io.has(Server, K::MaskedPlainUpstream, l)) {
                    return Ok(false);
                }
                let (gmask, umask) = self.pending.take().expect("masks stored with the request");
                let Some(Payload::MaskedPlainGrad { residues, .. }) = c.io.take(Server, K::MaskedPlainGrad, l) else {
                    unreachable!("checked above")
                };
                c.store_gradient(l, &residues, gmask)?;
                if let Some(umask) = umask {
                    let Some(Payload::MaskedPlainUpstream { residues, .. }) =
                        c.io.take(Server, K::MaskedPlainUpstream, l)
                    else {
                        unreachable!("checked above")
                    };
                    let (_, codec) = key_of(&c.key)?;
                    let values = codec.unmask(&residues, umask)?;
                    c.io.send(Active, Payload::PlainUpstream { layer: l as u32, values })?;
                    c.phase = Phase::Backward { layer: l - 1, stage: Back::Start };
                } else {
                    c.apply_sgd()?;
                    c.finish_task();
                }
            }
            Back::AwaitUpstream => unreachable!("passive party never waits for upstream"),
        }
        Ok(true)
    }
}

fn forward_step(c: &mut DataCore, layer: usize, sent: bool) -> Result<bool> {
    if !sent {
        c.send_forward_share(layer)?;
        c.phase = Phase::Forward { layer, sent: true };
        return Ok(true);
    }
    if !c.absorb_sum(layer)? {
        return Ok(false);
    }
    Ok(true)
}

impl Party for PassiveParty {
    fn role(&self) -> PartyRole {
        Passive
    }

    fn deliver(&mut self, env: super::Envelope) -> Result<()> {
        self.core.io.deliver(env)
    }

    fn step(&mut self) -> Result<bool> {
        let mut progressed = false;
        loop {
            let moved = match self.core.setup_step()? {
                Some(m) => m,
                None => match self.core.phase {
                    Phase::Forward { layer, sent } => {
                        let moved = forward_step(&mut self.core, layer, sent)?;
                        if moved && sent {
                            match self.core.after_forward(layer) {
                                Some(p) => self.core.phase = p,
                                None => self.core.finish_task(),
                            }
                        }
                        moved
                    }
                    Phase::Backward { layer, stage } => self.backward_step(layer, stage)?,
                    Phase::Done => return Ok(progressed),
                    Phase::AwaitKey | Phase::AwaitDegrees => unreachable!("handled by setup_step"),
                },
            };
            if !moved {
                return Ok(progressed);
            }
            progressed = true;
        }
    }

    fn drain_outbox(&mut self) -> Vec<(PartyRole, super::Envelope)> {
        self.core.io.drain_outbox()
    }

    fn is_done(&self) -> bool {
        self.core.phase == Phase::Done
    }

    fn counters(&self) -> &super::CostCounters {
        &self.core.io.counters
    }
}

/// Optional unsupervised term computed by B on its own edges.
#[derive(Debug, Clone, PartialEq)]
pub struct UnsupervisedTerm {
    pub weight: f64,
    pub walk: WalkConfig,
    pub seed: u64,
}

/// Company B: features, edges and labels.
pub struct ActiveParty {
    core: DataCore,
    labels: Vec<usize>,
    train: Vec<usize>,
    unsup: Option<UnsupervisedTerm>,
    delta: Array2<f64>,
    pending: Option<NoiseMask>,
    losses: Vec<f64>,
    predictions: Option<Vec<usize>>,
}

impl ActiveParty {
    pub fn new(
        cfg: &SessionConfig,
        view: &VerticalView,
        weights: PartyWeights,
        params: TrainingParams,
        tasks: Vec<Task>,
        train: Vec<usize>,
    ) -> Result<Self> {
        let labels =
            view.labels.clone().ok_or_else(|| ProtocolError::Config("active party view carries no labels".into()))?;
        if train.iter().any(|&v| v >= labels.len()) {
            return Err(ProtocolError::Dimension("training node out of range".into()));
        }
        Ok(Self {
            core: DataCore::new(Active, cfg, view, weights, params, tasks, SALT_ACTIVE)?,
            labels,
            train,
            unsup: None,
            delta: Array2::zeros((0, 0)),
            pending: None,
            losses: Vec::new(),
            predictions: None,
        })
    }

    pub fn with_unsupervised(mut self, term: UnsupervisedTerm) -> Self {
        self.unsup = (term.weight > 0.0).then_some(term);
        self
    }

    pub fn weights(&self) -> &PartyWeights {
        &self.core.weights
    }

    pub fn params(&self) -> &TrainingParams {
        &self.core.params
    }

    /// Supervised loss of each training iteration, before its update.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Argmax of the logits from the latest evaluation.
    pub fn predictions(&self) -> Option<&[usize]> {
        self.predictions.as_deref()
    }

    /// Error at the output: cross-entropy gradient plus the optional
    /// unsupervised term.
    fn output_error(&mut self, logits: &Array2<f64>) -> Result<f64> {
        let (loss, mut grad) = batch_supervised_loss(logits, &self.labels, &self.train)?;
        if let Some(u) = &self.unsup {
            let iteration = self.core.io.counters.iterations;
            let pairs = random_walk_pairs(&self.core.adjacency, u.walk.walk_length, u.seed.wrapping_add(iteration));
            let sampler = NegativeSampler::new(&self.core.adjacency, u.walk.degree_exponent);
            let mut rng = ChaCha20Rng::seed_from_u64(u.seed ^ iteration.rotate_left(17));
            for (a, b) in pairs {
                let negs: Vec<usize> = (0..u.walk.negatives).filter_map(|_| sampler.sample(&mut rng)).collect();
                unsup_loss_grad(logits, a, b, &negs, u.weight, &mut grad);
            }
        }
        self.delta = grad;
        Ok(loss)
    }

    fn backward_step(&mut self, l: usize, stage: Back) -> Result<bool> {
        let top = l + 1 == self.core.num_layers();
        match stage {
            Back::Start => {
                let c = &mut self.core;
                if top {
                    let (pk, codec) = key_of(&c.key)?;
                    let loss = *self.losses.last().expect("loss recorded at the end of forward");
                    let losses = encrypt_reals(pk, codec, [loss], Scale::Single, &mut c.rng)?;
                    c.io.counters.layer_mut(l).encryptions += 1;
                    c.io.send(Server, Payload::EncPartialLoss { layer: l as u32, losses })?;
                } else {
                    if !(c.io.has(Passive, K::BackwardShare, l) && c.io.has(Passive, K::EncPartialLoss, l)) {
                        return Ok(false);
                    }
                    let Some(Payload::BackwardShare { shares, .. }) = c.io.take(Passive, K::BackwardShare, l) else {
                        unreachable!("checked above")
                    };
                    let Some(Payload::EncPartialLoss { losses, .. }) = c.io.take(Passive, K::EncPartialLoss, l) else {
                        unreachable!("checked above")
                    };
                    let (pk, codec) = key_of(&c.key)?;
                    let y: Vec<f64> = c.shares[l].iter().copied().collect();
                    let parts =
                        loss_decompose_encrypted(pk, codec, &c.params.activation, &shares, losses, &y, &mut c.rng)?;
                    let lc = c.io.counters.layer_mut(l);
                    lc.encryptions += y.len() as u64;
                    lc.scalar_muls += y.len() as u64;
                    lc.ciphertext_adds += 2 * y.len() as u64;
                    c.io.send(Server, Payload::EncPartialLoss { layer: l as u32, losses: parts.total })?;
                }
                let (pk, codec) = key_of(&c.key)?;
                let shares = encrypt_reals(pk, codec, c.shares[l].iter().copied(), Scale::Single, &mut c.rng)?;
                let delta = encrypt_reals(pk, codec, self.delta.iter().copied(), Scale::Single, &mut c.rng)?;
                let out = self.delta.ncols();
                let scaled = self.delta.indexed_iter().map(|((v, _), &d)| {
                    let deg = c.total_degree[v];
                    if deg > 0.0 {
                        d / deg
                    } else {
                        0.0
                    }
                });
                let delta_over_degree = encrypt_reals(pk, codec, scaled, Scale::Single, &mut c.rng)?;
                debug_assert_eq!(delta.len(), c.n() * out);
                c.io.counters.layer_mut(l).encryptions += (shares.len() + 2 * delta.len()) as u64;
                let (grads, mask, _) = c.masked_gradient(l, &delta, &delta_over_degree)?;
                c.io.send(Passive, Payload::BackwardShare { layer: l as u32, shares })?;
                c.io.send(Passive, Payload::EncDelta { layer: l as u32, delta, delta_over_degree })?;
                c.io.send(Server, Payload::MaskedEncGrad { layer: l as u32, grads })?;
                self.pending = Some(mask);
                c.phase = Phase::Backward { layer: l, stage: Back::AwaitResult };
            }
            Back::AwaitResult => {
                let c = &mut self.core;
                let Some(Payload::MaskedPlainGrad { residues, .. }) = c.io.take(Server, K::MaskedPlainGrad, l) else {
                    return Ok(false);
                };
                let mask = self.pending.take().expect("mask stored with the request");
                c.store_gradient(l, &residues, mask)?;
                if l > 0 {
                    c.phase = Phase::Backward { layer: l, stage: Back::AwaitUpstream };
                } else {
                    c.apply_sgd()?;
                    c.finish_task();
                }
            }
            Back::AwaitUpstream => {
                let c = &mut self.core;
                let Some(Payload::PlainUpstream { values, .. }) = c.io.take(Passive, K::PlainUpstream, l) else {
                    return Ok(false);
                };
                let below = c.weights.w_neigh[l].nrows();
                let mut dh = to_matrix(values, c.n(), below)?;
                let ws = c.weights.w_self[l].as_ref().expect("active party owns hidden self weights");
                dh += &self.delta.dot(&ws.t());
                let through = self.delta.dot(&c.weights.w_neigh[l].t());
                dh += &aggregate_rows_transpose(&through, &c.adjacency, &c.total_degree);
                if let Some(mask) = &c.dropout[l - 1] {
                    dh *= mask;
                }
                let act = c.params.activation;
                self.delta = dh * c.z[l - 1].mapv(|x| act.deriv(x));
                c.phase = Phase::Backward { layer: l - 1, stage: Back::Start };
            }
            Back::AwaitDelta => unreachable!("active party never waits for an error vector"),
        }
        Ok(true)
    }
}

impl Party for ActiveParty {
    fn role(&self) -> PartyRole {
        Active
    }

    fn deliver(&mut self, env: super::Envelope) -> Result<()> {
        self.core.io.deliver(env)
    }

    fn step(&mut self) -> Result<bool> {
        let mut progressed = false;
        loop {
            let moved = match self.core.setup_step()? {
                Some(m) => m,
                None => match self.core.phase {
                    Phase::Forward { layer, sent } => {
                        let moved = forward_step(&mut self.core, layer, sent)?;
                        if moved && sent {
                            let last = layer + 1 == self.core.num_layers();
                            match self.core.current_task() {
                                Task::Train if last => {
                                    let logits = self.core.z[layer].clone();
                                    let loss = self.output_error(&logits)?;
                                    self.losses.push(loss);
                                }
                                Task::Evaluate if last => {
                                    self.predictions = Some(argmax_rows(&self.core.z[layer]));
                                }
                                _ => {}
                            }
                            match self.core.after_forward(layer) {
                                Some(p) => self.core.phase = p,
                                None => self.core.finish_task(),
                            }
                        }
                        moved
                    }
                    Phase::Backward { layer, stage } => self.backward_step(layer, stage)?,
                    Phase::Done => return Ok(progressed),
                    Phase::AwaitKey | Phase::AwaitDegrees => unreachable!("handled by setup_step"),
                },
            };
            if !moved {
                return Ok(progressed);
            }
            progressed = true;
        }
    }

    fn drain_outbox(&mut self) -> Vec<(PartyRole, super::Envelope)> {
        self.core.io.drain_outbox()
    }

    fn is_done(&self) -> bool {
        self.core.phase == Phase::Done
    }

    fn counters(&self) -> &super::CostCounters {
        &self.core.io.counters
    }
}

/// What the server decrypted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservedKind {
    PreActivation,
    Loss,
    MaskedGradient(PartyRole),
    MaskedUpstream,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub layer: usize,
    pub kind: ObservedKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ServerPhase {
    Start,
    AwaitCounts,
    Forward { layer: usize },
    Backward { layer: usize, loss: bool, grad_a: bool, up_a: bool, grad_b: bool },
    Done,
}

/// Party C: key holder. Sees pre-activation sums, the loss and blinded
/// gradients only.
pub struct ServerParty {
    io: PartyIo,
    pk: PublicKey,
    sk: SecretKey,
    codec: FixedPointCodec,
    num_layers: usize,
    tasks: Vec<Task>,
    task: usize,
    phase: ServerPhase,
    observe: bool,
    observations: Vec<Observation>,
}

impl ServerParty {
    /// Generates the session key pair.
    pub fn new(cfg: &SessionConfig, num_layers: usize, tasks: Vec<Task>) -> Result<Self> {
        if num_layers == 0 {
            return Err(ProtocolError::Config("model has no layers".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.derive(SALT_KEYS));
        let (pk, sk) = keygen(cfg.key_size, &mut rng);
        let codec = FixedPointCodec::for_key(&pk, cfg.frac_bits);
        let mut io = PartyIo::new(Server, cfg.session_id);
        io.set_key(pk.key_id());
        Ok(Self {
            io,
            pk,
            sk,
            codec,
            num_layers,
            tasks,
            task: 0,
            phase: ServerPhase::Start,
            observe: false,
            observations: Vec::new(),
        })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    /// Keep every decrypted plaintext for inspection.
    pub fn record_observations(&mut self, on: bool) {
        self.observe = on;
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    fn observe(&mut self, layer: usize, kind: ObservedKind, values: Vec<f64>) {
        self.observations.push(Observation { layer, kind, values });
    }

    fn decrypt(&mut self, layer: usize, cts: &[Ciphertext]) -> Result<Vec<num_bigint::BigUint>> {
        let depth = cts.iter().map(|c| u8::from(c.scale() == Scale::Double)).max().unwrap_or(0);
        self.io.counters.max_product_depth = self.io.counters.max_product_depth.max(depth);
        self.io.counters.layer_mut(layer).decryptions += cts.len() as u64;
        Ok(self.sk.decrypt_batch(cts)?)
    }

    fn start_task(&mut self) {
        self.phase = if self.task < self.tasks.len() { ServerPhase::Forward { layer: 0 } } else { ServerPhase::Done };
    }

    fn finish_task(&mut self) {
        if self.tasks[self.task] == Task::Train {
            self.io.counters.iterations += 1;
        }
        self.task += 1;
        self.start_task();
    }

    fn forward_step(&mut self, l: usize) -> Result<bool> {
        if !(self.io.has(Passive, K::EncShare, l) && self.io.has(Active, K::EncShare, l)) {
            return Ok(false);
        }
        let Some(Payload::EncShare { shares: a, .. }) = self.io.take(Passive, K::EncShare, l) else {
            unreachable!("checked above")
        };
        let Some(Payload::EncShare { shares: b, .. }) = self.io.take(Active, K::EncShare, l) else {
            unreachable!("checked above")
        };
        if a.len() != b.len() {
            return Err(ProtocolError::Dimension(format!("layer {l} shares {} vs {}", a.len(), b.len())));
        }
        if a.iter().chain(&b).any(|c| c.scale() != Scale::Single) {
            return Err(ProtocolError::Dimension("forward shares must be single scale".into()));
        }
        let sum = a.iter().zip(&b).map(|(x, y)| self.pk.add_ct(x, y)).collect::<std::result::Result<Vec<_>, _>>()?;
        self.io.counters.layer_mut(l).ciphertext_adds += sum.len() as u64;
        let plain = self.decrypt(l, &sum)?;
        let values: Vec<f64> = plain.iter().map(|m| self.codec.decode(m)).collect();
        if self.observe {
            self.observe(l, ObservedKind::PreActivation, values.clone());
        }
        self.io.send(Passive, Payload::PlainSum { layer: l as u32, values: values.clone() })?;
        self.io.send(Active, Payload::PlainSum { layer: l as u32, values })?;
        self.phase = match self.tasks[self.task] {
            Task::Calibrate => {
                self.finish_task();
                return Ok(true);
            }
            _ if l + 1 < self.num_layers => ServerPhase::Forward { layer: l + 1 },
            Task::Train => ServerPhase::Backward { layer: l, loss: false, grad_a: false, up_a: l == 0, grad_b: false },
            Task::Evaluate => {
                self.finish_task();
                return Ok(true);
            }
        };
        Ok(true)
    }

    /// Decrypt a blinded vector and return the residues to `to`.
    fn unblind_request(
        &mut self,
        l: usize,
        cts: Vec<Ciphertext>,
        kind: ObservedKind,
    ) -> Result<Vec<num_bigint::BigUint>> {
        let residues = self.decrypt(l, &cts)?;
        if self.observe {
            let values = residues.iter().map(|r| self.codec.decode_scaled(r, Scale::Double)).collect();
            self.observe(l, kind, values);
        }
        Ok(residues)
    }

    fn backward_step(
        &mut self,
        l: usize,
        mut loss: bool,
        mut grad_a: bool,
        mut up_a: bool,
        mut grad_b: bool,
    ) -> Result<bool> {
        let mut moved = false;
        if !loss {
            if let Some(Payload::EncPartialLoss { losses, .. }) = self.io.take(Active, K::EncPartialLoss, l) {
                let plain = self.decrypt(l, &losses)?;
                if self.observe {
                    let values =
                        plain.iter().zip(&losses).map(|(m, c)| self.codec.decode_scaled(m, c.scale())).collect();
                    self.observe(l, ObservedKind::Loss, values);
                }
                loss = true;
                moved = true;
            }
        }
        if !grad_a {
            if let Some(Payload::MaskedEncGrad { grads, .. }) = self.io.take(Passive, K::MaskedEncGrad, l) {
                let residues = self.unblind_request(l, grads, ObservedKind::MaskedGradient(Passive))?;
                self.io.send(Passive, Payload::MaskedPlainGrad { layer: l as u32, residues })?;
                grad_a = true;
                moved = true;
            }
        }
        if !up_a {
            if let Some(Payload::MaskedEncUpstream { values, .. }) = self.io.take(Passive, K::MaskedEncUpstream, l) {
                let residues = self.unblind_request(l, values, ObservedKind::MaskedUpstream)?;
                self.io.send(Passive, Payload::MaskedPlainUpstream { layer: l as u32, residues })?;
                up_a = true;
                moved = true;
            }
        }
        if !grad_b {
            if let Some(Payload::MaskedEncGrad { grads, .. }) = self.io.take(Active, K::MaskedEncGrad, l) {
                let residues = self.unblind_request(l, grads, ObservedKind::MaskedGradient(Active))?;
                self.io.send(Active, Payload::MaskedPlainGrad { layer: l as u32, residues })?;
                grad_b = true;
                moved = true;
            }
        }
        if loss && grad_a && up_a && grad_b {
            if l == 0 {
                self.finish_task();
            } else {
                self.phase =
                    ServerPhase::Backward { layer: l - 1, loss: false, grad_a: false, up_a: l == 1, grad_b: false };
            }
            return Ok(true);
        }
        self.phase = ServerPhase::Backward { layer: l, loss, grad_a, up_a, grad_b };
        Ok(moved)
    }
}

impl Party for ServerParty {
    fn role(&self) -> PartyRole {
        Server
    }

    fn deliver(&mut self, env: super::Envelope) -> Result<()> {
        self.io.deliver(env)
    }

    fn step(&mut self) -> Result<bool> {
        let mut progressed = false;
        loop {
            let moved = match self.phase {
                ServerPhase::Start => {
                    for to in [Passive, Active] {
                        self.io.send(to, Payload::PubKeyDist { modulus: self.pk.n().clone() })?;
                    }
                    self.phase = ServerPhase::AwaitCounts;
                    true
                }
                ServerPhase::AwaitCounts => {
                    if !(self.io.has(Passive, K::NeighborCount, 0) && self.io.has(Active, K::NeighborCount, 0)) {
                        false
                    } else {
                        let Some(Payload::NeighborCount { counts: a }) = self.io.take(Passive, K::NeighborCount, 0)
                        else {
                            unreachable!("checked above")
                        };
                        let Some(Payload::NeighborCount { counts: b }) = self.io.take(Active, K::NeighborCount, 0)
                        else {
                            unreachable!("checked above")
                        };
                        if a.len() != b.len() {
                            return Err(ProtocolError::Dimension(format!("{} vs {} nodes", a.len(), b.len())));
                        }
                        let totals: Vec<u32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
                        self.io.send(Passive, Payload::NeighborCount { counts: totals.clone() })?;
                        self.io.send(Active, Payload::NeighborCount { counts: totals })?;
                        self.start_task();
                        true
                    }
                }
                ServerPhase::Forward { layer } => self.forward_step(layer)?,
                ServerPhase::Backward { layer, loss, grad_a, up_a, grad_b } => {
                    self.backward_step(layer, loss, grad_a, up_a, grad_b)?
                }
                ServerPhase::Done => return Ok(progressed),
            };
            if !moved {
                return Ok(progressed);
            }
            progressed = true;
        }
    }

    fn drain_outbox(&mut self) -> Vec<(PartyRole, super::Envelope)> {
        self.io.drain_outbox()
    }

    fn is_done(&self) -> bool {
        self.phase == ServerPhase::Done
    }

    fn counters(&self) -> &super::CostCounters {
        &self.io.counters
    }
}

//! Message delivery: a deterministic single-thread scheduler and a
//! byte-stream transport over TCP, plus the session wiring both use.

use std::collections::{BTreeMap, VecDeque};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::party::UnsupervisedTerm;
use super::{
    merge_model, read_frame, split_model, write_frame, ActiveParty, CostCounters, Envelope, Party, PartyRole,
    PassiveParty, ProtocolError, Result, ServerParty, SessionConfig, Task, TrainingParams,
};
use crate::gnn::SageModel;
use crate::graph::VerticalView;

/// Reliable FIFO queues per sender-receiver pair. [`Self::poll`] serves a
/// receiver's senders in fixed round-robin order, one message per turn.
#[derive(Debug, Default)]
pub struct InProcessTransport {
    queues: BTreeMap<(PartyRole, PartyRole), VecDeque<Envelope>>,
    next_sender: BTreeMap<PartyRole, usize>,
    transcript: Sha256,
    frames: u64,
    bytes: u64,
}

impl InProcessTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enqueue `env` for `to`. The encoded frame is folded into the transcript
    /// digest.
    pub fn send(&mut self, to: PartyRole, env: Envelope) -> Result<()> {
        if to == env.sender {
            return Err(ProtocolError::UnknownRecipient { role: env.sender, to });
        }
        let frame = env.encode()?;
        self.transcript.update([env.sender.tag(), to.tag()]);
        self.transcript.update(&frame);
        self.frames += 1;
        self.bytes += frame.len() as u64;
        self.queues.entry((env.sender, to)).or_default().push_back(env);
        Ok(())
    }

    pub fn poll(&mut self, to: PartyRole) -> Option<Envelope> {
        let start = *self.next_sender.get(&to).unwrap_or(&0);
        for k in 0..PartyRole::ALL.len() {
            let i = (start + k) % PartyRole::ALL.len();
            let from = PartyRole::ALL[i];
            if let Some(env) = self.queues.get_mut(&(from, to)).and_then(VecDeque::pop_front) {
                self.next_sender.insert(to, i + 1);
                return Some(env);
            }
        }
        None
    }

    pub fn is_empty(&self) -> bool {
        self.queues.values().all(VecDeque::is_empty)
    }

    pub fn report(&self) -> SessionReport {
        SessionReport {
            transcript_digest: self.transcript.clone().finalize().into(),
            frames: self.frames,
            bytes: self.bytes,
        }
    }
}

/// Digest and volume of everything sent in a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionReport {
    pub transcript_digest: [u8; 32],
    pub frames: u64,
    pub bytes: u64,
}

/// Run parties to completion on one thread: each turn delivers a party's
/// queued messages, steps it and forwards its outbox.
pub fn run_in_process(parties: &mut [&mut dyn Party]) -> Result<SessionReport> {
    let mut roles: Vec<PartyRole> = parties.iter().map(|p| p.role()).collect();
    roles.sort();
    if let Some(w) = roles.windows(2).find(|w| w[0] == w[1]) {
        return Err(ProtocolError::DuplicateRole(w[0]));
    }
    let mut net = InProcessTransport::new();
    loop {
        let mut progressed = false;
        for p in parties.iter_mut() {
            while let Some(env) = net.poll(p.role()) {
                p.deliver(env)?;
                progressed = true;
            }
            progressed |= p.step()?;
            for (to, env) in p.drain_outbox() {
                if !roles.contains(&to) {
                    return Err(ProtocolError::UnknownRecipient { role: p.role(), to });
                }
                net.send(to, env)?;
                progressed = true;
            }
        }
        if parties.iter().all(|p| p.is_done()) && net.is_empty() {
            return Ok(net.report());
        }
        if !progressed {
            return Err(ProtocolError::Deadlock);
        }
    }
}

/// One party's connection to its peers.
pub trait Endpoint: Send {
    fn send(&mut self, to: PartyRole, env: &Envelope) -> Result<()>;
    /// Next message, or `None` after `timeout`.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Envelope>>;
}

/// Step `party` and exchange messages over `ep` until it finishes or `abort`
/// is raised by another party's failure.
pub fn drive(party: &mut dyn Party, ep: &mut dyn Endpoint, abort: &AtomicBool) -> Result<()> {
    loop {
        party.step()?;
        for (to, env) in party.drain_outbox() {
            ep.send(to, &env)?;
        }
        if party.is_done() {
            return Ok(());
        }
        loop {
            if abort.load(Ordering::SeqCst) {
                return Err(ProtocolError::Transport("session aborted by a peer".into()));
            }
            if let Some(env) = ep.recv_timeout(Duration::from_millis(50))? {
                party.deliver(env)?;
                break;
            }
        }
    }
}

enum Incoming {
    Frame(Envelope),
    Closed,
    Failed(PartyRole, ProtocolError),
}

/// Frames over one TCP stream per peer, read by a background thread each.
pub struct StreamEndpoint {
    role: PartyRole,
    writers: BTreeMap<PartyRole, TcpStream>,
    rx: mpsc::Receiver<Incoming>,
    open: usize,
}

impl StreamEndpoint {
    pub fn new(role: PartyRole, peers: Vec<(PartyRole, TcpStream)>) -> Result<Self> {
        let (tx, rx) = mpsc::channel();
        let mut writers = BTreeMap::new();
        for (peer, stream) in peers {
            if peer == role || writers.contains_key(&peer) {
                return Err(ProtocolError::DuplicateRole(peer));
            }
            stream.set_nodelay(true)?;
            let mut reader = stream.try_clone()?;
            let tx = tx.clone();
            thread::spawn(move || loop {
                let msg = match read_frame(&mut reader) {
                    Ok(Some(env)) => Incoming::Frame(env),
                    Ok(None) => Incoming::Closed,
                    Err(e) => Incoming::Failed(peer, e),
                };
                let stop = !matches!(msg, Incoming::Frame(_));
                if tx.send(msg).is_err() || stop {
                    return;
                }
            });
            writers.insert(peer, stream);
        }
        let open = writers.len();
        Ok(Self { role, writers, rx, open })
    }
}

impl Endpoint for StreamEndpoint {
    fn send(&mut self, to: PartyRole, env: &Envelope) -> Result<()> {
        let w = self.writers.get_mut(&to).ok_or(ProtocolError::UnknownRecipient { role: self.role, to })?;
        write_frame(w, env).map_err(|e| ProtocolError::Transport(format!("send to {to:?}: {e}")))
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Envelope>> {
        loop {
            match self.rx.recv_timeout(timeout) {
                Ok(Incoming::Frame(env)) => return Ok(Some(env)),
                Ok(Incoming::Closed) => {
                    self.open -= 1;
                    if self.open == 0 {
                        return Err(ProtocolError::Transport("all peers disconnected".into()));
                    }
                }
                Ok(Incoming::Failed(peer, e)) => {
                    return Err(ProtocolError::Transport(format!("connection to {peer:?} lost: {e}")))
                }
                Err(mpsc::RecvTimeoutError::Timeout) => return Ok(None),
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    return Err(ProtocolError::Transport("all readers stopped".into()))
                }
            }
        }
    }
}

impl Drop for StreamEndpoint {
    fn drop(&mut self) {
        for w in self.writers.values() {
            let _ = w.shutdown(Shutdown::Write);
        }
    }
}

/// Three endpoints connected pairwise over loopback TCP, in
/// `[Passive, Active, Server]` order.
pub fn tcp_mesh() -> Result<[StreamEndpoint; 3]> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let pair = || -> Result<(TcpStream, TcpStream)> {
        let a = TcpStream::connect(addr)?;
        let (b, _) = listener.accept()?;
        Ok((a, b))
    };
    let (ab, ba) = pair()?;
    let (ac, ca) = pair()?;
    let (bc, cb) = pair()?;
    use PartyRole::{Active, Passive, Server};
    Ok([
        StreamEndpoint::new(Passive, vec![(Active, ab), (Server, ac)])?,
        StreamEndpoint::new(Active, vec![(Passive, ba), (Server, bc)])?,
        StreamEndpoint::new(Server, vec![(Passive, ca), (Active, cb)])?,
    ])
}

/// The three parties of one session, built from a two-relation model and
/// aligned views.
pub struct FederatedSession {
    pub passive: PassiveParty,
    pub active: ActiveParty,
    pub server: ServerParty,
    template: SageModel,
}

impl FederatedSession {
    /// `model` must be a two-relation model over `[a columns | b columns]`,
    /// e.g. built on [`crate::gnn::GraphInput::vertical`].
    pub fn new(
        cfg: &SessionConfig,
        a: &VerticalView,
        b: &VerticalView,
        model: &SageModel,
        train: Vec<usize>,
        tasks: Vec<Task>,
    ) -> Result<Self> {
        if a.node_ids != b.node_ids {
            return Err(ProtocolError::Dimension("views are not aligned".into()));
        }
        let params = TrainingParams::from_model(model)?;
        let (wa, wb) = split_model(model, a.features.ncols())?;
        Ok(Self {
            passive: PassiveParty::new(cfg, a, wa, params, tasks.clone())?,
            active: ActiveParty::new(cfg, b, wb, params, tasks.clone(), train)?,
            server: ServerParty::new(cfg, model.layers.len(), tasks)?,
            template: model.clone(),
        })
    }

    pub fn with_unsupervised(mut self, term: UnsupervisedTerm) -> Self {
        self.active = self.active.with_unsupervised(term);
        self
    }

    pub fn run_in_process(&mut self) -> Result<SessionReport> {
        run_in_process(&mut [&mut self.passive, &mut self.active, &mut self.server])
    }

    /// Run each party on its own thread over the given endpoints
    /// (`[Passive, Active, Server]`).
    pub fn run_threaded(&mut self, endpoints: [Box<dyn Endpoint>; 3]) -> Result<()> {
        let abort = AtomicBool::new(false);
        let [mut ea, mut eb, mut ec] = endpoints;
        let run = |p: &mut dyn Party, e: &mut dyn Endpoint| {
            let r = drive(p, e, &abort);
            if r.is_err() {
                abort.store(true, Ordering::SeqCst);
            }
            r
        };
        let results = thread::scope(|s| {
            let run = &run;
            let (pa, pb, pc) = (&mut self.passive, &mut self.active, &mut self.server);
            let ha = s.spawn(move || run(pa, ea.as_mut()));
            let hb = s.spawn(move || run(pb, eb.as_mut()));
            let hc = s.spawn(move || run(pc, ec.as_mut()));
            [ha.join(), hb.join(), hc.join()]
        });
        let mut errors = Vec::new();
        for r in results {
            match r {
                Ok(Ok(())) => {}
                Ok(Err(e)) => errors.push(e),
                Err(_) => return Err(ProtocolError::Transport("party thread panicked".into())),
            }
        }
        // a peer's abort notice is secondary to the failure that caused it
        let primary = errors.iter().position(|e| !matches!(e, ProtocolError::Transport(m) if m.contains("aborted")));
        match primary {
            Some(i) => Err(errors.swap_remove(i)),
            None => errors.into_iter().next().map_or(Ok(()), Err),
        }
    }

    /// Reassemble the parties' current weights.
    pub fn merged_model(&self) -> Result<SageModel> {
        let mut m = merge_model(self.passive.weights(), self.active.weights(), &self.template)?;
        m.activation = self.active.params().activation();
        Ok(m)
    }

    /// Counters summed over the three parties.
    pub fn counters(&self) -> CostCounters {
        let mut c = CostCounters::default();
        c.merge(self.passive.counters());
        c.merge(self.active.counters());
        c.merge(self.server.counters());
        c
    }
}

//! Three-party federated GraphSage training over Paillier ciphertexts.
//!
//! The passive party A and the active party B hold the same aligned nodes
//! with disjoint feature columns and disjoint edge sets; B also holds the
//! labels. The server C holds the only secret key.
//!
//! Forward, per layer: A and B upload encrypted shares of the pre-activation
//! `z`, C decrypts their homomorphic sum and returns the plaintext `z` to
//! both, and each applies the activation locally.
//!
//! Backward, per layer from the top: A sends `[[w_A h_A]]` and `[[L_A]]` to B,
//! B assembles `[[L]] = [[L_A]] ⊕ [[L_B]] ⊕ [[L_AB]]` for C and sends A its
//! share and the encrypted error `[[δ]]`. Each data party forms its weight
//! gradient under encryption, blinds it with a fresh [`NoiseMask`], and lets C
//! decrypt the blinded value. A's term of the error for the layer below goes
//! back to B through the same blinded decryption, and B applies the
//! activation derivative in plaintext.
//!
//! Every ciphertext takes at most one scalar product before decryption.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::io::{Read, Write};

use ndarray::{s, Array2, Axis};
use num_bigint::{BigInt, BigUint, RandBigInt};
use num_traits::{One, ToPrimitive};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gnn::{Activation, GnnError, SageLayer, SageModel};
use crate::paillier::{
    read_biguint, write_biguint, Ciphertext, FixedPointCodec, KeyId, KeySize, PaillierError, PublicKey, Scale,
    DEFAULT_FRAC_BITS,
};
use crate::polyact::{PolyError, QuadActivation};

mod party;
mod transport;

pub use party::{ActiveParty, Observation, ObservedKind, Party, PassiveParty, ServerParty, UnsupervisedTerm};
pub use transport::{
    drive, run_in_process, tcp_mesh, Endpoint, FederatedSession, InProcessTransport, SessionReport, StreamEndpoint,
};

/// Magnitude bound of noise masks in real units.
pub const MASK_BITS: u32 = 20;

const FRAME_MAGIC: &[u8; 4] = b"FVG1";
const FRAME_HEADER_LEN: usize = 22;
/// Upper bound on a frame payload, guarding reads of corrupt length fields.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("stale round from {sender:?}: {got} after {last}")]
    StaleRound { sender: PartyRole, last: u32, got: u32 },
    #[error("session id {found:#x} does not match {expected:#x}")]
    SessionMismatch { expected: u64, found: u64 },
    #[error("ciphertext under key {found}, session key is {expected}")]
    ForeignKey { expected: KeyId, found: KeyId },
    #[error("{0:?} drew a noise mask it had already used")]
    MaskReuse(PartyRole),
    #[error("{role:?} cannot send to {to:?}")]
    UnknownRecipient { role: PartyRole, to: PartyRole },
    #[error("duplicate role {0:?}")]
    DuplicateRole(PartyRole),
    #[error("malformed frame: {0}")]
    Wire(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("no party can make progress")]
    Deadlock,
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartyRole {
    Passive,
    Active,
    Server,
}

impl PartyRole {
    pub const ALL: [PartyRole; 3] = [PartyRole::Passive, PartyRole::Active, PartyRole::Server];

    pub fn tag(self) -> u8 {
        match self {
            PartyRole::Passive => 0,
            PartyRole::Active => 1,
            PartyRole::Server => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    PubKeyDist = 1,
    NeighborCount = 2,
    EncShare = 3,
    PlainSum = 4,
    BackwardShare = 5,
    EncPartialLoss = 6,
    EncDelta = 7,
    MaskedEncGrad = 8,
    MaskedPlainGrad = 9,
    MaskedEncUpstream = 10,
    MaskedPlainUpstream = 11,
    PlainUpstream = 12,
}

impl MessageKind {
    const ALL: [MessageKind; 12] = [
        MessageKind::PubKeyDist,
        MessageKind::NeighborCount,
        MessageKind::EncShare,
        MessageKind::PlainSum,
        MessageKind::BackwardShare,
        MessageKind::EncPartialLoss,
        MessageKind::EncDelta,
        MessageKind::MaskedEncGrad,
        MessageKind::MaskedPlainGrad,
        MessageKind::MaskedEncUpstream,
        MessageKind::MaskedPlainUpstream,
        MessageKind::PlainUpstream,
    ];

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| *k as u8 == t)
    }
}

/// Message bodies. Node-by-unit matrices travel row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Server's public modulus.
    PubKeyDist {
        modulus: BigUint,
    },
    /// Per-node neighbor counts: local counts from a data party, totals from
    /// the server.
    NeighborCount {
        counts: Vec<u32>,
    },
    /// Forward share `[[w·h]]` of one layer.
    EncShare {
        layer: u32,
        shares: Vec<Ciphertext>,
    },
    /// Decrypted pre-activation sum.
    PlainSum {
        layer: u32,
        values: Vec<f64>,
    },
    /// `[[w·h]]` exchanged between the data parties during backward.
    BackwardShare {
        layer: u32,
        shares: Vec<Ciphertext>,
    },
    /// `[[L_A]]` from A to B, or `[[L]]` from B to the server.
    EncPartialLoss {
        layer: u32,
        losses: Vec<Ciphertext>,
    },
    /// `[[δ]]` and `[[δ / deg]]` from B to A.
    EncDelta {
        layer: u32,
        delta: Vec<Ciphertext>,
        delta_over_degree: Vec<Ciphertext>,
    },
    MaskedEncGrad {
        layer: u32,
        grads: Vec<Ciphertext>,
    },
    /// Decrypted blinded gradient as residues mod n.
    MaskedPlainGrad {
        layer: u32,
        residues: Vec<BigUint>,
    },
    MaskedEncUpstream {
        layer: u32,
        values: Vec<Ciphertext>,
    },
    MaskedPlainUpstream {
        layer: u32,
        residues: Vec<BigUint>,
    },
    /// A's unblinded term of the error for the layer below.
    PlainUpstream {
        layer: u32,
        values: Vec<f64>,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::PubKeyDist { .. } => MessageKind::PubKeyDist,
            Payload::NeighborCount { .. } => MessageKind::NeighborCount,
            Payload::EncShare { .. } => MessageKind::EncShare,
            Payload::PlainSum { .. } => MessageKind::PlainSum,
            Payload::BackwardShare { .. } => MessageKind::BackwardShare,
            Payload::EncPartialLoss { .. } => MessageKind::EncPartialLoss,
            Payload::EncDelta { .. } => MessageKind::EncDelta,
            Payload::MaskedEncGrad { .. } => MessageKind::MaskedEncGrad,
            Payload::MaskedPlainGrad { .. } => MessageKind::MaskedPlainGrad,
            Payload::MaskedEncUpstream { .. } => MessageKind::MaskedEncUpstream,
            Payload::MaskedPlainUpstream { .. } => MessageKind::MaskedPlainUpstream,
            Payload::PlainUpstream { .. } => MessageKind::PlainUpstream,
        }
    }

    /// Layer index; setup messages use 0.
    pub fn layer(&self) -> u32 {
        match self {
            Payload::PubKeyDist { .. } | Payload::NeighborCount { .. } => 0,
            Payload::EncShare { layer, .. }
            | Payload::PlainSum { layer, .. }
            | Payload::BackwardShare { layer, .. }
            | Payload::EncPartialLoss { layer, .. }
            | Payload::EncDelta { layer, .. }
            | Payload::MaskedEncGrad { layer, .. }
            | Payload::MaskedPlainGrad { layer, .. }
            | Payload::MaskedEncUpstream { layer, .. }
            | Payload::MaskedPlainUpstream { layer, .. }
            | Payload::PlainUpstream { layer, .. } => *layer,
        }
    }

    /// Number of scalar values carried: the unit the cost counters use.
    pub fn item_count(&self) -> usize {
        match self {
            Payload::PubKeyDist { .. } => 1,
            Payload::NeighborCount { counts } => counts.len(),
            Payload::EncShare { shares, .. } | Payload::BackwardShare { shares, .. } => shares.len(),
            Payload::PlainSum { values, .. } | Payload::PlainUpstream { values, .. } => values.len(),
            Payload::EncPartialLoss { losses, .. } => losses.len(),
            Payload::EncDelta { delta, delta_over_degree, .. } => delta.len() + delta_over_degree.len(),
            Payload::MaskedEncGrad { grads, .. } => grads.len(),
            Payload::MaskedEncUpstream { values, .. } => values.len(),
            Payload::MaskedPlainGrad { residues, .. } | Payload::MaskedPlainUpstream { residues, .. } => residues.len(),
        }
    }

    pub fn ciphertexts(&self) -> Box<dyn Iterator<Item = &Ciphertext> + '_> {
        match self {
            Payload::EncShare { shares, .. } | Payload::BackwardShare { shares, .. } => Box::new(shares.iter()),
            Payload::EncPartialLoss { losses, .. } => Box::new(losses.iter()),
            Payload::EncDelta { delta, delta_over_degree, .. } => Box::new(delta.iter().chain(delta_over_degree)),
            Payload::MaskedEncGrad { grads, .. } => Box::new(grads.iter()),
            Payload::MaskedEncUpstream { values, .. } => Box::new(values.iter()),
            _ => Box::new(std::iter::empty()),
        }
    }

    fn encode(&self, buf: &mut Vec<u8>) -> Result<()> {
        match self {
            Payload::PubKeyDist { modulus } => write_biguint(buf, modulus),
            Payload::NeighborCount { counts } => {
                put_len(buf, counts.len());
                for c in counts {
                    buf.extend_from_slice(&c.to_be_bytes());
                }
            }
            Payload::EncShare { layer, shares: cts }
            | Payload::BackwardShare { layer, shares: cts }
            | Payload::EncPartialLoss { layer, losses: cts }
            | Payload::MaskedEncGrad { layer, grads: cts }
            | Payload::MaskedEncUpstream { layer, values: cts } => {
                buf.extend_from_slice(&layer.to_be_bytes());
                put_ciphertexts(buf, cts)?;
            }
            Payload::EncDelta { layer, delta, delta_over_degree } => {
                buf.extend_from_slice(&layer.to_be_bytes());
                put_ciphertexts(buf, delta)?;
                put_ciphertexts(buf, delta_over_degree)?;
            }
            Payload::PlainSum { layer, values } | Payload::PlainUpstream { layer, values } => {
                buf.extend_from_slice(&layer.to_be_bytes());
                put_len(buf, values.len());
                for v in values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::MaskedPlainGrad { layer, residues } | Payload::MaskedPlainUpstream { layer, residues } => {
                buf.extend_from_slice(&layer.to_be_bytes());
                put_len(buf, residues.len());
                for r in residues {
                    write_biguint(buf, r);
                }
            }
        }
        Ok(())
    }

    fn decode(kind: MessageKind, body: &[u8]) -> Result<Self> {
        let mut c = Reader { buf: body, pos: 0 };
        let p = match kind {
            MessageKind::PubKeyDist => Payload::PubKeyDist { modulus: c.biguint()? },
            MessageKind::NeighborCount => {
                let n = c.len()?;
                Payload::NeighborCount { counts: (0..n).map(|_| c.u32()).collect::<Result<_>>()? }
            }
            MessageKind::EncShare => Payload::EncShare { layer: c.u32()?, shares: c.ciphertexts()? },
            MessageKind::BackwardShare => Payload::BackwardShare { layer: c.u32()?, shares: c.ciphertexts()? },
            MessageKind::EncPartialLoss => Payload::EncPartialLoss { layer: c.u32()?, losses: c.ciphertexts()? },
            MessageKind::MaskedEncGrad => Payload::MaskedEncGrad { layer: c.u32()?, grads: c.ciphertexts()? },
            MessageKind::MaskedEncUpstream => Payload::MaskedEncUpstream { layer: c.u32()?, values: c.ciphertexts()? },
            MessageKind::EncDelta => {
                Payload::EncDelta { layer: c.u32()?, delta: c.ciphertexts()?, delta_over_degree: c.ciphertexts()? }
            }
            MessageKind::PlainSum => Payload::PlainSum { layer: c.u32()?, values: c.f64s()? },
            MessageKind::PlainUpstream => Payload::PlainUpstream { layer: c.u32()?, values: c.f64s()? },
            MessageKind::MaskedPlainGrad => Payload::MaskedPlainGrad { layer: c.u32()?, residues: c.biguints()? },
            MessageKind::MaskedPlainUpstream => {
                Payload::MaskedPlainUpstream { layer: c.u32()?, residues: c.biguints()? }
            }
        };
        if c.pos != body.len() {
            return Err(ProtocolError::Wire(format!("{} trailing bytes", body.len() - c.pos)));
        }
        Ok(p)
    }
}

fn put_len(buf: &mut Vec<u8>, n: usize) {
    buf.extend_from_slice(&(n as u32).to_be_bytes());
}

/// `key_id(8) | scale(1) | count(4) | length-prefixed integers`.
fn put_ciphertexts(buf: &mut Vec<u8>, cts: &[Ciphertext]) -> Result<()> {
    let (key, scale) = match cts.first() {
        Some(c) => (c.key_id(), c.scale()),
        None => (KeyId([0; 8]), Scale::Single),
    };
    if cts.iter().any(|c| c.key_id() != key || c.scale() != scale) {
        return Err(ProtocolError::Wire("mixed key or scale in one ciphertext vector".into()));
    }
    buf.extend_from_slice(&key.0);
    buf.push(match scale {
        Scale::Single => 1,
        Scale::Double => 2,
    });
    put_len(buf, cts.len());
    for c in cts {
        write_biguint(buf, c.value());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out =
            self.buf.get(self.pos..self.pos + n).ok_or_else(|| ProtocolError::Wire("truncated payload".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    /// Element count, bounded by the bytes that remain.
    fn len(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > self.buf.len() - self.pos {
            return Err(ProtocolError::Wire(format!("count {n} exceeds payload")));
        }
        Ok(n)
    }

    fn biguint(&mut self) -> Result<BigUint> {
        let (v, used) = read_biguint(&self.buf[self.pos..])?;
        self.pos += used;
        Ok(v)
    }

    fn biguints(&mut self) -> Result<Vec<BigUint>> {
        let n = self.len()?;
        (0..n).map(|_| self.biguint()).collect()
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))).collect()
    }

    fn ciphertexts(&mut self) -> Result<Vec<Ciphertext>> {
        let key = KeyId(self.take(8)?.try_into().expect("8 bytes"));
        let scale = match self.take(1)?[0] {
            1 => Scale::Single,
            2 => Scale::Double,
            s => return Err(ProtocolError::Wire(format!("unknown scale {s}"))),
        };
        let n = self.len()?;
        (0..n).map(|_| Ok(Ciphertext::from_parts(self.biguint()?, key, scale))).collect()
    }
}

/// A payload with its routing header.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub session: u64,
    /// Strictly increasing per sender.
    pub round: u32,
    pub sender: PartyRole,
    pub payload: Payload,
}

impl Envelope {
    /// `"FVG1" | session(8) | round(4) | sender(1) | tag(1) | len(4) | payload`,
    /// integers big-endian.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        self.payload.encode(&mut body)?;
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
        out.extend_from_slice(FRAME_MAGIC);
        out.extend_from_slice(&self.session.to_be_bytes());
        out.extend_from_slice(&self.round.to_be_bytes());
        out.push(self.sender.tag());
        out.push(self.payload.kind() as u8);
        put_len(&mut out, body.len());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn decode(frame: &[u8]) -> Result<Self> {
        let header = frame.get(..FRAME_HEADER_LEN).ok_or_else(|| ProtocolError::Wire("short header".into()))?;
        let (session, round, sender, kind, len) = parse_header(header)?;
        if frame.len() != FRAME_HEADER_LEN + len {
            return Err(ProtocolError::Wire(format!(
                "payload length {len} but {} bytes follow",
                frame.len() - FRAME_HEADER_LEN
            )));
        }
        Ok(Self { session, round, sender, payload: Payload::decode(kind, &frame[FRAME_HEADER_LEN..])? })
    }
}

fn parse_header(h: &[u8]) -> Result<(u64, u32, PartyRole, MessageKind, usize)> {
    if &h[..4] != FRAME_MAGIC {
        return Err(ProtocolError::Wire("bad magic".into()));
    }
    let session = u64::from_be_bytes(h[4..12].try_into().expect("8 bytes"));
    let round = u32::from_be_bytes(h[12..16].try_into().expect("4 bytes"));
    let sender = PartyRole::from_tag(h[16]).ok_or_else(|| ProtocolError::Wire(format!("role tag {}", h[16])))?;
    let kind = MessageKind::from_tag(h[17]).ok_or_else(|| ProtocolError::Wire(format!("variant tag {}", h[17])))?;
    let len = u32::from_be_bytes(h[18..22].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::Wire(format!("payload length {len} over limit")));
    }
    Ok((session, round, sender, kind, len))
}

/// Read one frame; `None` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Envelope>> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut got = 0;
    while got < FRAME_HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Transport("connection closed mid-frame".into())),
            Ok(k) => got += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (session, round, sender, kind, len) = parse_header(&header)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| ProtocolError::Transport(format!("connection closed mid-frame: {e}")))?;
    Ok(Some(Envelope { session, round, sender, payload: Payload::decode(kind, &body)? }))
}

pub fn write_frame<W: Write>(w: &mut W, env: &Envelope) -> Result<()> {
    w.write_all(&env.encode()?)?;
    w.flush()?;
    Ok(())
}

/// Per-layer cost tallies. Message counts are in scalar items (one
/// ciphertext, residue, count or real), summed over senders.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Encrypted forward shares uploaded by the data parties.
    pub forward_messages: u64,
    /// Plaintext sums returned by the server.
    pub forward_returns: u64,
    pub backward_messages: u64,
    pub encryptions: u64,
    pub decryptions: u64,
    pub ciphertext_adds: u64,
    pub scalar_muls: u64,
}

impl LayerCost {
    fn merge(&mut self, o: &LayerCost) {
        self.forward_messages += o.forward_messages;
        self.forward_returns += o.forward_returns;
        self.backward_messages += o.backward_messages;
        self.encryptions += o.encryptions;
        self.decryptions += o.decryptions;
        self.ciphertext_adds += o.ciphertext_adds;
        self.scalar_muls += o.scalar_muls;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub setup_messages: u64,
    /// Completed training iterations.
    pub iterations: u64,
    pub layers: Vec<LayerCost>,
    /// Largest number of scalar products folded into any decrypted
    /// ciphertext.
    pub max_product_depth: u8,
}

impl CostCounters {
    pub fn layer_mut(&mut self, l: usize) -> &mut LayerCost {
        if self.layers.len() <= l {
            self.layers.resize(l + 1, LayerCost::default());
        }
        &mut self.layers[l]
    }

    fn record_send(&mut self, p: &Payload) {
        let items = p.item_count() as u64;
        let layer = p.layer() as usize;
        match p.kind() {
            MessageKind::PubKeyDist | MessageKind::NeighborCount => self.setup_messages += items,
            MessageKind::EncShare => self.layer_mut(layer).forward_messages += items,
            MessageKind::PlainSum => self.layer_mut(layer).forward_returns += items,
            _ => self.layer_mut(layer).backward_messages += items,
        }
    }

    pub fn merge(&mut self, other: &CostCounters) {
        self.setup_messages += other.setup_messages;
        self.iterations = self.iterations.max(other.iterations);
        self.max_product_depth = self.max_product_depth.max(other.max_product_depth);
        for (l, c) in other.layers.iter().enumerate() {
            self.layer_mut(l).merge(c);
        }
    }

    pub fn forward_messages(&self) -> u64 {
        self.layers.iter().map(|l| l.forward_messages).sum()
    }

    pub fn backward_messages(&self) -> u64 {
        self.layers.iter().map(|l| l.backward_messages).sum()
    }

    /// Every message item counted, setup included.
    pub fn total_messages(&self) -> u64 {
        self.setup_messages
            + self.layers.iter().map(|l| l.forward_messages + l.forward_returns + l.backward_messages).sum::<u64>()
    }

    pub fn scalar_muls(&self) -> u64 {
        self.layers.iter().map(|l| l.scalar_muls).sum()
    }
}

/// Fresh per-round blinding values at double fixed-point scale, held only by
/// their creator. Consumed by [`FixedPointCodecExt::unmask`], so each mask is
/// subtracted exactly once.
#[derive(Debug, PartialEq, Eq)]
pub struct NoiseMask {
    values: Vec<BigInt>,
}

impl NoiseMask {
    /// Uniform integers in `±2^(MASK_BITS + 2·frac_bits)`, i.e. reals in
    /// `±2^MASK_BITS` at double-scale resolution.
    pub fn draw(rng: &mut impl Rng, len: usize, frac_bits: u32) -> Self {
        let bound = BigInt::one() << (MASK_BITS + 2 * frac_bits) as usize;
        let lo = -bound.clone();
        let hi = bound + 1u32;
        Self { values: (0..len).map(|_| rng.gen_bigint_range(&lo, &hi)).collect() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in &self.values {
            let bytes = v.to_signed_bytes_be();
            h.update((bytes.len() as u32).to_be_bytes());
            h.update(&bytes);
        }
        h.finalize().into()
    }

    /// Real value of each entry; for inspection in tests.
    pub fn as_reals(&self, frac_bits: u32) -> Vec<f64> {
        let scale = 2f64.powi(-2 * frac_bits as i32);
        self.values.iter().map(|v| v.to_f64().unwrap_or(f64::NAN) * scale).collect()
    }

    /// Homomorphically add the mask to `cts` (double scale).
    pub fn apply(&self, pk: &PublicKey, codec: &FixedPointCodec, cts: &[Ciphertext]) -> Result<Vec<Ciphertext>> {
        if cts.len() != self.values.len() {
            return Err(ProtocolError::Dimension(format!("mask {} for {} ciphertexts", self.values.len(), cts.len())));
        }
        cts.par_iter().zip(self.values.par_iter()).map(|(c, m)| Ok(pk.add_plain(c, &codec.wrap_signed(m)?)?)).collect()
    }
}

/// Tracks mask fingerprints so a repeated mask is an error.
#[derive(Debug, Default)]
pub struct MaskLedger {
    seen: HashSet<[u8; 32]>,
}

impl MaskLedger {
    pub fn admit(&mut self, role: PartyRole, mask: &NoiseMask) -> Result<()> {
        if mask.is_empty() || self.seen.insert(mask.fingerprint()) {
            Ok(())
        } else {
            Err(ProtocolError::MaskReuse(role))
        }
    }
}

pub trait FixedPointCodecExt {
    /// Subtract `mask` from decrypted double-scale residues and decode.
    fn unmask(&self, residues: &[BigUint], mask: NoiseMask) -> Result<Vec<f64>>;
}

impl FixedPointCodecExt for FixedPointCodec {
    fn unmask(&self, residues: &[BigUint], mask: NoiseMask) -> Result<Vec<f64>> {
        if residues.len() != mask.values.len() {
            return Err(ProtocolError::Dimension(format!(
                "{} residues for a mask of {}",
                residues.len(),
                mask.values.len()
            )));
        }
        let scale = 2f64.powi(-2 * self.frac_bits() as i32);
        Ok(residues
            .iter()
            .zip(mask.values)
            .map(|(r, m)| (self.to_signed(r) - m).to_f64().unwrap_or(f64::NAN) * scale)
            .collect())
    }
}

/// One data party's slice of a two-relation model. `w_self[l]` is `None`
/// where the other party owns the self weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyWeights {
    pub w_self: Vec<Option<Array2<f64>>>,
    pub w_neigh: Vec<Array2<f64>>,
}

impl PartyWeights {
    pub fn num_layers(&self) -> usize {
        self.w_neigh.len()
    }

    pub fn out_dim(&self, l: usize) -> usize {
        self.w_neigh[l].ncols()
    }

    /// Gradient layout: `w_self` row-major (if owned) then `w_neigh`.
    pub fn grad_len(&self, l: usize) -> usize {
        self.w_self[l].as_ref().map_or(0, |w| w.len()) + self.w_neigh[l].len()
    }

    /// `w ← w − η·g` for a gradient in [`Self::grad_len`] layout.
    pub fn sgd(&mut self, l: usize, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.grad_len(l) {
            return Err(ProtocolError::Dimension(format!("gradient of {} for layer {l}", grad.len())));
        }
        let mut it = grad.iter();
        if let Some(w) = self.w_self[l].as_mut() {
            w.iter_mut().zip(it.by_ref()).for_each(|(w, g)| *w -= lr * g);
        }
        self.w_neigh[l].iter_mut().zip(it).for_each(|(w, g)| *w -= lr * g);
        Ok(())
    }
}

/// Split a two-relation model (relation 0 passive, relation 1 active, input
/// columns `[passive | active]`) into the parties' weights. A owns its
/// feature rows of the first self weight and its relation's neighbor weights;
/// B owns the rest.
pub fn split_model(model: &SageModel, passive_cols: usize) -> Result<(PartyWeights, PartyWeights)> {
    let mut a = PartyWeights { w_self: Vec::new(), w_neigh: Vec::new() };
    let mut b = a.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        if layer.w_neigh.len() != 2 {
            return Err(ProtocolError::Dimension(format!("layer {l} has {} relations, need 2", layer.w_neigh.len())));
        }
        if l == 0 {
            if passive_cols > layer.in_dim() || layer.w_neigh[0].nrows() != passive_cols {
                return Err(ProtocolError::Dimension("first layer does not match the column split".into()));
            }
            a.w_self.push(Some(layer.w_self.slice(s![..passive_cols, ..]).to_owned()));
            b.w_self.push(Some(layer.w_self.slice(s![passive_cols.., ..]).to_owned()));
        } else {
            a.w_self.push(None);
            b.w_self.push(Some(layer.w_self.clone()));
        }
        a.w_neigh.push(layer.w_neigh[0].clone());
        b.w_neigh.push(layer.w_neigh[1].clone());
    }
    Ok((a, b))
}

/// Inverse of [`split_model`].
pub fn merge_model(a: &PartyWeights, b: &PartyWeights, template: &SageModel) -> Result<SageModel> {
    if a.num_layers() != b.num_layers() || a.num_layers() != template.layers.len() {
        return Err(ProtocolError::Dimension("layer counts differ".into()));
    }
    let mut layers = Vec::with_capacity(a.num_layers());
    for l in 0..a.num_layers() {
        let w_self = match (&a.w_self[l], &b.w_self[l]) {
            (Some(wa), Some(wb)) => ndarray::concatenate(Axis(0), &[wa.view(), wb.view()])
                .map_err(|e| ProtocolError::Dimension(e.to_string()))?,
            (None, Some(wb)) => wb.clone(),
            _ => return Err(ProtocolError::Dimension(format!("layer {l} self weight ownership"))),
        };
        layers.push(SageLayer { w_self, w_neigh: vec![a.w_neigh[l].clone(), b.w_neigh[l].clone()] });
    }
    Ok(SageModel { layers, ..template.clone() })
}

/// Key and encoding parameters of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub session_id: u64,
    pub key_size: KeySize,
    pub frac_bits: u32,
    /// Seeds key generation, nonces and masks.
    pub seed: u64,
    /// Shared by A and B so their dropout masks agree.
    pub dropout_seed: u64,
}

impl SessionConfig {
    pub fn new(key_size: KeySize, seed: u64) -> Self {
        Self { session_id: seed ^ 0x5E55_1011, key_size, frac_bits: DEFAULT_FRAC_BITS, seed, dropout_seed: seed }
    }

    pub(crate) fn derive(&self, salt: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_be_bytes());
        h.update(salt.to_be_bytes());
        u64::from_be_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }
}

/// Work items every party walks through in the same order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// First-layer forward only; both data parties fit the activation scale
    /// to the returned pre-activations.
    Calibrate,
    /// Forward with dropout, backward, SGD step.
    Train,
    /// Forward without dropout; B records predictions.
    Evaluate,
}

/// Hyperparameters agreed by the data parties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingParams {
    pub activation: QuadActivation,
    pub dropout: f64,
    pub learning_rate: f64,
}

impl TrainingParams {
    pub fn from_model(model: &SageModel) -> Result<Self> {
        let activation = model
            .activation
            .as_quad()
            .ok_or_else(|| ProtocolError::Config("federated training needs the quadratic activation".into()))?;
        Ok(Self { activation, dropout: model.dropout, learning_rate: model.learning_rate })
    }

    pub fn activation(&self) -> Activation {
        Activation::quad(self.activation)
    }
}

/// `[[L_A]]`: B adds its own term and the cross term to reach `[[p(x + y)]]`.
/// Each entry is `c2·x² + c1·x + c0/2`, encrypted at double scale so it can
/// be added to the cross term.
pub fn encrypt_partial_loss(
    pk: &PublicKey,
    codec: &FixedPointCodec,
    q: &QuadActivation,
    x: &[f64],
    rng: &mut impl rand::RngCore,
) -> Result<Vec<Ciphertext>> {
    let ms = x
        .iter()
        .map(|&v| codec.encode_scaled(partial_loss(q, v), Scale::Double))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(pk.encrypt_batch(&ms, Scale::Double, rng)?)
}

fn partial_loss(q: &QuadActivation, v: f64) -> f64 {
    let [c0, c1, c2] = q.coefficients();
    c2 * v * v + c1 * v + c0 / 2.0
}

/// Encrypted pieces of `p(x + y)` for a quadratic `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossShares {
    pub l_a: Vec<Ciphertext>,
    pub l_b: Vec<Ciphertext>,
    /// `[[2·c2·x·y]]`, one scalar product of `[[x]]`.
    pub l_ab: Vec<Ciphertext>,
    pub total: Vec<Ciphertext>,
}

/// B's side of the loss assembly: from A's `[[x]]` and `[[L_A]]` and its own
/// plaintext `y`, build `[[L]] = [[L_A]] ⊕ [[L_B]] ⊕ [[L_AB]]`.
pub fn loss_decompose_encrypted(
    pk: &PublicKey,
    codec: &FixedPointCodec,
    q: &QuadActivation,
    enc_x: &[Ciphertext],
    l_a: Vec<Ciphertext>,
    y: &[f64],
    rng: &mut impl rand::RngCore,
) -> Result<LossShares> {
    if enc_x.len() != y.len() || l_a.len() != y.len() {
        return Err(ProtocolError::Dimension(format!(
            "shares {} / {} against {} local values",
            enc_x.len(),
            l_a.len(),
            y.len()
        )));
    }
    let l_b = encrypt_partial_loss(pk, codec, q, y, rng)?;
    let cross = 2.0 * q.coefficients()[2];
    let l_ab = enc_x
        .par_iter()
        .zip(y.par_iter())
        .map(|(c, &v)| Ok(pk.mul_signed(c, &codec.encode_int(cross * v)?)?))
        .collect::<Result<Vec<_>>>()?;
    let total = l_a
        .par_iter()
        .zip(l_b.par_iter())
        .zip(l_ab.par_iter())
        .map(|((a, b), c)| Ok(pk.add_ct(&pk.add_ct(a, b)?, c)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossShares { l_a, l_b, l_ab, total })
}

/// `G[i, j] = Σ_v x[v, i] · [[c[v, j]]]` for a plaintext `n × d` matrix and
/// `n × out` single-scale ciphertexts. Zero entries of `x` are skipped.
/// Returns the `d × out` products and the number of scalar products taken.
pub fn encrypted_transpose_product(
    pk: &PublicKey,
    codec: &FixedPointCodec,
    x: &Array2<f64>,
    cts: &[Ciphertext],
    out: usize,
) -> Result<(Vec<Ciphertext>, u64)> {
    let (n, d) = x.dim();
    if cts.len() != n * out {
        return Err(ProtocolError::Dimension(format!("{} ciphertexts for {n}×{out}", cts.len())));
    }
    let columns: Vec<Vec<(usize, BigInt)>> = (0..d)
        .map(|i| {
            x.column(i)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(v, &val)| Ok((v, codec.encode_int(val)?)))
                .collect::<std::result::Result<Vec<_>, PaillierError>>()
        })
        .collect::<std::result::Result<_, _>>()?;
    let muls = columns.iter().map(Vec::len).sum::<usize>() as u64 * out as u64;
    let grads = (0..d * out)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / out, idx % out);
            Ok(pk.dot_signed(columns[i].iter().map(|(v, s)| (&cts[v * out + j], s)))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grads, muls))
}

/// `S[u, j] = Σ_{v ∈ N(u)} [[c[v, j]]]` by ciphertext additions only.
pub fn encrypted_neighbor_sum(
    pk: &PublicKey,
    adjacency: &[Vec<usize>],
    cts: &[Ciphertext],
    out: usize,
) -> Result<(Vec<Ciphertext>, u64)> {
    let n = adjacency.len();
    if cts.len() != n * out {
        return Err(ProtocolError::Dimension(format!("{} ciphertexts for {n}×{out}", cts.len())));
    }
    let adds = adjacency.iter().map(Vec::len).sum::<usize>() as u64 * out as u64;
    let sums = (0..n * out)
        .into_par_iter()
        .map(|idx| {
            let (u, j) = (idx / out, idx % out);
            adjacency[u].iter().try_fold(pk.zero(Scale::Single), |acc, &v| Ok(pk.add_ct(&acc, &cts[v * out + j])?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sums, adds))
}

/// `U[u, i] = Σ_j w[i, j] · [[s[u, j]]]` for plaintext `w` (`d × out`).
pub fn encrypted_weight_product(
    pk: &PublicKey,
    codec: &FixedPointCodec,
    s: &[Ciphertext],
    w: &Array2<f64>,
) -> Result<(Vec<Ciphertext>, u64)> {
    let (d, out) = w.dim();
    if out == 0 || !s.len().is_multiple_of(out) {
        return Err(ProtocolError::Dimension(format!("{} ciphertexts for width {out}", s.len())));
    }
    let n = s.len() / out;
    let scalars: Vec<Vec<(usize, BigInt)>> = (0..d)
        .map(|i| {
            w.row(i)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(j, &v)| Ok((j, codec.encode_int(v)?)))
                .collect::<std::result::Result<Vec<_>, PaillierError>>()
        })
        .collect::<std::result::Result<_, _>>()?;
    let muls = scalars.iter().map(Vec::len).sum::<usize>() as u64 * n as u64;
    let out_cts = (0..n * d)
        .into_par_iter()
        .map(|idx| {
            let (u, i) = (idx / d, idx % d);
            Ok(pk.dot_signed(scalars[i].iter().map(|(j, c)| (&s[u * out + j], c)))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out_cts, muls))
}

/// Encrypt reals at `scale` in row-major order.
pub fn encrypt_reals(
    pk: &PublicKey,
    codec: &FixedPointCodec,
    values: impl IntoIterator<Item = f64>,
    scale: Scale,
    rng: &mut impl rand::RngCore,
) -> Result<Vec<Ciphertext>> {
    let ms = values.into_iter().map(|v| codec.encode_scaled(v, scale)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(pk.encrypt_batch(&ms, scale, rng)?)
}

fn to_matrix(values: Vec<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| ProtocolError::Dimension(format!("expected {rows}×{cols}: {e}")))
}

/// Inbox, outbox, round numbering and per-sender checks shared by all roles.
#[derive(Debug)]
pub(crate) struct PartyIo {
    role: PartyRole,
    session: u64,
    next_round: u32,
    last_round: BTreeMap<PartyRole, u32>,
    key_id: Option<KeyId>,
    inbox: BTreeMap<(PartyRole, MessageKind, u32), VecDeque<Payload>>,
    outbox: Vec<(PartyRole, Envelope)>,
    pub(crate) counters: CostCounters,
}

impl PartyIo {
    pub(crate) fn new(role: PartyRole, session: u64) -> Self {
        Self {
            role,
            session,
            next_round: 0,
            last_round: BTreeMap::new(),
            key_id: None,
            inbox: BTreeMap::new(),
            outbox: Vec::new(),
            counters: CostCounters::default(),
        }
    }

    pub(crate) fn set_key(&mut self, k: KeyId) {
        self.key_id = Some(k);
    }

    pub(crate) fn send(&mut self, to: PartyRole, payload: Payload) -> Result<()> {
        if to == self.role {
            return Err(ProtocolError::UnknownRecipient { role: self.role, to });
        }
        self.next_round += 1;
        self.counters.record_send(&payload);
        let env = Envelope { session: self.session, round: self.next_round, sender: self.role, payload };
        self.outbox.push((to, env));
        Ok(())
    }

    pub(crate) fn deliver(&mut self, env: Envelope) -> Result<()> {
        if env.session != self.session {
            return Err(ProtocolError::SessionMismatch { expected: self.session, found: env.session });
        }
        if env.sender == self.role {
            return Err(ProtocolError::UnknownRecipient { role: env.sender, to: self.role });
        }
        let last = self.last_round.get(&env.sender).copied().unwrap_or(0);
        if env.round <= last {
            return Err(ProtocolError::StaleRound { sender: env.sender, last, got: env.round });
        }
        if let Some(expected) = self.key_id {
            if let Some(c) = env.payload.ciphertexts().find(|c| c.key_id() != expected) {
                return Err(ProtocolError::ForeignKey { expected, found: c.key_id() });
            }
        }
        self.last_round.insert(env.sender, env.round);
        let key = (env.sender, env.payload.kind(), env.payload.layer());
        self.inbox.entry(key).or_default().push_back(env.payload);
        Ok(())
    }

    pub(crate) fn has(&self, from: PartyRole, kind: MessageKind, layer: usize) -> bool {
        self.inbox.get(&(from, kind, layer as u32)).is_some_and(|q| !q.is_empty())
    }

    pub(crate) fn take(&mut self, from: PartyRole, kind: MessageKind, layer: usize) -> Option<Payload> {
        let key = (from, kind, layer as u32);
        let q = self.inbox.get_mut(&key)?;
        let p = q.pop_front();
        if q.is_empty() {
            self.inbox.remove(&key);
        }
        p
    }

    pub(crate) fn drain_outbox(&mut self) -> Vec<(PartyRole, Envelope)> {
        std::mem::take(&mut self.outbox)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::keygen;
    use num_traits::Zero;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::f64::consts::PI;

    fn key() -> (PublicKey, crate::paillier::SecretKey, FixedPointCodec) {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (pk, sk) = keygen(KeySize::Test512, &mut rng);
        let codec = FixedPointCodec::for_key(&pk, DEFAULT_FRAC_BITS);
        (pk, sk, codec)
    }

    #[test]
    fn loss_decomposition_cases() {
        let (pk, sk, codec) = key();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let dec = |c: &Ciphertext| codec.decode_scaled(&sk.decrypt(c).unwrap(), c.scale());
        let q = QuadActivation::new(1.0).unwrap();
        let run = |x: f64, y: f64, q: &QuadActivation, rng: &mut ChaCha20Rng| {
            let ex = encrypt_reals(&pk, &codec, [x], Scale::Single, rng).unwrap();
            let la = encrypt_partial_loss(&pk, &codec, q, &[x], rng).unwrap();
            loss_decompose_encrypted(&pk, &codec, q, &ex, la, &[y], rng).unwrap()
        };

        let s = run(1.0, 0.0, &q, &mut rng);
        let want = 4.0 / (3.0 * PI) + 0.5 + 1.0 / (2.0 * PI);
        assert!((dec(&s.total[0]) - want).abs() < 1e-9);

        let a = 1.7;
        let qa = QuadActivation::new(a).unwrap();
        let s = run(0.0, 0.0, &qa, &mut rng);
        assert!((dec(&s.l_a[0]) - a / (4.0 * PI)).abs() < 1e-12);
        assert!((dec(&s.l_b[0]) - a / (4.0 * PI)).abs() < 1e-12);
        assert!((dec(&s.total[0]) - a / (2.0 * PI)).abs() < 1e-12);

        for _ in 0..10 {
            let (x, y) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let s = run(x, y, &qa, &mut rng);
            assert!((dec(&s.total[0]) - qa.apply(x + y)).abs() < 1e-8);
            assert_eq!(s.l_ab[0].scale(), Scale::Double);
        }
    }

    #[test]
    fn mask_unmask_is_exact() {
        let (pk, sk, codec) = key();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let g = [0.125, -3.5, 1e-6, 0.0];
        let ms: Vec<BigUint> = g.iter().map(|&v| codec.encode_scaled(v, Scale::Double).unwrap()).collect();
        let cts = pk.encrypt_batch(&ms, Scale::Double, &mut rng).unwrap();
        let mask = NoiseMask::draw(&mut rng, g.len(), DEFAULT_FRAC_BITS);
        let masked = mask.apply(&pk, &codec, &cts).unwrap();
        let residues = sk.decrypt_batch(&masked).unwrap();
        let seen: Vec<f64> = residues.iter().map(|r| codec.decode_scaled(r, Scale::Double)).collect();
        assert!(seen.iter().zip(&g).all(|(s, v)| s != v));
        let back = codec.unmask(&residues, mask).unwrap();
        for (b, v) in back.iter().zip(&g) {
            assert_eq!(*b, codec.decode_scaled(&codec.encode_scaled(*v, Scale::Double).unwrap(), Scale::Double));
        }
    }

    #[test]
    fn mask_ledger_rejects_reuse() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut ledger = MaskLedger::default();
        let m = NoiseMask::draw(&mut rng, 4, 32);
        ledger.admit(PartyRole::Passive, &m).unwrap();
        assert!(matches!(ledger.admit(PartyRole::Passive, &m), Err(ProtocolError::MaskReuse(_))));
        let reals = m.as_reals(32);
        assert!(reals.iter().all(|v| v.abs() <= (1u64 << MASK_BITS) as f64));
    }

    #[test]
    fn frame_roundtrip_every_variant() {
        let (pk, _, codec) = key();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let cts = encrypt_reals(&pk, &codec, [0.5, -1.0], Scale::Single, &mut rng).unwrap();
        let dbl = encrypt_reals(&pk, &codec, [2.0], Scale::Double, &mut rng).unwrap();
        let payloads = vec![
            Payload::PubKeyDist { modulus: pk.n().clone() },
            Payload::NeighborCount { counts: vec![0, 3, u32::MAX] },
            Payload::EncShare { layer: 1, shares: cts.clone() },
            Payload::PlainSum { layer: 2, values: vec![-0.0, 1.5, f64::MIN_POSITIVE] },
            Payload::BackwardShare { layer: 0, shares: vec![] },
            Payload::EncPartialLoss { layer: 3, losses: dbl.clone() },
            Payload::EncDelta { layer: 1, delta: cts.clone(), delta_over_degree: cts.clone() },
            Payload::MaskedEncGrad { layer: 0, grads: dbl.clone() },
            Payload::MaskedPlainGrad { layer: 0, residues: vec![BigUint::zero(), pk.n() - 1u32] },
            Payload::MaskedEncUpstream { layer: 4, values: dbl },
            Payload::MaskedPlainUpstream { layer: 4, residues: vec![BigUint::from(7u32)] },
            Payload::PlainUpstream { layer: 1, values: vec![3.25] },
        ];
        assert_eq!(payloads.len(), MessageKind::ALL.len());
        for (i, p) in payloads.into_iter().enumerate() {
            let env = Envelope { session: 0xABCD, round: i as u32 + 1, sender: PartyRole::Active, payload: p };
            let bytes = env.encode().unwrap();
            assert_eq!(&bytes[..4], b"FVG1");
            assert_eq!(bytes[17], env.payload.kind() as u8);
            assert_eq!(Envelope::decode(&bytes).unwrap(), env);
            let mut stream = bytes.as_slice();
            assert_eq!(read_frame(&mut stream).unwrap().unwrap(), env);
        }
    }

    #[test]
    fn malformed_frames_are_rejected() {
        let env = Envelope {
            session: 1,
            round: 1,
            sender: PartyRole::Server,
            payload: Payload::PlainSum { layer: 0, values: vec![1.0] },
        };
        let good = env.encode().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(Envelope::decode(&bad).is_err());
        let mut bad = good.clone();
        bad[16] = 9;
        assert!(Envelope::decode(&bad).is_err());
        let mut bad = good.clone();
        bad[17] = 99;
        assert!(Envelope::decode(&bad).is_err());
        assert!(Envelope::decode(&good[..good.len() - 1]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(Envelope::decode(&trailing).is_err());
        let mut cut = &good[..10];
        assert!(read_frame(&mut cut).is_err());
        let mut empty: &[u8] = &[];
        assert!(read_frame(&mut empty).unwrap().is_none());
    }

    #[test]
    fn io_checks_rounds_sessions_and_keys() {
        let (pk, _, codec) = key();
        let mut io = PartyIo::new(PartyRole::Server, 5);
        let env = |round, session| Envelope {
            session,
            round,
            sender: PartyRole::Passive,
            payload: Payload::NeighborCount { counts: vec![1] },
        };
        io.deliver(env(1, 5)).unwrap();
        io.deliver(env(3, 5)).unwrap();
        assert!(matches!(io.deliver(env(3, 5)), Err(ProtocolError::StaleRound { got: 3, last: 3, .. })));
        assert!(matches!(io.deliver(env(9, 6)), Err(ProtocolError::SessionMismatch { .. })));
        assert!(io.send(PartyRole::Server, Payload::NeighborCount { counts: vec![] }).is_err());

        io.set_key(KeyId([1; 8]));
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let cts = encrypt_reals(&pk, &codec, [1.0], Scale::Single, &mut rng).unwrap();
        let foreign = Envelope {
            session: 5,
            round: 4,
            sender: PartyRole::Active,
            payload: Payload::EncShare { layer: 0, shares: cts },
        };
        assert!(matches!(io.deliver(foreign), Err(ProtocolError::ForeignKey { .. })));
    }

    #[test]
    fn encrypted_products_match_plaintext() {
        let (pk, sk, codec) = key();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = ndarray::array![[1.0, 0.0], [0.5, -2.0], [0.0, 0.25]];
        let d = ndarray::array![[0.3, -0.1], [1.2, 0.4], [-0.7, 0.9]];
        let cts = encrypt_reals(&pk, &codec, d.iter().copied(), Scale::Single, &mut rng).unwrap();
        let (g, muls) = encrypted_transpose_product(&pk, &codec, &x, &cts, 2).unwrap();
        assert_eq!(muls, 4 * 2);
        let want = x.t().dot(&d);
        for (c, w) in g.iter().zip(want.iter()) {
            assert!((codec.decode_scaled(&sk.decrypt(c).unwrap(), Scale::Double) - w).abs() < 1e-9);
        }

        let adj = vec![vec![1, 2], vec![0], vec![0]];
        let (s, adds) = encrypted_neighbor_sum(&pk, &adj, &cts, 2).unwrap();
        assert_eq!(adds, 4 * 2);
        let dec_s: Vec<f64> = s.iter().map(|c| codec.decode(&sk.decrypt(c).unwrap())).collect();
        assert!((dec_s[0] - (1.2 - 0.7)).abs() < 1e-9);
        assert!((dec_s[3] - (-0.1)).abs() < 1e-9);

        let w = ndarray::array![[0.5, -1.0], [2.0, 0.0], [0.1, 0.3]];
        let (u, _) = encrypted_weight_product(&pk, &codec, &s, &w).unwrap();
        let s_mat = to_matrix(dec_s, 3, 2).unwrap();
        let want = s_mat.dot(&w.t());
        for (c, w) in u.iter().zip(want.iter()) {
            assert!((codec.decode_scaled(&sk.decrypt(c).unwrap(), Scale::Double) - w).abs() < 1e-8);
        }
    }

    #[test]
    fn split_and_merge_roundtrip() {
        use crate::gnn::{GraphInput, ModelSpec, Relation};
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i + j) as f64 / 10.0);
        let input = GraphInput::new(
            x,
            vec![
                Relation { adjacency: vec![vec![1], vec![0], vec![], vec![]], first_layer_columns: Some(vec![0, 1]) },
                Relation {
                    adjacency: vec![vec![], vec![], vec![3], vec![2]],
                    first_layer_columns: Some(vec![2, 3, 4]),
                },
            ],
        )
        .unwrap();
        let spec = ModelSpec { hidden: vec![3], ..ModelSpec::new(2, Activation::Quad(1.0)) };
        let model = SageModel::init(&spec, &input, 9);
        let (a, b) = split_model(&model, 2).unwrap();
        assert_eq!(a.w_self[0].as_ref().unwrap().dim(), (2, 3));
        assert!(a.w_self[1].is_none());
        assert_eq!(b.grad_len(1), 3 * 2 * 2);
        assert_eq!(merge_model(&a, &b, &model).unwrap(), model);
        assert!(split_model(&model, 3).is_err());
    }
}

//! Hash, MAC, authenticated envelopes, XOR-combinable acks, the key store and
//! the ideal signature oracle used by resilient tree reconstruction.

use std::collections::BTreeMap;
use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::wire::{Reader, Writer};

pub const DIGEST_LEN: usize = 32;
pub const ACK_LEN: usize = 16;
pub const TAG_LEN: usize = ACK_LEN;
pub const NODE_ID_LEN: usize = 2;
pub const COUNT_LEN: usize = 2;
pub const VALUE_LEN: usize = 8;
pub const NONCE_LEN: usize = 8;
pub const SIG_LEN: usize = DIGEST_LEN;

/// The reserved "OK" message identifier appended to the nonce before MACing an ack.
pub const OK: [u8; 2] = [0x4F, 0x4B];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl NodeId {
    pub const BS: NodeId = NodeId(0);

    pub fn is_bs(self) -> bool {
        self == Self::BS
    }

    pub fn to_bytes(self) -> [u8; NODE_ID_LEN] {
        self.0.to_be_bytes()
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_bs() {
            write!(f, "BS")
        } else {
            write!(f, "s{}", self.0)
        }
    }
}

/// Session nonce `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Nonce(pub u64);

impl Nonce {
    pub fn to_bytes(self) -> [u8; NONCE_LEN] {
        self.0.to_be_bytes()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", hex(&self.0[..6]))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ack(pub [u8; ACK_LEN]);

impl Ack {
    pub const ZERO: Ack = Ack([0; ACK_LEN]);

    pub fn from_slice(bytes: &[u8]) -> Result<Ack> {
        bytes
            .try_into()
            .map(Ack)
            .map_err(|_| Error::Protocol(format!("ack length {} != {ACK_LEN}", bytes.len())))
    }

    pub fn xor(self, other: Ack) -> Ack {
        let mut out = self.0;
        out.iter_mut().zip(other.0).for_each(|(a, b)| *a ^= b);
        Ack(out)
    }
}

impl fmt::Debug for Ack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ack({})", hex(&self.0[..6]))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SymKey(pub [u8; DIGEST_LEN]);

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymKey(..)")
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

fn hmac_full(key: &[u8], message: &[u8]) -> [u8; DIGEST_LEN] {
    let mut m = <Hmac<Sha256> as KeyInit>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(message);
    m.finalize().into_bytes().into()
}

/// HMAC-SHA256 truncated to 16 bytes.
pub fn mac(key: &SymKey, message: &[u8]) -> Ack {
    let full = hmac_full(&key.0, message);
    Ack(full[..ACK_LEN].try_into().unwrap())
}

pub fn ack_message(nonce: Nonce) -> Vec<u8> {
    let mut m = nonce.to_bytes().to_vec();
    m.extend_from_slice(&OK);
    m
}

/// `MAC_{K_s}(N || OK)`.
pub fn node_ack(key: &SymKey, nonce: Nonce) -> Ack {
    mac(key, &ack_message(nonce))
}

pub fn xor_acks<'a>(acks: impl IntoIterator<Item = &'a [u8]>) -> Result<Ack> {
    acks.into_iter()
        .try_fold(Ack::ZERO, |acc, a| Ok(acc.xor(Ack::from_slice(a)?)))
}

/// `Auth_K(m)`: the payload together with its MAC under `K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthEnvelope {
    pub payload: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl AuthEnvelope {
    pub fn wrap(key: &SymKey, payload: Vec<u8>) -> Self {
        let tag = mac(key, &payload).0;
        Self { payload, tag }
    }

    pub fn verify(&self, key: &SymKey) -> bool {
        mac(key, &self.payload).0 == self.tag
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(&self.payload).field(&self.tag);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let payload = r.field()?.to_vec();
        let tag = r.array::<TAG_LEN>()?;
        r.finish()?;
        Ok(Self { payload, tag })
    }

    pub fn encoded_len(payload_len: usize) -> usize {
        2 * crate::wire::LEN_PREFIX + payload_len + TAG_LEN
    }
}

pub fn auth_wrap(key: &SymKey, payload: Vec<u8>) -> AuthEnvelope {
    AuthEnvelope::wrap(key, payload)
}

pub fn auth_verify(key: &SymKey, envelope: &AuthEnvelope) -> bool {
    envelope.verify(key)
}

fn ordered(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Node keys `K_s` (shared with the BS) and link keys `K_{s,t}`, all derived from the scenario seed.
#[derive(Debug, Clone)]
pub struct KeyStore {
    master: SymKey,
    bs_keys: BTreeMap<NodeId, SymKey>,
    link_keys: BTreeMap<(NodeId, NodeId), SymKey>,
    broadcast_key: SymKey,
}

impl KeyStore {
    pub fn derive(
        seed: u64,
        nodes: impl IntoIterator<Item = NodeId>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    ) -> Self {
        let mut seed_material = b"sensoragg/master".to_vec();
        seed_material.extend_from_slice(&seed.to_be_bytes());
        let master = SymKey(hash(&seed_material).0);
        let derive = |role: &[u8], ids: &[NodeId]| {
            let mut m = role.to_vec();
            for id in ids {
                m.extend_from_slice(&id.to_bytes());
            }
            SymKey(hmac_full(&master.0, &m))
        };
        let bs_keys = nodes
            .into_iter()
            .filter(|s| !s.is_bs())
            .map(|s| (s, derive(b"node", &[s])))
            .collect();
        let link_keys = edges
            .into_iter()
            .map(|(a, b)| {
                let (a, b) = ordered(a, b);
                ((a, b), derive(b"link", &[a, b]))
            })
            .collect();
        let broadcast_key = derive(b"bcast", &[]);
        Self {
            master,
            bs_keys,
            link_keys,
            broadcast_key,
        }
    }

    pub fn node_key(&self, s: NodeId) -> Result<&SymKey> {
        self.bs_keys
            .get(&s)
            .ok_or_else(|| Error::Config(format!("no node key for {s}")))
    }

    pub fn link_key(&self, a: NodeId, b: NodeId) -> Result<&SymKey> {
        self.link_keys
            .get(&ordered(a, b))
            .ok_or_else(|| Error::Config(format!("no link key for ({a}, {b})")))
    }

    pub fn broadcast_key(&self) -> &SymKey {
        &self.broadcast_key
    }

    /// Expected ack of node `s` for session `nonce`.
    pub fn ack_of(&self, s: NodeId, nonce: Nonce) -> Result<Ack> {
        Ok(node_ack(self.node_key(s)?, nonce))
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.bs_keys.keys().copied()
    }

    pub(crate) fn signing_key(&self, s: NodeId) -> SymKey {
        let mut m = b"sign".to_vec();
        m.extend_from_slice(&s.to_bytes());
        SymKey(hmac_full(&self.master.0, &m))
    }
}

/// A payload with an ideal signature attributed to `signer`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedBlob {
    pub signer: NodeId,
    pub payload: Vec<u8>,
    pub sig: [u8; SIG_LEN],
}

impl SignedBlob {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u16(self.signer.0).field(&self.payload).field(&self.sig);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let signer = NodeId(r.u16()?);
        let payload = r.field()?.to_vec();
        let sig = r.array::<SIG_LEN>()?;
        r.finish()?;
        Ok(Self { signer, payload, sig })
    }
}

/// Ideal signatures: only the oracle holds signing keys, so a blob verifies for `s`
/// iff the oracle produced it on behalf of `s`.
#[derive(Debug, Clone)]
pub struct SignatureOracle {
    keys: BTreeMap<NodeId, SymKey>,
}

impl SignatureOracle {
    pub fn new(store: &KeyStore) -> Self {
        let keys = store
            .nodes()
            .chain(std::iter::once(NodeId::BS))
            .map(|s| (s, store.signing_key(s)))
            .collect();
        Self { keys }
    }

    fn raw_sig(key: &SymKey, signer: NodeId, payload: &[u8]) -> [u8; SIG_LEN] {
        let mut m = signer.to_bytes().to_vec();
        m.extend_from_slice(payload);
        hmac_full(&key.0, &m)
    }

    pub fn sign(&self, node: NodeId, payload: Vec<u8>) -> Result<SignedBlob> {
        let key = self
            .keys
            .get(&node)
            .ok_or_else(|| Error::Config(format!("{node} has no signing key")))?;
        let sig = Self::raw_sig(key, node, &payload);
        Ok(SignedBlob {
            signer: node,
            payload,
            sig,
        })
    }

    pub fn verify(&self, node: NodeId, blob: &SignedBlob) -> bool {
        blob.signer == node
            && self
                .keys
                .get(&node)
                .is_some_and(|k| Self::raw_sig(k, node, &blob.payload) == blob.sig)
    }
}

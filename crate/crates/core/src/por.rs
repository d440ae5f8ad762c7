//! Probabilistic onion route messages and the stateless relay logic.
//!
//! Wire format of a [`PorMessage`], all integers big-endian:
//!
//! ```text
//! [u16 addr_count] addr_count × ([u16 len][addr bytes])
//! [u16 env_count][u16 entry_len] env_count × entry_len bytes
//! [u32 cipher_len][cipher bytes]
//! ```
//!
//! Every decrypted plaintext is `[u8 tag][body]`, where the tag says whether
//! the body is another onion level or the application payload.

use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt;
use std::time::Duration;

use crate::crypto::{self, Ciphertext, Envelope, EnvelopeEntry, SecretKey, ENVELOPE_ENTRY_LEN};
use crate::wire::{put_short_bytes, u16_len, u32_len, Reader, WireError};

/// Per-attempt send timeout used when nothing else is configured.
pub const DEFAULT_SEND_TIMEOUT: Duration = Duration::from_millis(800);

pub const TAG_INNER_MESSAGE: u8 = 0x01;
pub const TAG_APP_PAYLOAD: u8 = 0x02;

/// Opaque routable identifier of a device.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Address(String);

impl Address {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub(crate) fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), WireError> {
        put_short_bytes(out, "addr", self.0.as_bytes())
    }

    pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let raw = r.short_bytes()?;
        let s = std::str::from_utf8(raw).map_err(|e| WireError::invalid("addr", e.to_string()))?;
        Ok(Self(s.to_owned()))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{}", self.0)
    }
}

impl From<&str> for Address {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// `(addresses of the current layer, envelope, cipher)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PorMessage {
    pub addrs: Vec<Address>,
    pub envelope: Envelope,
    pub cipher: Ciphertext,
}

impl PorMessage {
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&u16_len("addr_count", self.addrs.len())?.to_be_bytes());
        for a in &self.addrs {
            a.encode_into(&mut out)?;
        }
        out.extend_from_slice(&u16_len("env_count", self.envelope.len())?.to_be_bytes());
        out.extend_from_slice(&(ENVELOPE_ENTRY_LEN as u16).to_be_bytes());
        for e in self.envelope.entries() {
            out.extend_from_slice(e);
        }
        out.extend_from_slice(&u32_len("cipher_len", self.cipher.len())?.to_be_bytes());
        out.extend_from_slice(self.cipher.as_bytes());
        Ok(out)
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.addrs.iter().map(|a| 2 + a.0.len()).sum::<usize>()
            + 4
            + self.envelope.len() * ENVELOPE_ENTRY_LEN
            + 4
            + self.cipher.len()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let msg = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(msg)
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let n_addrs = r.u16()? as usize;
        if n_addrs == 0 {
            return Err(WireError::invalid("addr_count", "a message needs at least one address"));
        }
        let addrs = (0..n_addrs)
            .map(|_| Address::decode_from(r))
            .collect::<Result<Vec<_>, _>>()?;
        let n_entries = r.u16()? as usize;
        let entry_len = r.u16()? as usize;
        if entry_len != ENVELOPE_ENTRY_LEN {
            return Err(WireError::invalid(
                "entry_len",
                format!("expected {ENVELOPE_ENTRY_LEN}, got {entry_len}"),
            ));
        }
        if n_entries != n_addrs {
            return Err(WireError::invalid(
                "env_count",
                format!("{n_entries} entries for {n_addrs} addresses"),
            ));
        }
        let entries = (0..n_entries)
            .map(|_| r.array::<ENVELOPE_ENTRY_LEN>())
            .collect::<Result<Vec<EnvelopeEntry>, _>>()?;
        let cipher_len = r.u32()? as usize;
        let cipher = Ciphertext::from_bytes(r.take(cipher_len)?.to_vec());
        Ok(Self {
            addrs,
            envelope: Envelope::from_entries(entries),
            cipher,
        })
    }
}

/// What a decrypted onion level unwraps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Plaintext {
    Inner(PorMessage),
    App(Vec<u8>),
}

impl Plaintext {
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        match self {
            Plaintext::Inner(m) => {
                let mut out = vec![TAG_INNER_MESSAGE];
                out.extend_from_slice(&m.encode()?);
                Ok(out)
            }
            Plaintext::App(p) => Ok(Self::encode_app(p)),
        }
    }

    pub(crate) fn encode_app(payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + payload.len());
        out.push(TAG_APP_PAYLOAD);
        out.extend_from_slice(payload);
        out
    }

    pub(crate) fn encode_inner(m: &PorMessage) -> Vec<u8> {
        // Layer sizes are already bounded by pick_layer; a 64k-member layer
        // would fail earlier at envelope construction.
        let mut out = vec![TAG_INNER_MESSAGE];
        out.extend_from_slice(&m.encode().expect("layer fits the wire format"));
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let (&tag, body) = buf
            .split_first()
            .ok_or(WireError::Truncated { offset: 0, needed: 1 })?;
        match tag {
            TAG_INNER_MESSAGE => Ok(Plaintext::Inner(PorMessage::decode(body)?)),
            TAG_APP_PAYLOAD => Ok(Plaintext::App(body.to_vec())),
            t => Err(WireError::invalid("tag", format!("unknown plaintext tag {t:#04x}"))),
        }
    }
}

/// Result of decrypting one level, before any network action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Peeled {
    /// This device is the recipient.
    Payload(Vec<u8>),
    /// Another level for the next layer.
    Relay(PorMessage),
    /// Not a member of this layer, or the plaintext is corrupt.
    Failed,
}

pub fn peel(m: &PorMessage, sk: &SecretKey) -> Peeled {
    match crypto::message_decrypt(m, sk).map(|p| Plaintext::decode(&p)) {
        Some(Ok(Plaintext::App(p))) => Peeled::Payload(p),
        Some(Ok(Plaintext::Inner(inner))) => Peeled::Relay(inner),
        Some(Err(_)) | None => Peeled::Failed,
    }
}

/// A blocking, timeout-bounded send to one address.
pub trait Transport {
    /// `true` if `to` accepted the message within `timeout`.
    fn send(&mut self, to: &Address, msg: &PorMessage, timeout: Duration) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForwardOutcome {
    Forwarded(Address),
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReceiveOutcome {
    Delivered(Vec<u8>),
    Forwarded(Address),
    DecryptFailed,
    Dropped,
}

/// Random-order attempt plan over a message's next layer.
///
/// The simulator drives this one attempt at a time in virtual time; the
/// blocking [`forward`] simply loops over it.
#[derive(Debug, Clone)]
pub struct Forwarder {
    order: Vec<Address>,
    next: usize,
}

impl Forwarder {
    pub fn new<R: Rng + ?Sized>(m: &PorMessage, rng: &mut R) -> Self {
        let mut order = m.addrs.clone();
        order.shuffle(rng);
        Self { order, next: 0 }
    }

    pub fn next_target(&mut self) -> Option<&Address> {
        let a = self.order.get(self.next)?;
        self.next += 1;
        Some(a)
    }

    pub fn attempts(&self) -> usize {
        self.next
    }

    pub fn order(&self) -> &[Address] {
        &self.order
    }
}

/// Try each next-layer address in random order; drop if all fail.
pub fn forward<T, R>(m: &PorMessage, transport: &mut T, timeout: Duration, rng: &mut R) -> ForwardOutcome
where
    T: Transport + ?Sized,
    R: Rng + ?Sized,
{
    let mut plan = Forwarder::new(m, rng);
    while let Some(addr) = plan.next_target() {
        if transport.send(addr, m, timeout) {
            return ForwardOutcome::Forwarded(addr.clone());
        }
    }
    ForwardOutcome::Dropped
}

pub fn receive<T, R>(
    m: &PorMessage,
    sk: &SecretKey,
    transport: &mut T,
    timeout: Duration,
    rng: &mut R,
) -> ReceiveOutcome
where
    T: Transport + ?Sized,
    R: Rng + ?Sized,
{
    match peel(m, sk) {
        Peeled::Failed => ReceiveOutcome::DecryptFailed,
        Peeled::Payload(p) => ReceiveOutcome::Delivered(p),
        Peeled::Relay(inner) => match forward(&inner, transport, timeout, rng) {
            ForwardOutcome::Forwarded(to) => ReceiveOutcome::Forwarded(to),
            ForwardOutcome::Dropped => ReceiveOutcome::Dropped,
        },
    }
}

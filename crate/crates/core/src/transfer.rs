//! Chunked file exchange over a pair of routes.
//!
//! The sender keeps at most `W` chunks in flight and retransmits each one
//! whose acknowledgement has not come back within the retry timeout. The
//! receiver checks every chunk against the descriptor's per-chunk SHA-1 and
//! acknowledges it, duplicates included.
//!
//! Chunk and ACK plaintexts share the file ID prefix so that any device of
//! the endpoint's e-squad can route them:
//!
//! ```text
//! chunk: [16-byte id][u32 index][u32 len][bytes]
//! ack:   [16-byte id][u32 index]
//! ```

use rand::Rng;
use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::esquad::{DeviceId, FileId, InteractionLog, FILE_ID_LEN};
use crate::wire::{u32_len, Reader, WireError};

pub const DIGEST_LEN: usize = 20;
pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_RETRY_SECS: f64 = 4.0;

pub type Sha1Digest = [u8; DIGEST_LEN];

fn sha1(bytes: &[u8]) -> Sha1Digest {
    Sha1::digest(bytes).into()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransferError {
    #[error("chunk size must be positive")]
    ZeroChunkSize,
    #[error("file of {0} bytes has too many chunks")]
    TooManyChunks(u64),
    #[error("window must be positive")]
    ZeroWindow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileDescriptor {
    pub id: FileId,
    pub size: u64,
    pub chunk_size: u32,
    pub n_chunks: u32,
    pub chunks_hash: Vec<Sha1Digest>,
    pub hash: Sha1Digest,
}

pub fn build_file_descriptor<R: Rng + ?Sized>(
    data: &[u8],
    chunk_size: u32,
    rng: &mut R,
) -> Result<FileDescriptor, TransferError> {
    if chunk_size == 0 {
        return Err(TransferError::ZeroChunkSize);
    }
    let size = data.len() as u64;
    let n_chunks = u32::try_from(size.div_ceil(chunk_size as u64))
        .map_err(|_| TransferError::TooManyChunks(size))?;
    let chunks_hash: Vec<Sha1Digest> = data.chunks(chunk_size as usize).map(sha1).collect();
    let mut id = [0u8; FILE_ID_LEN];
    rng.fill(&mut id);
    Ok(FileDescriptor {
        id: FileId(id),
        size,
        chunk_size,
        n_chunks,
        hash: hash_of(&chunks_hash),
        chunks_hash,
    })
}

fn hash_of(chunks_hash: &[Sha1Digest]) -> Sha1Digest {
    let mut h = Sha1::new();
    for c in chunks_hash {
        h.update(c);
    }
    h.finalize().into()
}

impl FileDescriptor {
    /// Checks the descriptor's internal consistency.
    pub fn verify(&self) -> bool {
        self.chunk_size > 0
            && self.n_chunks as u64 == self.size.div_ceil(self.chunk_size as u64)
            && self.chunks_hash.len() == self.n_chunks as usize
            && hash_of(&self.chunks_hash) == self.hash
    }

    pub fn chunk_len(&self, index: u32) -> usize {
        let start = index as u64 * self.chunk_size as u64;
        (self.size.saturating_sub(start)).min(self.chunk_size as u64) as usize
    }

    pub fn chunk_matches(&self, index: u32, bytes: &[u8]) -> bool {
        self.chunks_hash
            .get(index as usize)
            .is_some_and(|h| bytes.len() == self.chunk_len(index) && sha1(bytes) == *h)
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = Vec::with_capacity(16 + 8 + 4 + 4 + self.chunks_hash.len() * DIGEST_LEN + DIGEST_LEN);
        out.extend_from_slice(&self.id.0);
        out.extend_from_slice(&self.size.to_be_bytes());
        out.extend_from_slice(&self.chunk_size.to_be_bytes());
        out.extend_from_slice(&u32_len("n_chunks", self.chunks_hash.len())?.to_be_bytes());
        for h in &self.chunks_hash {
            out.extend_from_slice(h);
        }
        out.extend_from_slice(&self.hash);
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let fd = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(fd)
    }

    pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let id = FileId(r.array()?);
        let size = r.u64()?;
        let chunk_size = r.u32()?;
        let n_chunks = r.u32()?;
        if chunk_size == 0 {
            return Err(WireError::invalid("chunk_size", "zero"));
        }
        if n_chunks as u64 != size.div_ceil(chunk_size as u64) {
            return Err(WireError::invalid("n_chunks", "inconsistent with size"));
        }
        if (n_chunks as usize).saturating_mul(DIGEST_LEN) > r.remaining() {
            return Err(WireError::Truncated {
                offset: 0,
                needed: n_chunks as usize * DIGEST_LEN - r.remaining(),
            });
        }
        let chunks_hash = (0..n_chunks)
            .map(|_| r.array())
            .collect::<Result<Vec<_>, _>>()?;
        let hash = r.array()?;
        if hash_of(&chunks_hash) != hash {
            return Err(WireError::invalid("hash", "does not match chunksHash"));
        }
        Ok(Self {
            id,
            size,
            chunk_size,
            n_chunks,
            chunks_hash,
            hash,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkMessage {
    pub id: FileId,
    pub index: u32,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub id: FileId,
    pub index: u32,
}

const ACK_LEN: usize = FILE_ID_LEN + 4;

/// An application payload carried by a route.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferMessage {
    Chunk(ChunkMessage),
    Ack(Ack),
}

impl TransferMessage {
    pub fn id(&self) -> FileId {
        match self {
            TransferMessage::Chunk(c) => c.id,
            TransferMessage::Ack(a) => a.id,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            TransferMessage::Chunk(c) => {
                let mut out = Vec::with_capacity(ACK_LEN + 4 + c.bytes.len());
                out.extend_from_slice(&c.id.0);
                out.extend_from_slice(&c.index.to_be_bytes());
                out.extend_from_slice(&(c.bytes.len() as u32).to_be_bytes());
                out.extend_from_slice(&c.bytes);
                out
            }
            TransferMessage::Ack(a) => {
                let mut out = Vec::with_capacity(ACK_LEN);
                out.extend_from_slice(&a.id.0);
                out.extend_from_slice(&a.index.to_be_bytes());
                out
            }
        }
    }

    /// An ACK is exactly 20 bytes; anything longer must be a well-formed chunk.
    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let id = FileId(r.array()?);
        let index = r.u32()?;
        if r.remaining() == 0 {
            return Ok(TransferMessage::Ack(Ack { id, index }));
        }
        let len = r.u32()? as usize;
        let bytes = r.take(len)?.to_vec();
        r.finish()?;
        Ok(TransferMessage::Chunk(ChunkMessage { id, index, bytes }))
    }
}

/// Peeks the file ID without a full decode.
pub fn payload_file_id(payload: &[u8]) -> Option<FileId> {
    payload.get(..FILE_ID_LEN).map(|b| FileId(b.try_into().expect("16 bytes")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChunkStatus {
    Unsent,
    InFlight { sent_at: f64 },
    Acked,
}

#[derive(Debug, Clone)]
pub struct SenderState {
    fd: FileDescriptor,
    data: Vec<u8>,
    window: usize,
    retry: f64,
    status: Vec<ChunkStatus>,
    in_flight: usize,
    acked: usize,
    next_unsent: usize,
    transmissions: u64,
}

impl SenderState {
    pub fn new(fd: FileDescriptor, data: Vec<u8>, window: usize, retry: f64) -> Result<Self, TransferError> {
        if window == 0 {
            return Err(TransferError::ZeroWindow);
        }
        debug_assert_eq!(data.len() as u64, fd.size);
        let n = fd.n_chunks as usize;
        Ok(Self {
            fd,
            data,
            window,
            retry,
            status: vec![ChunkStatus::Unsent; n],
            in_flight: 0,
            acked: 0,
            next_unsent: 0,
            transmissions: 0,
        })
    }

    pub fn fd(&self) -> &FileDescriptor {
        &self.fd
    }

    /// Lowest chunk index not yet acknowledged.
    pub fn base(&self) -> usize {
        self.status
            .iter()
            .position(|s| *s != ChunkStatus::Acked)
            .unwrap_or(self.status.len())
    }

    pub fn status(&self, index: usize) -> ChunkStatus {
        self.status[index]
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn acked(&self) -> usize {
        self.acked
    }

    pub fn transmissions(&self) -> u64 {
        self.transmissions
    }

    pub fn is_complete(&self) -> bool {
        self.acked == self.status.len()
    }

    /// Earliest retry deadline among in-flight chunks.
    pub fn next_deadline(&self) -> Option<f64> {
        self.status
            .iter()
            .filter_map(|s| match s {
                ChunkStatus::InFlight { sent_at } => Some(sent_at + self.retry),
                _ => None,
            })
            .min_by(f64::total_cmp)
    }

    /// Chunks to send now: expired retransmissions first, then new chunks
    /// while fewer than `W` are in flight.
    pub fn sender_step(&mut self, now: f64) -> Vec<ChunkMessage> {
        let mut out = Vec::new();
        for i in 0..self.status.len() {
            if let ChunkStatus::InFlight { sent_at } = self.status[i] {
                if sent_at + self.retry <= now {
                    self.status[i] = ChunkStatus::InFlight { sent_at: now };
                    out.push(self.chunk(i));
                }
            }
        }
        while self.in_flight < self.window && self.next_unsent < self.status.len() {
            let i = self.next_unsent;
            self.next_unsent += 1;
            if self.status[i] != ChunkStatus::Unsent {
                continue;
            }
            self.status[i] = ChunkStatus::InFlight { sent_at: now };
            self.in_flight += 1;
            out.push(self.chunk(i));
        }
        self.transmissions += out.len() as u64;
        out
    }

    /// Returns `true` if the ACK was new.
    pub fn on_ack(&mut self, ack: &Ack) -> bool {
        if ack.id != self.fd.id {
            return false;
        }
        match self.status.get(ack.index as usize) {
            Some(ChunkStatus::InFlight { .. }) => {
                self.status[ack.index as usize] = ChunkStatus::Acked;
                self.in_flight -= 1;
                self.acked += 1;
                true
            }
            _ => false,
        }
    }

    fn chunk(&self, i: usize) -> ChunkMessage {
        let start = i * self.fd.chunk_size as usize;
        let end = start + self.fd.chunk_len(i as u32);
        ChunkMessage {
            id: self.fd.id,
            index: i as u32,
            bytes: self.data[start..end].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReceiverState {
    fd: FileDescriptor,
    chunks: Vec<Option<Vec<u8>>>,
    received: usize,
}

impl ReceiverState {
    pub fn new(fd: FileDescriptor) -> Self {
        let n = fd.n_chunks as usize;
        Self {
            fd,
            chunks: vec![None; n],
            received: 0,
        }
    }

    pub fn fd(&self) -> &FileDescriptor {
        &self.fd
    }

    pub fn received(&self) -> usize {
        self.received
    }

    pub fn is_complete(&self) -> bool {
        self.received == self.chunks.len()
    }

    /// Stores a chunk whose digest matches and acknowledges it; anything
    /// else is discarded without an ACK.
    pub fn receiver_step(&mut self, msg: &ChunkMessage) -> Option<Ack> {
        if msg.id != self.fd.id || !self.fd.chunk_matches(msg.index, &msg.bytes) {
            return None;
        }
        let slot = &mut self.chunks[msg.index as usize];
        if slot.is_none() {
            *slot = Some(msg.bytes.clone());
            self.received += 1;
        }
        Some(Ack {
            id: self.fd.id,
            index: msg.index,
        })
    }

    /// The reassembled file, once every chunk is in.
    pub fn assemble(&self) -> Option<Vec<u8>> {
        if !self.is_complete() {
            return None;
        }
        let mut out = Vec::with_capacity(self.fd.size as usize);
        for c in &self.chunks {
            out.extend_from_slice(c.as_deref()?);
        }
        Some(out)
    }
}

/// What an e-squad device does with a payload meant for a sibling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelayAction {
    /// Hand it to the endpoint, which is online.
    Deliver(DeviceId),
    /// Keep it (or pass it to another online sibling) until the endpoint
    /// reconnects.
    Park,
    /// No transfer with this ID is known to the e-squad.
    Drop,
}

pub fn esquad_relay(payload: &[u8], log: &InteractionLog, is_online: impl Fn(DeviceId) -> bool) -> RelayAction {
    let Some(endpoint) = payload_file_id(payload).and_then(|f| log.endpoint(&f)) else {
        return RelayAction::Drop;
    };
    if is_online(endpoint) {
        RelayAction::Deliver(endpoint)
    } else {
        RelayAction::Park
    }
}

//! The private overlay of one user's devices.
//!
//! Devices share an append-only log of timestamped interactions. From the
//! `USE` heartbeats every device derives the same availability matrix and,
//! from it, a Markov estimate of each sibling being online next round.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use thiserror::Error;

use crate::wire::{Reader, WireError};

pub const FILE_ID_LEN: usize = 16;
/// Rows are stored as bitmasks.
pub const MAX_DEVICES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId(pub u32);

/// Index of a device within its user's roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceId(pub u16);

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FileId(pub [u8; FILE_ID_LEN]);

impl std::fmt::Debug for FileId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        f.write_str("…")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InteractionKind {
    Use,
    Download(FileId),
    Upload(FileId),
}

impl InteractionKind {
    fn tag(&self) -> u8 {
        match self {
            InteractionKind::Use => 0,
            InteractionKind::Download(_) => 1,
            InteractionKind::Upload(_) => 2,
        }
    }

    pub fn file(&self) -> Option<FileId> {
        match *self {
            InteractionKind::Use => None,
            InteractionKind::Download(f) | InteractionKind::Upload(f) => Some(f),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Interaction {
    pub ts: f64,
    pub d: DeviceId,
    pub kind: InteractionKind,
}

impl Interaction {
    pub fn new(ts: f64, d: DeviceId, kind: InteractionKind) -> Self {
        Self { ts, d, kind }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        let len: u8 = if self.kind.file().is_some() { 27 } else { 11 };
        out.push(len);
        out.extend_from_slice(&self.ts.to_be_bytes());
        out.extend_from_slice(&self.d.0.to_be_bytes());
        out.push(self.kind.tag());
        if let Some(f) = self.kind.file() {
            out.extend_from_slice(&f.0);
        }
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let len = r.u8()? as usize;
        let body = r.take(len)?;
        let mut r = Reader::new(body);
        let ts = r.f64()?;
        if !ts.is_finite() {
            return Err(WireError::invalid("ts", "not finite"));
        }
        let d = DeviceId(r.u16()?);
        let kind = match r.u8()? {
            0 => InteractionKind::Use,
            1 => InteractionKind::Download(FileId(r.array()?)),
            2 => InteractionKind::Upload(FileId(r.array()?)),
            t => return Err(WireError::invalid("typ", format!("unknown interaction type {t}"))),
        };
        r.finish()?;
        Ok(Self { ts, d, kind })
    }
}

impl PartialEq for Interaction {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Interaction {}

impl PartialOrd for Interaction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Interaction {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ts
            .total_cmp(&other.ts)
            .then(self.d.cmp(&other.d))
            .then(self.kind.cmp(&other.kind))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EsquadError {
    #[error("log of user {theirs:?} cannot merge into log of user {ours:?}")]
    UserMismatch { ours: UserId, theirs: UserId },
    #[error("device {0:?} is not in the roster")]
    UnknownDevice(DeviceId),
    #[error("roster of {0} devices exceeds {MAX_DEVICES}")]
    RosterTooLarge(usize),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Highest timestamp known per roster device.
pub type Digest = Vec<Option<f64>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    user: UserId,
    roster: u16,
    entries: BTreeSet<Interaction>,
    endpoints: BTreeMap<FileId, DeviceId>,
}

impl InteractionLog {
    /// Panics if `roster` exceeds [`MAX_DEVICES`].
    pub fn new(user: UserId, roster: u16) -> Self {
        assert!(roster as usize <= MAX_DEVICES, "roster too large");
        Self {
            user,
            roster,
            entries: BTreeSet::new(),
            endpoints: BTreeMap::new(),
        }
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn roster(&self) -> u16 {
        self.roster
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &Interaction> + '_ {
        self.entries.iter()
    }

    /// Returns `true` if the record was new.
    pub fn insert(&mut self, r: Interaction) -> bool {
        debug_assert!(r.d.0 < self.roster, "device outside roster");
        if let Some(f) = r.kind.file() {
            self.endpoints.entry(f).or_insert(r.d);
        }
        self.entries.insert(r)
    }

    /// The device that uploaded or downloaded `f`, per the shared log.
    pub fn endpoint(&self, f: &FileId) -> Option<DeviceId> {
        self.endpoints.get(f).copied()
    }

    /// Set union with `other`; returns the number of records added.
    pub fn merge(&mut self, other: &InteractionLog) -> Result<usize, EsquadError> {
        self.check_user(other.user)?;
        Ok(self.absorb(other.entries.iter().copied()))
    }

    pub fn digest(&self) -> Digest {
        let mut hwm = vec![None; self.roster as usize];
        for r in &self.entries {
            hwm[r.d.0 as usize] = Some(r.ts);
        }
        hwm
    }

    /// Records the holder of `digest` may be missing. Records at the
    /// high-water mark itself are included, since several can share a
    /// timestamp.
    pub fn delta(&self, digest: &[Option<f64>]) -> Vec<Interaction> {
        self.entries
            .iter()
            .filter(|r| match digest.get(r.d.0 as usize).copied().flatten() {
                Some(hwm) => r.ts >= hwm,
                None => true,
            })
            .copied()
            .collect()
    }

    pub fn apply_delta(&mut self, from: UserId, delta: &[Interaction]) -> Result<usize, EsquadError> {
        self.check_user(from)?;
        if let Some(r) = delta.iter().find(|r| r.d.0 >= self.roster) {
            return Err(EsquadError::UnknownDevice(r.d));
        }
        Ok(self.absorb(delta.iter().copied()))
    }

    fn absorb(&mut self, it: impl Iterator<Item = Interaction>) -> usize {
        it.filter(|r| self.insert(*r)).count()
    }

    fn check_user(&self, theirs: UserId) -> Result<(), EsquadError> {
        if theirs != self.user {
            return Err(EsquadError::UserMismatch {
                ours: self.user,
                theirs,
            });
        }
        Ok(())
    }

    /// `[u32 user][u16 roster][u32 count]`, then per record
    /// `[u8 len][f64 ts][u16 d][u8 typ][16-byte f, DL/UL only]`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + self.entries.len() * 12);
        out.extend_from_slice(&self.user.0.to_be_bytes());
        out.extend_from_slice(&self.roster.to_be_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for r in &self.entries {
            r.encode_into(&mut out);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, EsquadError> {
        let mut r = Reader::new(buf);
        let user = UserId(r.u32()?);
        let roster = r.u16()?;
        if roster as usize > MAX_DEVICES {
            return Err(EsquadError::RosterTooLarge(roster as usize));
        }
        let n = r.u32()?;
        let mut log = Self::new(user, roster);
        for _ in 0..n {
            let rec = Interaction::decode_from(&mut r)?;
            if rec.d.0 >= roster {
                return Err(EsquadError::UnknownDevice(rec.d));
            }
            log.insert(rec);
        }
        r.finish()?;
        Ok(log)
    }
}

/// Appends a `USE` heartbeat for `d` at `now`.
pub fn record_use(log: &mut InteractionLog, d: DeviceId, now: f64) -> Interaction {
    let r = Interaction::new(now, d, InteractionKind::Use);
    log.insert(r);
    r
}

/// `X_i(d)` over rounds `[t0 + iT, t0 + (i+1)T)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AvailabilityMatrix {
    rows: Vec<u64>,
    devices: usize,
}

impl AvailabilityMatrix {
    pub fn new(devices: usize) -> Self {
        assert!(devices <= MAX_DEVICES, "too many devices");
        Self {
            rows: Vec::new(),
            devices,
        }
    }

    pub fn from_rows(devices: usize, rows: Vec<u64>) -> Self {
        let mut m = Self::new(devices);
        let mask = row_mask(devices);
        m.rows = rows.into_iter().map(|r| r & mask).collect();
        m
    }

    pub fn from_bools(rows: &[Vec<bool>]) -> Self {
        let devices = rows.first().map_or(0, Vec::len);
        let packed = rows
            .iter()
            .map(|row| {
                assert_eq!(row.len(), devices, "ragged matrix");
                row.iter()
                    .enumerate()
                    .fold(0u64, |acc, (d, &on)| acc | (u64::from(on) << d))
            })
            .collect();
        Self::from_rows(devices, packed)
    }

    pub fn push_row(&mut self, row: u64) {
        self.rows.push(row & row_mask(self.devices));
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn rounds(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> u64 {
        self.rows[i]
    }

    pub fn rows(&self) -> &[u64] {
        &self.rows
    }

    pub fn get(&self, i: usize, d: usize) -> bool {
        self.rows[i] >> d & 1 == 1
    }
}

fn row_mask(devices: usize) -> u64 {
    if devices == 64 {
        u64::MAX
    } else {
        (1u64 << devices) - 1
    }
}

/// Panics unless `period > 0`.
pub fn build_availability(log: &InteractionLog, period: f64, t0: f64, rounds: usize) -> AvailabilityMatrix {
    assert!(period > 0.0, "round period must be positive");
    let mut rows = vec![0u64; rounds];
    for r in log.entries() {
        if r.kind != InteractionKind::Use || r.ts < t0 {
            continue;
        }
        let i = ((r.ts - t0) / period).floor() as usize;
        // Guard the float division against landing one round early.
        let i = if t0 + (i as f64 + 1.0) * period <= r.ts { i + 1 } else { i };
        if i < rounds {
            rows[i] |= 1 << r.d.0;
        }
    }
    AvailabilityMatrix::from_rows(log.roster() as usize, rows)
}

/// `P(X_{i+1}(d) = 1)` from rounds `0..=i`, add-one smoothed.
///
/// Counts past rounds in the same state as round `i`; if there are none,
/// falls back to how often `d` stayed online two rounds in a row.
pub fn predict_online(x: &AvailabilityMatrix, i: usize, d: usize) -> f64 {
    let rows = x.rows();
    let state = rows[i];
    let (mut matches, mut hits) = (0u32, 0u32);
    for j in 0..i {
        if rows[j] == state {
            matches += 1;
            hits += (rows[j + 1] >> d & 1) as u32;
        }
    }
    if matches > 0 {
        return smoothed(hits, matches);
    }
    let (mut on, mut stayed) = (0u32, 0u32);
    for j in 0..i {
        if rows[j] >> d & 1 == 1 {
            on += 1;
            stayed += (rows[j + 1] >> d & 1) as u32;
        }
    }
    smoothed(stayed, on)
}

fn smoothed(hits: u32, n: u32) -> f64 {
    (hits as f64 + 1.0) / (n as f64 + 2.0)
}

/// Incremental form of [`predict_online`] for long timelines.
#[derive(Debug, Clone)]
pub struct MarkovPredictor {
    devices: usize,
    /// Per observed state: how often it was followed by a round, and by
    /// each device online in that round.
    table: HashMap<u64, (u32, Vec<u32>)>,
    self_on: Vec<u32>,
    self_stayed: Vec<u32>,
    last: Option<u64>,
}

impl MarkovPredictor {
    pub fn new(devices: usize) -> Self {
        assert!(devices <= MAX_DEVICES, "too many devices");
        Self {
            devices,
            table: HashMap::new(),
            self_on: vec![0; devices],
            self_stayed: vec![0; devices],
            last: None,
        }
    }

    pub fn observe(&mut self, row: u64) {
        let row = row & row_mask(self.devices);
        if let Some(prev) = self.last {
            let (n, hits) = self
                .table
                .entry(prev)
                .or_insert_with(|| (0, vec![0; self.devices]));
            *n += 1;
            for (d, h) in hits.iter_mut().enumerate() {
                *h += (row >> d & 1) as u32;
            }
            for d in 0..self.devices {
                if prev >> d & 1 == 1 {
                    self.self_on[d] += 1;
                    self.self_stayed[d] += (row >> d & 1) as u32;
                }
            }
        }
        self.last = Some(row);
    }

    /// Prediction for the round after the last observed one.
    pub fn predict(&self, d: usize) -> f64 {
        let Some(state) = self.last else {
            return 0.5;
        };
        match self.table.get(&state) {
            Some((n, hits)) => smoothed(hits[d], *n),
            None => smoothed(self.self_stayed[d], self.self_on[d]),
        }
    }
}

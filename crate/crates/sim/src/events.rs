//! The simulator's event log: one JSON object per line.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{self, BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    /// `outcome` is `user=<n>`.
    DeviceSpawn,
    DeviceOnline,
    DeviceOffline,
    /// `outcome` is `forward` or `backward`.
    RouteCreated,
    /// `outcome` is `origin` or `destination`.
    RouteEndpoint,
    /// One per layer member; `actor` is the member.
    LayerMember,
    MsgSent,
    /// `actor` received the message at `layer_index`.
    Hop,
    /// `actor` could not reach the device named in `outcome`.
    AttemptFailed,
    Drop,
    /// A terminus member passes the payload to the endpoint named in `outcome`.
    EsquadForward,
    EsquadPark,
    /// The endpoint consumed the payload.
    EsquadDeliver,
    /// A parked payload moved to the sibling named in `outcome`.
    EsquadHandoff,
    TransferStarted,
    /// The sender holds an ACK for every chunk.
    TransferComplete,
    /// The receiver reassembled the file; `outcome` is `verified` or `corrupt`.
    DownloadComplete,
    ExchangeSkipped,
    Teardown,
}

impl EventType {
    pub fn as_str(self) -> &'static str {
        match self {
            EventType::DeviceSpawn => "device_spawn",
            EventType::DeviceOnline => "device_online",
            EventType::DeviceOffline => "device_offline",
            EventType::RouteCreated => "route_created",
            EventType::RouteEndpoint => "route_endpoint",
            EventType::LayerMember => "layer_member",
            EventType::MsgSent => "msg_sent",
            EventType::Hop => "hop",
            EventType::AttemptFailed => "attempt_failed",
            EventType::Drop => "drop",
            EventType::EsquadForward => "esquad_forward",
            EventType::EsquadPark => "esquad_park",
            EventType::EsquadDeliver => "esquad_deliver",
            EventType::EsquadHandoff => "esquad_handoff",
            EventType::TransferStarted => "transfer_started",
            EventType::TransferComplete => "transfer_complete",
            EventType::DownloadComplete => "download_complete",
            EventType::ExchangeSkipped => "exchange_skipped",
            EventType::Teardown => "teardown",
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Absent fields serialize as `null` so every line has the same keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Virtual seconds since round 0.
    pub time: f64,
    pub event_type: EventType,
    pub actor: Option<String>,
    pub route_id: Option<u64>,
    pub layer_index: Option<u8>,
    pub message_id: Option<u64>,
    pub outcome: Option<String>,
}

impl Event {
    pub fn new(time: f64, event_type: EventType) -> Self {
        Self {
            time,
            event_type,
            actor: None,
            route_id: None,
            layer_index: None,
            message_id: None,
            outcome: None,
        }
    }

    pub fn actor(mut self, a: impl Into<String>) -> Self {
        self.actor = Some(a.into());
        self
    }

    pub fn route(mut self, id: u64) -> Self {
        self.route_id = Some(id);
        self
    }

    pub fn layer(mut self, i: usize) -> Self {
        self.layer_index = Some(i as u8);
        self
    }

    pub fn message(mut self, id: u64) -> Self {
        self.message_id = Some(id);
        self
    }

    pub fn outcome(mut self, o: impl Into<String>) -> Self {
        self.outcome = Some(o.into());
        self
    }
}

pub fn write_ndjson<W: Write>(events: &[Event], mut w: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn to_ndjson(events: &[Event]) -> String {
    let mut out = Vec::new();
    write_ndjson(events, &mut out).expect("writing to memory");
    String::from_utf8(out).expect("JSON is UTF-8")
}

#[derive(Debug, thiserror::Error)]
pub enum ReadError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Blank lines are skipped.
pub fn read_ndjson<R: BufRead>(r: R) -> Result<Vec<Event>, ReadError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|source| ReadError::Parse { line: i + 1, source })?;
        out.push(e);
    }
    Ok(out)
}

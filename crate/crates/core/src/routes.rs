//! Layer selection and the two-party route handshake.
//!
//! Both endpoints contribute two layers to each of the two routes. The last
//! layer of a route is always the recipient's e-squad, recipient included:
//!
//! ```text
//! sender                         receiver
//!   init_upload      (fd, [BL3, BL4]) ──▶ on_handshake
//!                  ◀── [FL3, FL4]          backward route [BL1, BL2, BL3, BL4]
//!   finalize_upload
//!   forward route [FL1, FL2, FL3, FL4]
//! ```

use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashSet;
use thiserror::Error;

use crate::crypto::PublicKey;
use crate::esquad::{DeviceId, Interaction, InteractionKind, InteractionLog};
use crate::overlay::Descriptor;
use crate::por::Address;
use crate::transfer::FileDescriptor;
use crate::wire::{u16_len, Reader, WireError};

/// Layers per route, the e-squad terminus included.
pub const ROUTE_LEN: usize = 4;
/// Layers each endpoint hands over during the handshake.
pub const PARTIAL_ROUTE_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouteError {
    #[error("no candidates to pick a layer from")]
    NoCandidates,
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("layer has no members")]
    EmptyLayer,
    #[error("device {0} appears twice in one layer")]
    DuplicateMember(Address),
    #[error("partial route has {0} layers, expected {PARTIAL_ROUTE_LEN}")]
    PartialRouteLength(usize),
    #[error("file descriptor does not verify")]
    BadFileDescriptor,
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// One hop's candidate relays.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    members: Vec<Descriptor>,
}

impl Layer {
    pub fn new(members: Vec<Descriptor>) -> Result<Self, RouteError> {
        if members.is_empty() {
            return Err(RouteError::EmptyLayer);
        }
        let mut seen = HashSet::new();
        for m in &members {
            if !seen.insert(&m.addr) {
                return Err(RouteError::DuplicateMember(m.addr.clone()));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Descriptor] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Probability that every member is offline at once, by published values.
    pub fn p_off(&self) -> f64 {
        p_off(&self.members)
    }

    pub fn satisfies(&self, theta: f64) -> bool {
        self.p_off() < theta
    }

    pub fn contains(&self, addr: &Address) -> bool {
        self.members.iter().any(|m| m.addr == *addr)
    }

    pub fn addresses(&self) -> Vec<Address> {
        self.members.iter().map(|m| m.addr.clone()).collect()
    }

    pub fn public_keys(&self) -> Vec<PublicKey> {
        self.members.iter().map(|m| m.pk).collect()
    }

    fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), WireError> {
        out.extend_from_slice(&u16_len("layer_size", self.members.len())?.to_be_bytes());
        for m in &self.members {
            m.encode_into(out)?;
        }
        Ok(())
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, RouteError> {
        let n = r.u16()? as usize;
        let members = (0..n)
            .map(|_| Descriptor::decode_from(r))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(members)
    }
}

fn p_off(members: &[Descriptor]) -> f64 {
    members.iter().map(|m| 1.0 - m.p_online).product()
}

/// Adds random candidates, without replacement, until the layer's all-offline
/// probability drops strictly below `theta` or the pool runs out.
pub fn pick_layer<R: Rng + ?Sized>(
    candidates: &[Descriptor],
    theta: f64,
    rng: &mut R,
) -> Result<Layer, RouteError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(RouteError::InvalidThreshold(theta));
    }
    let mut pool = dedup(candidates);
    if pool.is_empty() {
        return Err(RouteError::NoCandidates);
    }
    pool.shuffle(rng);
    let mut members = Vec::new();
    let mut off = 1.0;
    for c in pool {
        off *= 1.0 - c.p_online;
        members.push(c);
        if off < theta {
            break;
        }
    }
    Layer::new(members)
}

/// Uniform sample of `n` distinct candidates, or all of them if fewer.
pub fn pick_layer_baseline<R: Rng + ?Sized>(
    candidates: &[Descriptor],
    n: usize,
    rng: &mut R,
) -> Result<Layer, RouteError> {
    let mut pool = dedup(candidates);
    if pool.is_empty() || n == 0 {
        return Err(RouteError::NoCandidates);
    }
    pool.shuffle(rng);
    pool.truncate(n);
    Layer::new(pool)
}

fn dedup(candidates: &[Descriptor]) -> Vec<Descriptor> {
    let mut seen = HashSet::new();
    candidates
        .iter()
        .filter(|c| seen.insert(&c.addr))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Sender to receiver, carrying chunks.
    Forward,
    /// Receiver to sender, carrying acknowledgements.
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteSpec {
    pub layers: Vec<Layer>,
    pub direction: Direction,
}

impl RouteSpec {
    pub fn terminus(&self) -> &Layer {
        self.layers.last().expect("routes are never empty")
    }

    /// Layers other than the recipient's e-squad.
    pub fn relay_layers(&self) -> &[Layer] {
        &self.layers[..self.layers.len() - 1]
    }
}

/// Everything an endpoint needs to build its share of a route.
#[derive(Debug, Clone)]
pub struct RouteContext {
    pub me: Descriptor,
    pub device: DeviceId,
    /// Current descriptors of the user's other devices.
    pub siblings: Vec<Descriptor>,
    pub view: Vec<Descriptor>,
    pub theta: f64,
}

impl RouteContext {
    /// View entries outside the user's own e-squad.
    fn foreign_view(&self) -> Vec<Descriptor> {
        let own: HashSet<&Address> = self
            .siblings
            .iter()
            .map(|s| &s.addr)
            .chain(std::iter::once(&self.me.addr))
            .collect();
        self.view
            .iter()
            .filter(|d| !own.contains(&d.addr))
            .cloned()
            .collect()
    }

    /// The terminus: the picked siblings plus this device.
    fn squad_layer<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Layer, RouteError> {
        let others: Vec<Descriptor> = self
            .siblings
            .iter()
            .filter(|s| s.addr != self.me.addr)
            .cloned()
            .collect();
        let mut members = if others.is_empty() {
            Vec::new()
        } else {
            pick_layer(&others, self.theta, rng)?.members
        };
        members.push(self.me.clone());
        Layer::new(members)
    }

    fn partial_route<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Layer>, RouteError> {
        let l4 = self.squad_layer(rng)?;
        let l3 = pick_layer(&self.foreign_view(), self.theta, rng)?;
        Ok(vec![l3, l4])
    }

    fn complete<R: Rng + ?Sized>(
        &self,
        partial: Vec<Layer>,
        direction: Direction,
        rng: &mut R,
    ) -> Result<RouteSpec, RouteError> {
        if partial.len() != PARTIAL_ROUTE_LEN {
            return Err(RouteError::PartialRouteLength(partial.len()));
        }
        let pool = self.foreign_view();
        let mut layers = vec![
            pick_layer(&pool, self.theta, rng)?,
            pick_layer(&pool, self.theta, rng)?,
        ];
        layers.extend(partial);
        Ok(RouteSpec { layers, direction })
    }
}

/// The out-of-band message opening a transfer: `(fd, BR1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Handshake {
    pub fd: FileDescriptor,
    pub partial: Vec<Layer>,
}

impl Handshake {
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = self.fd.encode()?;
        encode_partial_into(&self.partial, &mut out)?;
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, RouteError> {
        let mut r = Reader::new(buf);
        let fd = FileDescriptor::decode_from(&mut r)?;
        let partial = decode_partial_from(&mut r)?;
        r.finish()?;
        Ok(Self { fd, partial })
    }
}

pub fn encode_partial(layers: &[Layer]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    encode_partial_into(layers, &mut out)?;
    Ok(out)
}

pub fn decode_partial(buf: &[u8]) -> Result<Vec<Layer>, RouteError> {
    let mut r = Reader::new(buf);
    let layers = decode_partial_from(&mut r)?;
    r.finish()?;
    Ok(layers)
}

fn encode_partial_into(layers: &[Layer], out: &mut Vec<u8>) -> Result<(), WireError> {
    out.extend_from_slice(&u16_len("layer_count", layers.len())?.to_be_bytes());
    for l in layers {
        l.encode_into(out)?;
    }
    Ok(())
}

fn decode_partial_from(r: &mut Reader<'_>) -> Result<Vec<Layer>, RouteError> {
    let n = r.u16()? as usize;
    (0..n).map(|_| Layer::decode_from(r)).collect()
}

/// Sender, step one: the inner half of the backward route.
pub fn init_upload<R: Rng + ?Sized>(
    ctx: &RouteContext,
    fd: FileDescriptor,
    rng: &mut R,
) -> Result<Handshake, RouteError> {
    Ok(Handshake {
        fd,
        partial: ctx.partial_route(rng)?,
    })
}

/// Receiver, step two: reply with the inner half of the forward route, finish
/// the backward route and log the download.
pub fn on_handshake<R: Rng + ?Sized>(
    ctx: &RouteContext,
    log: &mut InteractionLog,
    hs: Handshake,
    now: f64,
    rng: &mut R,
) -> Result<(Vec<Layer>, RouteSpec), RouteError> {
    if !hs.fd.verify() {
        return Err(RouteError::BadFileDescriptor);
    }
    if hs.partial.len() != PARTIAL_ROUTE_LEN {
        return Err(RouteError::PartialRouteLength(hs.partial.len()));
    }
    let reply = ctx.partial_route(rng)?;
    let backward = ctx.complete(hs.partial, Direction::Backward, rng)?;
    log.insert(Interaction::new(now, ctx.device, InteractionKind::Download(hs.fd.id)));
    Ok((reply, backward))
}

/// Sender, step three: finish the forward route and log the upload.
pub fn finalize_upload<R: Rng + ?Sized>(
    ctx: &RouteContext,
    log: &mut InteractionLog,
    fd: &FileDescriptor,
    reply: Vec<Layer>,
    now: f64,
    rng: &mut R,
) -> Result<RouteSpec, RouteError> {
    let forward = ctx.complete(reply, Direction::Forward, rng)?;
    log.insert(Interaction::new(now, ctx.device, InteractionKind::Upload(fd.id)));
    Ok(forward)
}

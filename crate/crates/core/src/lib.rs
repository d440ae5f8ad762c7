//! Stateless probabilistic onion routing over e-squads, the sets of personal
//! devices owned by one user.
//!
//! Each hop of a route is a *layer* of candidate relays rather than a single
//! relay; whichever member is online carries the message onward. Layers are
//! sized from the devices' self-published online probabilities, which each
//! e-squad derives from its shared interaction log.

pub mod crypto;
pub mod esquad;
pub mod overlay;
pub mod por;
pub mod routes;
pub mod transfer;
mod wire;

pub use crypto::{CryptoError, KeyPair, PublicKey, SecretKey};
pub use esquad::{DeviceId, FileId, Interaction, InteractionKind, InteractionLog, UserId};
pub use overlay::{Descriptor, RpsView};
pub use por::{Address, PorMessage};
pub use routes::{Layer, RouteSpec};
pub use transfer::FileDescriptor;
pub use wire::WireError;

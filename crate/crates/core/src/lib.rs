//! Deterministic discrete-event simulator of a cross-layer ad hoc stack:
//! a reduced SCTP over OLSR over an abstract 802.11 link, where every
//! cross-layer interaction goes through a per-node environment bus gated by
//! the CLAA interaction matrix.

pub mod bus;
pub mod checksum;
pub mod ip;
pub mod link;
pub mod olsr;
pub mod registry;
pub mod sctp;
pub mod sim;
pub mod types;

pub use types::{NodeId, Time};

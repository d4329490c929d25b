//! Core engine of the DADA home gateway.
//!
//! The crate is organised along the packet and control paths:
//!
//! * [`mud`] parses and validates MUD documents (with the `dada:` rate keys).
//! * [`compiler`] resolves MUD endpoint abstractions against a concrete home
//!   [`compiler::NetworkContext`] and emits default-deny [`compiler::RuleSet`]s.
//! * [`datapath`] enforces rule sets per packet with token buckets, guest and
//!   manual isolation, and actuation-event limits.
//! * [`flow`] keeps the flow table and windowed per-device feature vectors.
//! * [`profiler`] learns, scores, identifies and shares device profiles.
//! * [`control`] is the tokens-and-pots state machine and its bus protocol.
//! * [`simulator`] generates deterministic home traffic and runs scenarios.
//!
//! Everything here is synchronous and free of I/O besides `std::io::Write`
//! sinks, so the same code runs in the gateway service, the CLI and the
//! browser demo.

pub mod compiler;
pub mod control;
pub mod datapath;
pub mod flow;
pub mod mud;
pub mod net;
pub mod profiler;
pub mod simulator;

pub use net::{Direction, MacAddr, PortRange, Protocol};

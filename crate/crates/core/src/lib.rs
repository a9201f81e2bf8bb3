//! Distributed, protocol-independent intrusion detection for polling-style
//! industrial networks.
//!
//! Every edge node runs an [`engine::Engine`] on its own RX/TX path. During a
//! trusted learning phase the engine records which connections exist, how
//! MAC and IP addresses map to each other, and how regularly packets arrive
//! on every connection. Afterwards, packets that belong to unknown
//! connections, contradict the learned address bindings, or arrive too early,
//! too late or at a drifting rate are reported as intrusions (and optionally
//! dropped). Nodes announce their status with HMAC-signed UDP broadcasts that
//! a [`logger::Logger`] collects.
//!
//! The [`sim`] module contains a deterministic simulator of a small Modbus/TCP
//! plant (one PLC polling eight sensors and one actuator every 100 ms) with
//! injectable attack scenarios, and [`bench`] wires simulated traffic through
//! a fleet of engines plus the central logger.

pub mod announce;
pub mod bench;
pub mod builder;
pub mod engine;
pub mod flow;
pub mod logger;
pub mod model;
pub mod packet;
pub mod pcap;
pub mod replay;
pub mod sim;
pub mod stats;
pub mod time;
pub mod timing;

pub use engine::{Cause, Engine, EngineConfig, IntrusionEvent, NodeStatus, Verdict};
pub use flow::{FlowKey, FlowKind, FlowTable, FlowVerdict, Mode};
pub use packet::{parse_frame, Direction, MacAddr, PacketMeta, ParseError};
pub use time::Timestamp;

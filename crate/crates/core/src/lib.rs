//! Desk-scale models of the Eternalblue SMB exploit mechanics and a
//! capture-driven detector for the WannaCry-style attack sequence.
//!
//! Everything here is inert analysis tooling: the "payloads" this crate
//! produces are fixed filler patterns, the pool is an arithmetic model,
//! and no code ever touches a live socket.
//!
//! Subsystems:
//! - [`smb_wire`]: byte-exact SMB1 message parsing and serialization.
//! - [`fea_conversion`]: the Os2Fea to NtFea list conversion in both the
//!   fixed and the length-truncating buggy variant, plus the crafted list
//!   that abuses the latter.
//! - [`pool_sim`]: a deterministic NonPagedPool model for the grooming
//!   choreography and the header-overwrite outcome check.
//! - [`groom_detector`]: a per-host-pair state machine that recognizes the
//!   staged attack sequence in flow events and emits signature rules.
//! - [`capture_io`]: classic pcap ingestion with TCP reassembly, and
//!   deterministic synthetic trace generation for closed-loop testing.

pub mod capture_io;
pub mod fea_conversion;
pub mod groom_detector;
pub mod pool_sim;
pub mod smb_wire;

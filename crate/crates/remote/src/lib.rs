//! Remote log-probability backend: a minimal JSON-over-HTTP protocol, a
//! blocking client implementing [`sharpen_core::ModelBackend`], and a mock
//! server that exposes any tabular model over that protocol.
//!
//! The protocol carries only finite log-probabilities. A response marked
//! `exhaustive` means every absent token has known zero mass; a truncated
//! (top-L) response leaves absent tokens unknown, and the decoder applies
//! its floor policy. All floats survive the wire bit-exactly, so a decode
//! through the mock server reproduces the in-process decode byte for byte.

pub mod client;
pub mod protocol;
pub mod server;

pub use client::{RemoteBackend, RemoteConfig};
pub use protocol::{ErrorBody, Meta, PrefixLogProbs, TopLRequest, TopLResponse};
pub use server::{MockServerHandle, serve_mock};

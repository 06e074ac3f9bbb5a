//! Live inference resources: a blocking streaming client for
//! OpenAI-compatible completion servers, usable wherever the core expects an
//! [`InferenceBackend`](csr_core::InferenceBackend).

mod client;
mod text;

pub use client::{LiveBackend, LiveConfig, Upstream};
pub use text::{SyllableText, TokenText};

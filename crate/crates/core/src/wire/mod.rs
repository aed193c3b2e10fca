//! Length-prefixed request/response protocol for serving chunk policies over
//! TCP, with server-side latency injection.

pub mod client;
pub mod protocol;
pub mod server;

pub use client::{client_run, ClientConfig, ClientReport, Connection, ServerInfo};
pub use protocol::{decode, encode, read_message, write_message, Message, Payload};
pub use server::{serve, ServerConfig, ServerHandle, SharedPolicy};

//! Interactive session backend: live plant simulations operated over HTTP and
//! a WebSocket stream, with demonstrations recorded in the trajectory export
//! schema.

pub mod protocol;
mod server;
pub mod session;

pub use server::{router, serve, spawn_reaper, ServiceState, SessionHandle};

//! Guidance service: WebSocket server and headless batch generation on top
//! of the `sketchguide` engine.

pub mod config;
pub mod generate;
pub mod messages;
pub mod server;

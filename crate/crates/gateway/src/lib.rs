//! Home gateway service around `dada-core`: configuration, persistent state,
//! the HTTP API with its event stream, the reader bus client and the `dada` CLI.

pub mod api;
pub mod bus;
pub mod config;
pub mod gateway;
pub mod serve;
pub mod store;

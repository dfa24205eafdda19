//! HTTP gateway, configuration and command-line interface.

pub mod api;
pub mod auth;
pub mod cli;
pub mod config;
pub mod server;
pub mod state;

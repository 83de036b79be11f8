//! Library surface of the `pi` command-line tool: configuration files, run
//! manifests, dataset plumbing, command orchestration, and report rendering.
//! The binary in `main.rs` is a thin argument-parsing wrapper over
//! [`commands`].

pub mod commands;
pub mod config;
pub mod data;
pub mod manifest;
pub mod report;

//! Transparent offloading of accelerator forward passes to a remote server.
//!
//! An application calls [`client::Dispatcher::forward`]; configuration
//! decides whether that runs on a local [`backend::Accelerator`] or is
//! shipped over TCP to a [`server`] that caches models by content digest.
//! [`profiler`] splits every cycle into communication, accelerator and host
//! time, and [`harness`] drives reproducible native versus offload runs.

pub mod backend;
pub mod client;
pub mod clock;
pub mod config;
pub mod harness;
pub mod profiler;
pub mod server;
pub mod transport;
pub mod wire;

pub use backend::{
    Accelerator, Backend, BackendProfile, Frame, Heatmap, MockPose, Preset, WorkloadKind,
};
pub use client::{connect, Dispatcher, Session, SessionOptions};
pub use config::{DispatchConfig, DispatchMode, KeyValues};
pub use server::{serve, RunningServer, ServerConfig};
pub use wire::{Dims, Message, ModelDescriptor};

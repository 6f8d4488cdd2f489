//! Proxy-based checkpoint/restart for a miniature message-passing runtime.
//!
//! Each rank links the passive [`plugin`] facade, which forwards every call
//! to a per-rank [`proxy`] process holding the transport. The
//! [`coordinator`] forms the world, runs the finalize barrier and drives
//! checkpoints; [`ckpt`] defines images and manifests; [`launcher`] spawns
//! and restarts worlds.

pub mod apps;
pub mod ckpt;
pub mod coordinator;
pub mod launcher;
pub mod plugin;
pub mod proto;
pub mod proxy;

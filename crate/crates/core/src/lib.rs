//! Building blocks of an unprivileged, user-space container runtime.
//!
//! * [`repo`] keeps images, layers and containers under one user directory.
//! * [`registry`] pulls images from Docker Registry v2 servers.
//! * [`layers`] flattens layer archives into a container root tree.
//! * [`metadata`] turns image configuration and command line overrides into
//!   an [`metadata::ExecSpec`], and an ExecSpec into an OCI runtime config.
//! * [`engine`] runs an ExecSpec with one of the execution modes.
//! * [`bench`] times workloads across modes and reports ratios.

pub mod bench;
pub mod engine;
pub mod layers;
pub mod metadata;
pub mod registry;
pub mod repo;

pub use engine::ExecMode;
pub use repo::{ContainerRecord, ImageRef, LayerDescriptor, Repo, RepoLayout};

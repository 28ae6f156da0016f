//! Translation between container paths and host paths.
//!
//! A container is a directory tree (the rootfs) plus a list of host
//! directories bound at container locations. [`PathMap::resolve`] walks a
//! container path one component at a time the way the kernel would inside a
//! chroot: `..` never climbs above the container root, absolute symlink
//! targets restart at the container root, and binds shadow whatever the
//! rootfs holds at their mount point. The engines use it on every path they
//! hand to the host kernel and use [`PathMap::to_container`] to present host
//! paths (cwd, `/proc` links) back to the program.

mod error;
mod exec;
mod fs;
pub mod launch;
mod map;
mod resolve;

pub use error::PathError;
pub use exec::{plan_exec, search_path, ExecPlan, LoaderRef, MAX_INTERPRETER_DEPTH};
pub use fs::{HostFs, NodeKind, RealFs};
pub use map::{normalize, Bind, PathMap};
pub use resolve::{Resolved, MAX_SYMLINKS};

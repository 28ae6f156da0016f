use std::fs;
use std::io::Read;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

/// What a host path is, without following a final symlink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Dir,
    Symlink(PathBuf),
    File { mode: u32 },
    Other,
}

/// The host filesystem queries path resolution needs.
///
/// Abstracted so the preloaded interposer can answer them with raw system
/// calls and tests can use an in-memory tree.
pub trait HostFs {
    /// `lstat` of `path`; `None` when it does not exist or cannot be examined.
    fn node(&self, path: &Path) -> Option<NodeKind>;
    /// Up to `max` leading bytes of a regular file.
    fn read_head(&self, path: &Path, max: usize) -> std::io::Result<Vec<u8>>;
}

/// [`HostFs`] backed by `std::fs`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RealFs;

impl HostFs for RealFs {
    fn node(&self, path: &Path) -> Option<NodeKind> {
        let meta = fs::symlink_metadata(path).ok()?;
        let ft = meta.file_type();
        Some(if ft.is_dir() {
            NodeKind::Dir
        } else if ft.is_symlink() {
            NodeKind::Symlink(fs::read_link(path).ok()?)
        } else if ft.is_file() {
            NodeKind::File {
                mode: meta.permissions().mode(),
            }
        } else {
            NodeKind::Other
        })
    }

    fn read_head(&self, path: &Path, max: usize) -> std::io::Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(max.min(1 << 16));
        fs::File::open(path)?.take(max as u64).read_to_end(&mut buf)?;
        Ok(buf)
    }
}

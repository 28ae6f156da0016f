use std::ffi::OsStr;
use std::os::unix::ffi::OsStrExt;
use std::path::{Component, Path, PathBuf};

/// A host directory (or file) made visible at a container location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bind {
    pub host: PathBuf,
    pub container: PathBuf,
    /// Paths below the mount point are handed to the kernel unexamined.
    /// Needed for `/proc`, whose magic links only the kernel can follow.
    pub kernel_resolved: bool,
}

impl Bind {
    pub fn new(host: impl Into<PathBuf>, container: impl AsRef<Path>) -> Self {
        let host = normalize(&host.into());
        let kernel_resolved = host.starts_with("/proc");
        Bind {
            host,
            container: normalize(container.as_ref()),
            kernel_resolved,
        }
    }

    /// Parses the `-v` syntax: `host[:container]`.
    pub fn parse(spec: &str) -> Option<Self> {
        let (host, container) = match spec.split_once(':') {
            Some((h, c)) => (h, c),
            None => (spec, spec),
        };
        if !host.starts_with('/') || !container.starts_with('/') {
            return None;
        }
        Some(Bind::new(host, container))
    }
}

/// Lexically normalizes an absolute path: drops `.` and empty components
/// and applies `..` without climbing above `/`.
pub fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::from("/");
    for c in p.components() {
        match c {
            Component::Normal(n) => out.push(n),
            Component::ParentDir => {
                out.pop();
            }
            _ => {}
        }
    }
    out
}

/// Splits a byte path into its non-empty components.
pub(crate) fn split(path: &[u8]) -> impl Iterator<Item = &[u8]> {
    path.split(|&b| b == b'/').filter(|c| !c.is_empty())
}

/// Number of leading components `prefix` shares with `path`, when `prefix`
/// is entirely a prefix of it.
fn component_prefix<'a>(prefix: &Path, path: &'a [Vec<u8>]) -> Option<usize> {
    let mut n = 0;
    for c in split(prefix.as_os_str().as_bytes()) {
        if path.get(n).map(Vec::as_slice) != Some(c) {
            return None;
        }
        n += 1;
    }
    Some(n)
}

/// The rootfs and binds of one container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathMap {
    rootfs: PathBuf,
    binds: Vec<Bind>,
}

impl PathMap {
    pub fn new(rootfs: impl Into<PathBuf>, binds: Vec<Bind>) -> Self {
        PathMap {
            rootfs: normalize(&rootfs.into()),
            binds,
        }
    }

    pub fn rootfs(&self) -> &Path {
        &self.rootfs
    }

    pub fn binds(&self) -> &[Bind] {
        &self.binds
    }

    /// The bind covering a container path given as components, with the
    /// number of components its mount point spans. Longest mount point wins;
    /// among equal ones the last listed.
    pub(crate) fn bind_for(&self, container: &[Vec<u8>]) -> Option<(&Bind, usize)> {
        let mut best: Option<(&Bind, usize)> = None;
        for b in &self.binds {
            if let Some(n) = component_prefix(&b.container, container) {
                if best.is_none_or(|(_, m)| n >= m) {
                    best = Some((b, n));
                }
            }
        }
        best
    }

    /// Host location of an already resolved container path (no symlink
    /// processing).
    pub(crate) fn host_of(&self, container: &[Vec<u8>]) -> PathBuf {
        let (mut out, skip) = match self.bind_for(container) {
            Some((b, n)) => (b.host.clone(), n),
            None => (self.rootfs.clone(), 0),
        };
        for c in &container[skip..] {
            out.push(OsStr::from_bytes(c));
        }
        out
    }

    /// Lexical translation of an absolute container path, for paths already
    /// known to be free of symlinks.
    pub fn to_host_lexical(&self, container: &Path) -> PathBuf {
        let comps: Vec<Vec<u8>> = split(normalize(container).as_os_str().as_bytes())
            .map(<[u8]>::to_vec)
            .collect();
        self.host_of(&comps)
    }

    /// Maps a host path back into the container view. The longest matching
    /// host prefix among the rootfs and the bind sources wins; paths outside
    /// all of them have no container name.
    pub fn to_container(&self, host: &Path) -> Option<PathBuf> {
        let host = normalize(host);
        let comps: Vec<Vec<u8>> = split(host.as_os_str().as_bytes()).map(<[u8]>::to_vec).collect();
        let mut best: Option<(usize, &Path)> =
            component_prefix(&self.rootfs, &comps).map(|n| (n, Path::new("/")));
        for b in &self.binds {
            if let Some(n) = component_prefix(&b.host, &comps) {
                if best.is_none_or(|(m, _)| n > m) {
                    best = Some((n, &b.container));
                }
            }
        }
        let (n, base) = best?;
        let mut out = base.to_path_buf();
        for c in &comps[n..] {
            out.push(OsStr::from_bytes(c));
        }
        Some(out)
    }

    /// True when a host path lies inside the rootfs or a bind source.
    pub fn contains_host(&self, host: &Path) -> bool {
        let host = normalize(host);
        host.starts_with(&self.rootfs) || self.binds.iter().any(|b| host.starts_with(&b.host))
    }
}

use std::collections::VecDeque;
use std::ffi::OsStr;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

use crate::map::split;
use crate::{HostFs, NodeKind, PathError, PathMap};

/// Symlinks followed during one resolution before giving up, as Linux does.
pub const MAX_SYMLINKS: usize = 40;
const PATH_MAX: usize = 4096;

/// A container path resolved to the host path the kernel should see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    pub host: PathBuf,
    /// The same location in the container view, symlinks resolved.
    pub container: PathBuf,
}

fn is_proc_pid(c: &[u8]) -> bool {
    c == b"self" || c == b"thread-self" || (!c.is_empty() && c.iter().all(u8::is_ascii_digit))
}

fn join(base: PathBuf, comps: &[Vec<u8>]) -> PathBuf {
    let mut out = base;
    for c in comps {
        out.push(OsStr::from_bytes(c));
    }
    out
}

impl PathMap {
    /// Resolves `raw` as a process inside the container would see it.
    ///
    /// Relative paths start at `cwd` (a container path). The final
    /// component is followed when it is a symlink only if `follow_last` is
    /// set or `raw` ends in a slash. When an intermediate component is
    /// missing or not a directory the remainder is appended unexamined, so
    /// the kernel reports the same error it would inside a real chroot.
    pub fn resolve(&self, fs: &dyn HostFs, cwd: &Path, raw: &[u8], follow_last: bool) -> Result<Resolved, PathError> {
        if raw.is_empty() {
            return Err(PathError::NotFound(PathBuf::new()));
        }
        if raw.len() >= PATH_MAX {
            return Err(PathError::TooLong);
        }
        let mut trailing_slash = raw.len() > 1 && raw.ends_with(b"/");
        let mut follow_last = follow_last || trailing_slash;

        let mut cur: Vec<Vec<u8>> = if raw[0] == b'/' {
            Vec::new()
        } else {
            split(cwd.as_os_str().as_bytes()).map(<[u8]>::to_vec).collect()
        };
        let mut pending: VecDeque<Vec<u8>> = split(raw).map(<[u8]>::to_vec).collect();
        let mut tail: Vec<Vec<u8>> = Vec::new();
        let mut links = 0;

        while let Some(c) = pending.pop_front() {
            if c == b"." {
                continue;
            }
            if c == b".." {
                cur.pop();
                continue;
            }
            cur.push(c);
            let last = pending.is_empty();

            if let Some((bind, depth)) = self.bind_for(&cur) {
                if bind.kernel_resolved && cur.len() > depth {
                    // /proc/<pid>/root names the process root, which for a
                    // contained process is the container root.
                    if bind.host == Path::new("/proc") && cur.len() == depth + 2 && is_proc_pid(&cur[depth]) && cur[depth + 1] == b"root" {
                        cur.clear();
                    }
                    continue;
                }
            }

            match fs.node(&self.host_of(&cur)) {
                Some(NodeKind::Symlink(target)) if !last || follow_last => {
                    links += 1;
                    if links > MAX_SYMLINKS {
                        return Err(PathError::Loop(join(PathBuf::from("/"), &cur)));
                    }
                    cur.pop();
                    let target = target.as_os_str().as_bytes();
                    if target.first() == Some(&b'/') {
                        cur.clear();
                    }
                    // A final link to "dir/" demands a directory, like a
                    // trailing slash on the path itself.
                    if last && target.len() > 1 && target.ends_with(b"/") {
                        trailing_slash = true;
                        follow_last = true;
                    }
                    for t in split(target).collect::<Vec<_>>().into_iter().rev() {
                        pending.push_front(t.to_vec());
                    }
                }
                Some(NodeKind::Dir) => {}
                Some(_) | None if last => {}
                _ => {
                    tail.extend(pending.drain(..));
                    break;
                }
            }
        }

        let mut host = join(self.host_of(&cur), &tail);
        let mut container = join(PathBuf::from("/"), &cur);
        container = join(container, &tail);
        if trailing_slash {
            host.as_mut_os_string().push("/");
            if container != Path::new("/") {
                container.as_mut_os_string().push("/");
            }
        }
        Ok(Resolved { host, container })
    }
}

use std::ffi::OsStr;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

use udocker_elf::{interpreter_from_head, HeadProbe};

use crate::{HostFs, NodeKind, PathError, PathMap};

/// Nested `#!` interpreters allowed, matching the kernel.
pub const MAX_INTERPRETER_DEPTH: usize = 4;
const SHEBANG_MAX: usize = 256;
// Patched objects may keep PT_INTERP near the end of the file.
const HEAD_LIMIT: usize = 1 << 28;

/// The program loader named by an executable's PT_INTERP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoaderRef {
    pub container: PathBuf,
    pub host: PathBuf,
    /// The executable already names the loader by its host path, as left
    /// by ahead-of-time ELF patching.
    pub prefixed: bool,
}

/// How to run an exec request made inside the container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecPlan {
    /// The binary finally executed, after `#!` processing.
    pub container_path: PathBuf,
    pub host_path: PathBuf,
    /// argv including any `#!` interpreter and argument.
    pub argv: Vec<Vec<u8>>,
    /// Set for dynamically linked programs: the container's loader, which
    /// must be used instead of the host one the kernel would pick.
    pub loader: Option<LoaderRef>,
}

fn executable(fs: &dyn HostFs, host: &Path, container: &Path) -> Result<(), PathError> {
    match fs.node(host) {
        None => Err(PathError::NotFound(container.to_path_buf())),
        Some(NodeKind::File { mode }) if mode & 0o111 != 0 => Ok(()),
        Some(_) => Err(PathError::Access(container.to_path_buf())),
    }
}

/// Splits a `#!` line into interpreter and optional single argument.
fn parse_shebang(head: &[u8]) -> Option<(Vec<u8>, Option<Vec<u8>>)> {
    let line = head.strip_prefix(b"#!")?;
    let end = line.iter().position(|&b| b == b'\n').unwrap_or(line.len());
    let line = line[..end].trim_ascii();
    if line.is_empty() {
        return None;
    }
    let split = line.iter().position(|b| b.is_ascii_whitespace());
    Some(match split {
        None => (line.to_vec(), None),
        Some(i) => {
            let arg = line[i..].trim_ascii();
            (line[..i].to_vec(), (!arg.is_empty()).then(|| arg.to_vec()))
        }
    })
}

/// Works out what an `execve(path, argv)` issued inside the container runs.
pub fn plan_exec(
    map: &PathMap,
    fs: &dyn HostFs,
    cwd: &Path,
    path: &[u8],
    argv: Vec<Vec<u8>>,
) -> Result<ExecPlan, PathError> {
    let mut path = path.to_vec();
    let mut argv = argv;
    for _ in 0..=MAX_INTERPRETER_DEPTH {
        let resolved = map.resolve(fs, cwd, &path, true)?;
        let shown = Path::new(OsStr::from_bytes(&path)).to_path_buf();
        executable(fs, &resolved.host, &shown)?;
        let mut head = fs.read_head(&resolved.host, SHEBANG_MAX)?;

        if let Some((interp, arg)) = parse_shebang(&head) {
            let mut next = vec![interp.clone()];
            next.extend(arg);
            next.push(path.clone());
            next.extend(argv.into_iter().skip(1));
            argv = next;
            path = interp;
            continue;
        }

        let loader = loop {
            match interpreter_from_head(&head).map_err(|_| PathError::NoExec(shown.clone()))? {
                HeadProbe::NotElf => return Err(PathError::NoExec(shown)),
                HeadProbe::Static => break None,
                HeadProbe::NeedMore(n) if n <= HEAD_LIMIT && n > head.len() => {
                    head = fs.read_head(&resolved.host, n)?;
                    if head.len() < n {
                        return Err(PathError::NoExec(shown));
                    }
                }
                HeadProbe::NeedMore(_) => return Err(PathError::NoExec(shown)),
                HeadProbe::Interpreter(i) => {
                    let patched = Path::new(&i)
                        .strip_prefix(map.rootfs())
                        .ok()
                        .filter(|_| map.rootfs() != Path::new("/"))
                        .map(|rest| Path::new("/").join(rest));
                    let prefixed = patched.is_some();
                    let container = patched.unwrap_or_else(|| PathBuf::from(&i));
                    let r = map.resolve(fs, Path::new("/"), container.as_os_str().as_bytes(), true)?;
                    executable(fs, &r.host, &container).or_else(|e| match e {
                        // The kernel only needs the loader to be readable.
                        PathError::Access(_) if fs.node(&r.host).is_some() => Ok(()),
                        e => Err(e),
                    })?;
                    break Some(LoaderRef {
                        container,
                        host: r.host,
                        prefixed,
                    });
                }
            }
        };
        return Ok(ExecPlan {
            container_path: resolved.container,
            host_path: resolved.host,
            argv,
            loader,
        });
    }
    Err(PathError::Loop(Path::new(OsStr::from_bytes(&path)).to_path_buf()))
}

/// Looks `name` up along a container `PATH` value the way `execvp` does.
/// Names containing a slash are returned unchanged.
pub fn search_path(map: &PathMap, fs: &dyn HostFs, name: &str, path_var: &str) -> Option<PathBuf> {
    if name.contains('/') {
        return Some(PathBuf::from(name));
    }
    for dir in path_var.split(':') {
        let dir = if dir.is_empty() { "." } else { dir };
        let candidate = Path::new(dir).join(name);
        let Ok(r) = map.resolve(fs, Path::new("/"), candidate.as_os_str().as_bytes(), true) else {
            continue;
        };
        if let Some(NodeKind::File { mode }) = fs.node(&r.host) {
            if mode & 0o111 != 0 {
                return Some(candidate);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shebang_forms() {
        assert_eq!(parse_shebang(b"#!/bin/sh\necho"), Some((b"/bin/sh".to_vec(), None)));
        assert_eq!(
            parse_shebang(b"#! /usr/bin/env  python3 -u \n"),
            Some((b"/usr/bin/env".to_vec(), Some(b"python3 -u".to_vec())))
        );
        assert_eq!(parse_shebang(b"#!\n"), None);
        assert_eq!(parse_shebang(b"\x7fELF"), None);
    }
}

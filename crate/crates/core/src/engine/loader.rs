//! F1 to F4: programs run on the container's own loader and libraries,
//! with the interposer preloaded to translate paths in every process.

use std::collections::BTreeSet;
use std::ffi::OsStr;
use std::fs;
use std::os::fd::{FromRawFd, OwnedFd};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use udocker_elf::ldcache::parse_ld_so_cache;
use udocker_elf::loader::neutralize_loader;
use udocker_elf::tree::{patch_tree, resolve_in_root, TreeSpec, DEFAULT_LIB_DIRS};
use udocker_elf::{read_elf, Journal};
use udocker_pathmap::launch::{plan_launch, INTERPOSER_FILE, LaunchConfig, LaunchError, LoaderMode};
use udocker_pathmap::{PathMap, RealFs};

use super::{ContainerDirs, EngineError, EngineOptions, ExecMode, StdFds};
use crate::metadata::ExecSpec;

/// Part of glibc; always taken from the container.
const GLIBC_SONAMES: &[&str] = &[
    "libc.so.6",
    "libm.so.6",
    "libdl.so.2",
    "libpthread.so.0",
    "librt.so.1",
    "libutil.so.1",
];

const HOST_LIB_DIRS: &[&str] = &[
    "/lib/x86_64-linux-gnu",
    "/usr/lib/x86_64-linux-gnu",
    "/lib64",
    "/usr/lib64",
    "/lib",
    "/usr/lib",
];

fn loader_mode(mode: ExecMode) -> Option<LoaderMode> {
    LoaderMode::parse(&mode.to_string())
}

/// Container library directories, in the order the container's loader
/// cache lists them, followed by the usual defaults. Only directories that
/// exist in the tree are returned, symlinks resolved.
pub fn container_lib_dirs(rootfs: &Path) -> Vec<String> {
    let mut dirs: Vec<String> = Vec::new();
    let cached = resolve_in_root(rootfs, "/etc/ld.so.cache")
        .and_then(|c| parse_ld_so_cache(rootfs.join(c.trim_start_matches('/'))).ok())
        .map(|v| v.directories())
        .unwrap_or_default();
    for d in cached.iter().map(String::as_str).chain(DEFAULT_LIB_DIRS.iter().copied()) {
        let Some(real) = resolve_in_root(rootfs, d) else { continue };
        if rootfs.join(real.trim_start_matches('/')).is_dir() && !dirs.contains(&real) {
            dirs.push(real);
        }
    }
    dirs
}

fn host_library(soname: &str) -> Option<PathBuf> {
    let cached = parse_ld_so_cache("/etc/ld.so.cache")
        .ok()
        .and_then(|v| v.entries.into_iter().find(|e| e.soname == soname).map(|e| PathBuf::from(e.path)));
    cached
        .filter(|p| p.is_file())
        .or_else(|| HOST_LIB_DIRS.iter().map(|d| Path::new(d).join(soname)).find(|p| p.is_file()))
}

/// Copies the interposer and the non-glibc libraries it links against
/// into the container's support directory.
fn stage_support(ct: &ContainerDirs, opts: &EngineOptions) -> Result<PathBuf, EngineError> {
    let src = opts
        .interposer
        .as_ref()
        .filter(|p| p.is_file())
        .ok_or_else(|| EngineError::Unavailable("the interposer library is not installed (run `udocker install`)".into()))?;
    let dir = ct.support_dir();
    fs::create_dir_all(&dir)?;
    let dest = dir.join(INTERPOSER_FILE);
    fs::copy(src, &dest)?;
    for soname in read_elf(src)?.needed {
        if GLIBC_SONAMES.contains(&soname.as_str()) || soname.starts_with("ld-linux") {
            continue;
        }
        let host = host_library(&soname)
            .ok_or_else(|| EngineError::Unavailable(format!("{soname}, needed by the interposer, not found on the host")))?;
        fs::copy(host, dir.join(&soname))?;
    }
    Ok(dest)
}

/// Loader files found in the container's library directories, as
/// `(file name, rootfs-relative real path)`.
fn container_loaders(rootfs: &Path) -> Vec<(String, PathBuf)> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for dir in container_lib_dirs(rootfs) {
        let Ok(rd) = fs::read_dir(rootfs.join(dir.trim_start_matches('/'))) else { continue };
        let mut names: Vec<String> = rd.flatten().map(|e| e.file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        for name in names {
            if !(name.starts_with("ld-linux") || name.starts_with("ld64.so")) || !seen.insert(name.clone()) {
                continue;
            }
            if let Some(real) = resolve_in_root(rootfs, &format!("{dir}/{name}")) {
                out.push((name, PathBuf::from(real.trim_start_matches('/'))));
            }
        }
    }
    out
}

/// Writes neutralized copies of the container's loaders outside the tree.
fn copy_loaders(ct: &ContainerDirs) -> Result<usize, EngineError> {
    let dir = ct.loader_dir();
    fs::create_dir_all(&dir)?;
    let mut n = 0;
    for (name, rel) in container_loaders(&ct.rootfs) {
        let Ok(data) = fs::read(ct.rootfs.join(&rel)) else { continue };
        let Some(patched) = neutralize_loader(&data) else {
            log::warn!("{}: no host search locations found to disable", rel.display());
            continue;
        };
        let dest = dir.join(&name);
        fs::write(&dest, patched)?;
        fs::set_permissions(&dest, fs::Permissions::from_mode(0o755))?;
        n += 1;
    }
    Ok(n)
}

/// Prepares the files `mode` needs. Returns the number of files created
/// or patched.
pub fn prepare(ct: &ContainerDirs, mode: ExecMode, opts: &EngineOptions) -> Result<usize, EngineError> {
    stage_support(ct, opts)?;
    match mode {
        ExecMode::F2 => copy_loaders(ct),
        ExecMode::F3 => {
            let spec = TreeSpec::new(&ct.rootfs, container_lib_dirs(&ct.rootfs));
            let report = patch_tree(&spec, &Journal::new(ct.journal()))?;
            Ok(report.patched.len() + report.loaders.len())
        }
        _ => Ok(0),
    }
}

/// Undoes every change made to the tree and removes the loader copies.
/// Returns the number of files restored.
pub fn revert(ct: &ContainerDirs) -> Result<usize, EngineError> {
    let journal = Journal::new(ct.journal());
    let mut restored = 0;
    if journal.exists() {
        let r = journal.revert(&ct.rootfs)?;
        for p in &r.mismatched {
            log::warn!("{}: changed after patching, restored content differs", p.display());
        }
        restored = r.restored.len();
    }
    let loaders = ct.loader_dir();
    if loaders.is_dir() {
        fs::remove_dir_all(loaders)?;
    }
    Ok(restored)
}

fn stdio(fd: i32) -> Result<Stdio, EngineError> {
    let dup = unsafe { libc::fcntl(fd, libc::F_DUPFD_CLOEXEC, 3) };
    if dup < 0 {
        return Err(EngineError::Io(std::io::Error::last_os_error()));
    }
    Ok(Stdio::from(unsafe { OwnedFd::from_raw_fd(dup) }))
}

fn apply_fds(cmd: &mut Command, fds: StdFds) -> Result<(), EngineError> {
    cmd.stdin(stdio(fds.stdin)?).stdout(stdio(fds.stdout)?).stderr(stdio(fds.stderr)?);
    Ok(())
}

/// Launch configuration for the container in `mode`.
pub fn launch_config(ct: &ContainerDirs, map: &PathMap, mode: LoaderMode) -> LaunchConfig {
    let lib_dirs = container_lib_dirs(map.rootfs());
    let mut libpath: Vec<PathBuf> = lib_dirs.iter().map(|d| map.rootfs().join(d.trim_start_matches('/'))).collect();
    libpath.push(ct.support_dir());
    LaunchConfig {
        mode,
        root: map.rootfs().to_path_buf(),
        binds: map.binds().to_vec(),
        loader_dir: matches!(mode, LoaderMode::F2).then(|| ct.loader_dir()),
        libpath,
        preload: ct.support_dir().join(INTERPOSER_FILE),
        journal: matches!(mode, LoaderMode::F4).then(|| ct.journal()),
        lib_dirs,
    }
}

/// Runs the spec and returns its exit code.
pub fn run(
    ct: &ContainerDirs,
    spec: &ExecSpec,
    map: &PathMap,
    program: &Path,
    host_cwd: &Path,
    mode: ExecMode,
    opts: &EngineOptions,
) -> Result<i32, EngineError> {
    let lmode = loader_mode(mode).ok_or_else(|| EngineError::Fault(format!("{mode} is not a loader mode")))?;
    let cfg = launch_config(ct, map, lmode);
    let env: Vec<Vec<u8>> = spec.env_list().into_iter().map(String::into_bytes).collect();
    let argv: Vec<Vec<u8>> = spec.argv.iter().map(|a| a.as_bytes().to_vec()).collect();
    let launch = plan_launch(&cfg, &RealFs, &spec.cwd, program.as_os_str().as_bytes(), argv, &env).map_err(|e| match e {
        LaunchError::Static(_) => EngineError::Unavailable(e.to_string()),
        LaunchError::Path(p) => EngineError::NotFound(p.to_string()),
    })?;
    let mut cmd = Command::new(&launch.path);
    if let Some(a0) = launch.argv.first() {
        cmd.arg0(OsStr::from_bytes(a0));
    }
    cmd.args(launch.argv.iter().skip(1).map(|a| OsStr::from_bytes(a)));
    cmd.env_clear();
    for kv in &launch.env {
        let (k, v) = match kv.iter().position(|&b| b == b'=') {
            Some(i) => (&kv[..i], &kv[i + 1..]),
            None => (&kv[..], &b""[..]),
        };
        cmd.env(OsStr::from_bytes(k), OsStr::from_bytes(v));
    }
    cmd.current_dir(host_cwd);
    apply_fds(&mut cmd, opts.fds)?;
    let status = cmd
        .status()
        .map_err(|e| EngineError::Fault(format!("{}: {e}", launch.path.display())))?;
    Ok(status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0)))
}

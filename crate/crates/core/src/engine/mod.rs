//! Execution modes and the engines behind them.
//!
//! [`run`] takes an [`ExecSpec`] and a container directory and dispatches
//! to the ptrace engine (P1, P2), the loader engine (F1 to F4) or the
//! namespace engine (R1). [`setup_mode`] moves a container between modes,
//! undoing any file changes the previous mode made first.

use std::fmt;
use std::fs;
use std::io;
use std::os::fd::RawFd;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use udocker_pathmap::{search_path, Bind, PathMap, RealFs};

use crate::metadata::{ExecSpec, DEFAULT_PATH};
use crate::repo::JOURNAL_FILE;

pub mod loader;
pub mod ns;
pub mod ptrace;

pub use ptrace::TraceStats;

/// How a container is executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExecMode {
    /// ptrace with a seccomp filter selecting path system calls.
    #[default]
    P1,
    /// ptrace stopping at every system call.
    P2,
    /// Container loader run explicitly, with LD_LIBRARY_PATH.
    F1,
    /// F1 with a container loader that ignores host search locations.
    F2,
    /// F2 with every ELF object patched ahead of time.
    F3,
    /// F2 with executables patched when first executed.
    F4,
    /// Unprivileged user and mount namespaces.
    R1,
}

pub const ALL_MODES: [ExecMode; 7] = [
    ExecMode::P1,
    ExecMode::P2,
    ExecMode::F1,
    ExecMode::F2,
    ExecMode::F3,
    ExecMode::F4,
    ExecMode::R1,
];

impl ExecMode {
    pub fn is_ptrace(self) -> bool {
        matches!(self, ExecMode::P1 | ExecMode::P2)
    }

    pub fn is_loader(self) -> bool {
        matches!(self, ExecMode::F1 | ExecMode::F2 | ExecMode::F3 | ExecMode::F4)
    }

    pub fn description(self) -> &'static str {
        match self {
            ExecMode::P1 => "ptrace, seccomp-selected system calls",
            ExecMode::P2 => "ptrace, all system calls",
            ExecMode::F1 => "loader as first argument, LD_LIBRARY_PATH",
            ExecMode::F2 => "modified loader, host search locations disabled",
            ExecMode::F3 => "ELF headers patched ahead of time",
            ExecMode::F4 => "ELF headers patched on demand",
            ExecMode::R1 => "unprivileged namespaces",
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown execution mode {0:?} (expected one of P1 P2 F1 F2 F3 F4 R1)")]
pub struct UnknownMode(pub String);

impl FromStr for ExecMode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_MODES
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownMode(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{0}")]
    NotFound(String),
    #[error("execution mode unavailable: {0}")]
    Unavailable(String),
    #[error("engine failure: {0}")]
    Fault(String),
    #[error(transparent)]
    Elf(#[from] udocker_elf::ElfError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Descriptors the container's first process gets as 0, 1 and 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StdFds {
    pub stdin: RawFd,
    pub stdout: RawFd,
    pub stderr: RawFd,
}

impl Default for StdFds {
    fn default() -> Self {
        StdFds {
            stdin: 0,
            stdout: 1,
            stderr: 2,
        }
    }
}

/// Files of one container the engines read and write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerDirs {
    pub dir: PathBuf,
    pub rootfs: PathBuf,
}

const MODE_FILE: &str = "engine.mode";

impl ContainerDirs {
    /// The layout the repository creates: the root tree in `ROOT`.
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        ContainerDirs {
            rootfs: dir.join("ROOT"),
            dir,
        }
    }

    pub fn journal(&self) -> PathBuf {
        self.dir.join(JOURNAL_FILE)
    }

    /// Neutralized loader copies used by F2.
    pub fn loader_dir(&self) -> PathBuf {
        self.dir.join("loaders")
    }

    /// The interposer and the libraries it needs.
    pub fn support_dir(&self) -> PathBuf {
        self.dir.join("support")
    }

    /// The mode the tree was last prepared for.
    pub fn prepared_mode(&self) -> Option<ExecMode> {
        fs::read_to_string(self.dir.join(MODE_FILE)).ok()?.trim().parse().ok()
    }
}

#[derive(Debug, Clone, Default)]
pub struct EngineOptions {
    /// The preloadable interposer, needed by the loader modes.
    pub interposer: Option<PathBuf>,
    /// An OCI runtime to hand R1 containers to instead of setting up the
    /// namespaces directly.
    pub oci_runtime: Option<PathBuf>,
    /// Behave as if the seccomp filter could not be installed.
    pub fail_filter: bool,
    pub fds: StdFds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub exit_code: i32,
    /// The mode that actually ran, after any fallback.
    pub mode: ExecMode,
    pub stats: Option<TraceStats>,
}

/// Host locations every container sees.
pub const DEFAULT_BINDS: [&str; 5] = ["/dev", "/proc", "/sys", "/etc/resolv.conf", "/etc/hosts"];

/// Default binds plus the spec's, with host sides canonicalized. Missing
/// default binds are dropped; a missing requested bind is an error.
pub fn effective_binds(spec: &ExecSpec) -> Result<Vec<Bind>, EngineError> {
    let mut out: Vec<Bind> = Vec::new();
    for d in DEFAULT_BINDS {
        if let Ok(h) = fs::canonicalize(d) {
            out.push(Bind::new(h, d));
        }
    }
    for b in &spec.binds {
        let host = fs::canonicalize(&b.host)
            .map_err(|_| EngineError::NotFound(format!("bind source {} does not exist", b.host.display())))?;
        out.retain(|o| o.container != b.container);
        out.push(Bind::new(host, &b.container));
    }
    Ok(out)
}

/// The mapping the engines translate with.
pub fn container_map(ct: &ContainerDirs, spec: &ExecSpec) -> Result<PathMap, EngineError> {
    let root = fs::canonicalize(&ct.rootfs)
        .map_err(|_| EngineError::NotFound(format!("container root {} does not exist", ct.rootfs.display())))?;
    Ok(PathMap::new(root, effective_binds(spec)?))
}

/// Container path of the program to start, looked up along PATH.
pub fn locate_program(map: &PathMap, spec: &ExecSpec) -> Result<PathBuf, EngineError> {
    let name = spec
        .argv
        .first()
        .ok_or_else(|| EngineError::NotFound("no command given and the image defines none".into()))?;
    let path_var = spec.env.get("PATH").map(String::as_str).unwrap_or(DEFAULT_PATH);
    let found = search_path(map, &RealFs, name, path_var)
        .filter(|p| map.resolve(&RealFs, &spec.cwd, p.as_os_str().as_bytes(), true).map(|r| r.host.exists()).unwrap_or(false));
    found.ok_or_else(|| EngineError::NotFound(format!("{name}: command not found in the container")))
}

/// Host directory for the spec's working directory.
pub fn host_workdir(map: &PathMap, spec: &ExecSpec) -> Result<PathBuf, EngineError> {
    let r = map
        .resolve(&RealFs, Path::new("/"), spec.cwd.as_os_str().as_bytes(), true)
        .map_err(|e| EngineError::NotFound(format!("working directory {}: {e}", spec.cwd.display())))?;
    if !r.host.is_dir() {
        return Err(EngineError::NotFound(format!("working directory {} is not a directory", spec.cwd.display())));
    }
    Ok(r.host)
}

/// The uid and gid to report when they differ from the real ones.
fn emulated_identity(spec: &ExecSpec) -> Option<(u32, u32)> {
    let real = unsafe { (libc::geteuid(), libc::getegid()) };
    let want = (spec.identity.uid, spec.identity.gid);
    (want != real).then_some(want)
}

/// Runs the spec in the container with the spec's mode.
pub fn run(ct: &ContainerDirs, spec: &ExecSpec, opts: &EngineOptions) -> Result<RunOutcome, EngineError> {
    setup_mode(ct, spec.mode, opts)?;
    let map = container_map(ct, spec)?;
    let program = locate_program(&map, spec)?;
    let host_cwd = host_workdir(&map, spec)?;
    match spec.mode {
        ExecMode::P1 | ExecMode::P2 => {
            let env = spec.env_list();
            let req = ptrace::TraceRequest {
                map: &map,
                host_cwd: &host_cwd,
                program: program.as_os_str().as_bytes(),
                argv: &spec.argv,
                env: &env,
                filter: spec.mode == ExecMode::P1,
                identity: emulated_identity(spec),
                fail_filter: opts.fail_filter,
                fds: opts.fds,
            };
            let out = ptrace::trace(&req)?;
            let mode = if out.stats.filtered { ExecMode::P1 } else { ExecMode::P2 };
            Ok(RunOutcome {
                exit_code: out.exit_code,
                mode,
                stats: Some(out.stats),
            })
        }
        ExecMode::R1 => Ok(RunOutcome {
            exit_code: ns::run(ct, spec, &map, &program, opts)?,
            mode: ExecMode::R1,
            stats: None,
        }),
        mode => Ok(RunOutcome {
            exit_code: loader::run(ct, spec, &map, &program, &host_cwd, mode, opts)?,
            mode,
            stats: None,
        }),
    }
}

/// What a mode change did to the container's files.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SetupReport {
    pub from: Option<ExecMode>,
    pub to: ExecMode,
    /// Files restored from the patch journal.
    pub restored: usize,
    /// Files patched for the new mode.
    pub patched: usize,
}

/// Prepares the container for `mode`. Changes made for the previous mode
/// are undone first, so any sequence of mode changes ending in a mode that
/// modifies nothing leaves the tree as it was.
pub fn setup_mode(ct: &ContainerDirs, mode: ExecMode, opts: &EngineOptions) -> Result<SetupReport, EngineError> {
    let from = ct.prepared_mode();
    let mut report = SetupReport {
        from,
        to: mode,
        ..SetupReport::default()
    };
    if from == Some(mode) && (!mode.is_loader() || ct.support_dir().is_dir()) {
        return Ok(report);
    }
    report.restored = loader::revert(ct)?;
    if mode.is_loader() {
        report.patched = loader::prepare(ct, mode, opts)?;
    }
    fs::write(ct.dir.join(MODE_FILE), format!("{mode}\n"))?;
    Ok(report)
}

/// Output of a run with captured standard streams.
#[derive(Debug, Clone)]
pub struct Captured {
    pub outcome: RunOutcome,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

fn pipe() -> io::Result<(std::os::fd::OwnedFd, std::os::fd::OwnedFd)> {
    use std::os::fd::FromRawFd;
    let mut p = [0; 2];
    if unsafe { libc::pipe2(p.as_mut_ptr(), libc::O_CLOEXEC) } < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(unsafe { (std::os::fd::OwnedFd::from_raw_fd(p[0]), std::os::fd::OwnedFd::from_raw_fd(p[1])) })
}

/// Runs with `input` on stdin and collects stdout and stderr.
pub fn run_captured(ct: &ContainerDirs, spec: &ExecSpec, opts: &EngineOptions, input: &[u8]) -> Result<Captured, EngineError> {
    use std::io::{Read, Write};
    use std::os::fd::AsRawFd;
    let (in_r, in_w) = pipe()?;
    let (out_r, out_w) = pipe()?;
    let (err_r, err_w) = pipe()?;
    let mut o = opts.clone();
    o.fds = StdFds {
        stdin: in_r.as_raw_fd(),
        stdout: out_w.as_raw_fd(),
        stderr: err_w.as_raw_fd(),
    };
    let input = input.to_vec();
    let feeder = std::thread::spawn(move || {
        let _ = fs::File::from(in_w).write_all(&input);
    });
    let reader = |fd: std::os::fd::OwnedFd| {
        std::thread::spawn(move || {
            let mut v = Vec::new();
            let _ = fs::File::from(fd).read_to_end(&mut v);
            v
        })
    };
    let out_t = reader(out_r);
    let err_t = reader(err_r);
    let result = run(ct, spec, &o);
    drop((in_r, out_w, err_w));
    let stdout = out_t.join().unwrap_or_default();
    let stderr = err_t.join().unwrap_or_default();
    let _ = feeder.join();
    Ok(Captured {
        outcome: result?,
        stdout,
        stderr,
    })
}

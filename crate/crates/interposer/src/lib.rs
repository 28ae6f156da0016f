//! Preloaded into every process of a loader-mode container. The exported
//! libc functions translate container paths to host paths before calling
//! the real implementation, and exec requests are rewritten so that the
//! new program again runs on the container's loader and libraries.
//!
//! The library is inert when the `UDOCKER_FC_*` variables are absent, and
//! every call made while a translation is in progress on the same thread
//! goes straight to libc.

use std::cell::Cell;
use std::ffi::{CStr, CString, OsStr};
use std::os::unix::ffi::{OsStrExt, OsStringExt};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use libc::c_int;
use udocker_pathmap::launch::{LaunchConfig, ENV_PREFIX, ENV_USER_LDPATH};
use udocker_pathmap::{PathMap, RealFs};

mod exports;


pub(crate) struct State {
    pub cfg: LaunchConfig,
    pub map: PathMap,
}

static STATE: OnceLock<Option<State>> = OnceLock::new();

thread_local! {
    static BUSY: Cell<bool> = const { Cell::new(false) };
}

/// Marks the current thread as inside the interposer until dropped.
pub(crate) struct Guard(bool);

impl Guard {
    pub fn enter() -> Self {
        Guard(BUSY.with(|b| b.replace(true)))
    }
}

impl Drop for Guard {
    fn drop(&mut self) {
        let prev = self.0;
        BUSY.with(|b| b.set(prev));
    }
}

fn load_state() -> Option<State> {
    let _g = Guard::enter();
    let cfg = LaunchConfig::from_env(|k| std::env::var(k).ok())?;
    let map = cfg.map();
    Some(State { cfg, map })
}

/// The container configuration, unless this thread is already inside the
/// interposer or the process is not in a container.
pub(crate) fn active() -> Option<&'static State> {
    if BUSY.with(|b| b.get()) {
        return None;
    }
    STATE.get_or_init(load_state).as_ref()
}

/// Reads the configuration and removes the control variables from the
/// program's view of its environment.
extern "C" fn init() {
    if active().is_none() {
        return;
    }
    let _g = Guard::enter();
    let user_ld = std::env::var_os(ENV_USER_LDPATH);
    let keys: Vec<_> = std::env::vars_os()
        .map(|(k, _)| k)
        .filter(|k| k.as_bytes().starts_with(ENV_PREFIX.as_bytes()) || k == "LD_PRELOAD")
        .collect();
    unsafe {
        for k in keys {
            if let Ok(c) = CString::new(k.as_bytes()) {
                libc::unsetenv(c.as_ptr());
            }
        }
        match user_ld.and_then(|v| CString::new(v.as_bytes()).ok()) {
            Some(v) => {
                libc::setenv(c"LD_LIBRARY_PATH".as_ptr(), v.as_ptr(), 1);
            }
            None => {
                libc::unsetenv(c"LD_LIBRARY_PATH".as_ptr());
            }
        }
    }
}

#[used]
#[link_section = ".init_array"]
static INIT: extern "C" fn() = init;

pub(crate) fn set_errno(e: c_int) {
    unsafe { *libc::__errno_location() = e };
}

/// Host working directory as reported by the kernel.
fn host_cwd() -> Option<PathBuf> {
    let mut buf = vec![0u8; libc::PATH_MAX as usize + 1];
    let n = unsafe { libc::syscall(libc::SYS_getcwd, buf.as_mut_ptr(), buf.len()) };
    if n <= 0 {
        return None;
    }
    let len = buf.iter().position(|&b| b == 0)?;
    buf.truncate(len);
    Some(PathBuf::from(OsStr::from_bytes(&buf)))
}

/// Target of a `/proc/self` link, read with a raw system call.
fn raw_readlink(path: &CStr) -> Option<PathBuf> {
    let mut buf = vec![0u8; libc::PATH_MAX as usize];
    let n = unsafe { libc::syscall(libc::SYS_readlinkat, libc::AT_FDCWD, path.as_ptr(), buf.as_mut_ptr(), buf.len()) };
    if n < 0 {
        return None;
    }
    buf.truncate(n as usize);
    Some(PathBuf::from(OsStr::from_bytes(&buf)))
}

impl State {
    pub fn cwd(&self) -> PathBuf {
        host_cwd()
            .and_then(|h| self.map.to_container(&h))
            .unwrap_or_else(|| PathBuf::from("/"))
    }

    /// Container directory a descriptor refers to.
    fn fd_dir(&self, fd: c_int) -> Option<PathBuf> {
        let link = CString::new(format!("/proc/self/fd/{fd}")).ok()?;
        self.map.to_container(&raw_readlink(&link)?)
    }

    /// Host path for `path`, interpreted relative to `dirfd` like the *at
    /// calls do. `Ok(None)` means the argument is passed on unchanged.
    pub fn translate(&self, dirfd: c_int, path: &[u8], follow: bool) -> Result<Option<CString>, c_int> {
        if path.is_empty() {
            return Ok(None);
        }
        let base = if path.starts_with(b"/") || dirfd == libc::AT_FDCWD {
            self.cwd()
        } else {
            match self.fd_dir(dirfd) {
                Some(d) => d,
                None => return Ok(None),
            }
        };
        let r = self.map.resolve(&RealFs, &base, path, follow).map_err(|e| e.errno())?;
        CString::new(r.host.into_os_string().into_vec()).map(Some).map_err(|_| libc::EINVAL)
    }

    /// Container view of a link target read from a kernel-resolved location.
    pub fn reverse(&self, host_target: &[u8]) -> Option<Vec<u8>> {
        if !host_target.starts_with(b"/") {
            return None;
        }
        self.map
            .to_container(Path::new(OsStr::from_bytes(host_target)))
            .map(|p| p.into_os_string().into_vec())
    }
}

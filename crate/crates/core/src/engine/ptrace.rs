//! P1 and P2: the container runs as a tree of ptrace tracees and every path
//! argument is rewritten on the way into the kernel.
//!
//! P1 installs a seccomp filter in the first process so that only the
//! system calls listed in [`TABLE`] stop; P2 stops at entry and exit of
//! every call. Exec requests are redirected to the container's loader,
//! `getcwd` and `/proc` link results are mapped back, and identity calls
//! can be answered with the container user.

use std::collections::HashMap;
use std::ffi::{CString, OsStr};
use std::io;
use std::os::fd::RawFd;
use std::os::unix::ffi::{OsStrExt, OsStringExt};
use std::path::{Path, PathBuf};

use libc::{c_int, c_long, c_void, pid_t, user_regs_struct};
use serde::{Deserialize, Serialize};
use udocker_pathmap::{plan_exec, PathMap, RealFs};

use super::{EngineError, StdFds};

/// Counters collected while tracing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStats {
    /// Every stop reported by waitpid.
    pub stops: u64,
    /// Syscall entry and exit stops.
    pub syscall_stops: u64,
    /// Stops raised by the seccomp filter.
    pub seccomp_stops: u64,
    /// Path arguments handed to the kernel in host form.
    pub rewritten: u64,
    pub execs: u64,
    /// True when the seccomp filter was active (P1).
    pub filtered: bool,
}

/// What the tracer needs to run one program.
pub struct TraceRequest<'a> {
    pub map: &'a PathMap,
    /// Host directory the first process starts in.
    pub host_cwd: &'a Path,
    /// Container path of the program, as passed to execve.
    pub program: &'a [u8],
    pub argv: &'a [String],
    pub env: &'a [String],
    /// Use the seccomp filter (P1). Falls back to stopping at every call
    /// when the filter cannot be installed.
    pub filter: bool,
    /// uid and gid reported to the program, when different from the real.
    pub identity: Option<(u32, u32)>,
    /// Pretend the filter could not be installed.
    pub fail_filter: bool,
    pub fds: StdFds,
}

#[derive(Debug)]
pub struct TraceOutcome {
    pub exit_code: i32,
    pub stats: TraceStats,
}

#[derive(Clone, Copy)]
enum Follow {
    Yes,
    No,
    /// open(2) flags in the given argument decide.
    Open(usize),
    /// Follows unless the flag is set in the given argument.
    Unless(usize, c_int),
    /// Follows only if the flag is set in the given argument.
    Only(usize, c_int),
}

#[derive(Clone, Copy)]
struct PathArg {
    arg: usize,
    dirfd: Option<usize>,
    follow: Follow,
}

const fn p(arg: usize, follow: Follow) -> PathArg {
    PathArg { arg, dirfd: None, follow }
}

const fn at(dirfd: usize, arg: usize, follow: Follow) -> PathArg {
    PathArg {
        arg,
        dirfd: Some(dirfd),
        follow,
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum IdCall {
    Uid,
    Gid,
    ResUid,
    ResGid,
}

#[derive(Clone, Copy)]
enum Kind {
    Paths,
    Exec,
    ExecAt,
    Getcwd,
    Readlink { buf: usize, size: usize },
    Deny,
    Chown,
    Mknod { mode: usize },
    Identity(IdCall),
    SetId,
}

struct Entry {
    nr: c_long,
    paths: &'static [PathArg],
    kind: Kind,
}

const fn e(nr: c_long, paths: &'static [PathArg], kind: Kind) -> Entry {
    Entry { nr, paths, kind }
}

use Follow::{No, Yes};
use Kind::Paths;

const NOFOLLOW: c_int = libc::AT_SYMLINK_NOFOLLOW;
const FOLLOW: c_int = libc::AT_SYMLINK_FOLLOW;

/// System calls the tracer acts on (x86_64 numbering).
const TABLE: &[Entry] = &[
    e(libc::SYS_open, &[p(0, Follow::Open(1))], Paths),
    e(libc::SYS_creat, &[p(0, Yes)], Paths),
    e(libc::SYS_openat, &[at(0, 1, Follow::Open(2))], Paths),
    e(libc::SYS_openat2, &[at(0, 1, Yes)], Paths),
    e(libc::SYS_stat, &[p(0, Yes)], Paths),
    e(libc::SYS_lstat, &[p(0, No)], Paths),
    e(libc::SYS_newfstatat, &[at(0, 1, Follow::Unless(3, NOFOLLOW))], Paths),
    e(libc::SYS_statx, &[at(0, 1, Follow::Unless(2, NOFOLLOW))], Paths),
    e(libc::SYS_access, &[p(0, Yes)], Paths),
    e(libc::SYS_faccessat, &[at(0, 1, Yes)], Paths),
    e(libc::SYS_faccessat2, &[at(0, 1, Follow::Unless(3, NOFOLLOW))], Paths),
    e(libc::SYS_chdir, &[p(0, Yes)], Paths),
    e(libc::SYS_execve, &[], Kind::Exec),
    e(libc::SYS_execveat, &[], Kind::ExecAt),
    e(libc::SYS_getcwd, &[], Kind::Getcwd),
    e(libc::SYS_readlink, &[p(0, No)], Kind::Readlink { buf: 1, size: 2 }),
    e(libc::SYS_readlinkat, &[at(0, 1, No)], Kind::Readlink { buf: 2, size: 3 }),
    e(libc::SYS_mkdir, &[p(0, No)], Paths),
    e(libc::SYS_mkdirat, &[at(0, 1, No)], Paths),
    e(libc::SYS_rmdir, &[p(0, No)], Paths),
    e(libc::SYS_unlink, &[p(0, No)], Paths),
    e(libc::SYS_unlinkat, &[at(0, 1, No)], Paths),
    e(libc::SYS_rename, &[p(0, No), p(1, No)], Paths),
    e(libc::SYS_renameat, &[at(0, 1, No), at(2, 3, No)], Paths),
    e(libc::SYS_renameat2, &[at(0, 1, No), at(2, 3, No)], Paths),
    e(libc::SYS_link, &[p(0, No), p(1, No)], Paths),
    e(libc::SYS_linkat, &[at(0, 1, Follow::Only(4, FOLLOW)), at(2, 3, No)], Paths),
    e(libc::SYS_symlink, &[p(1, No)], Paths),
    e(libc::SYS_symlinkat, &[at(1, 2, No)], Paths),
    e(libc::SYS_chmod, &[p(0, Yes)], Paths),
    e(libc::SYS_fchmodat, &[at(0, 1, Yes)], Paths),
    e(libc::SYS_chown, &[p(0, Yes)], Kind::Chown),
    e(libc::SYS_lchown, &[p(0, No)], Kind::Chown),
    e(libc::SYS_fchownat, &[at(0, 1, Follow::Unless(4, NOFOLLOW))], Kind::Chown),
    e(libc::SYS_fchown, &[], Kind::Chown),
    e(libc::SYS_utime, &[p(0, Yes)], Paths),
    e(libc::SYS_utimes, &[p(0, Yes)], Paths),
    e(libc::SYS_futimesat, &[at(0, 1, Yes)], Paths),
    e(libc::SYS_utimensat, &[at(0, 1, Follow::Unless(3, NOFOLLOW))], Paths),
    e(libc::SYS_truncate, &[p(0, Yes)], Paths),
    e(libc::SYS_mknod, &[p(0, No)], Kind::Mknod { mode: 1 }),
    e(libc::SYS_mknodat, &[at(0, 1, No)], Kind::Mknod { mode: 2 }),
    e(libc::SYS_statfs, &[p(0, Yes)], Paths),
    e(libc::SYS_getxattr, &[p(0, Yes)], Paths),
    e(libc::SYS_lgetxattr, &[p(0, No)], Paths),
    e(libc::SYS_setxattr, &[p(0, Yes)], Paths),
    e(libc::SYS_lsetxattr, &[p(0, No)], Paths),
    e(libc::SYS_listxattr, &[p(0, Yes)], Paths),
    e(libc::SYS_llistxattr, &[p(0, No)], Paths),
    e(libc::SYS_removexattr, &[p(0, Yes)], Paths),
    e(libc::SYS_lremovexattr, &[p(0, No)], Paths),
    e(libc::SYS_inotify_add_watch, &[p(1, Yes)], Paths),
    e(libc::SYS_name_to_handle_at, &[at(0, 1, Follow::Only(4, FOLLOW))], Paths),
    e(libc::SYS_acct, &[p(0, Yes)], Paths),
    e(libc::SYS_chroot, &[], Kind::Deny),
    e(libc::SYS_mount, &[], Kind::Deny),
    e(libc::SYS_umount2, &[], Kind::Deny),
    e(libc::SYS_pivot_root, &[], Kind::Deny),
    e(libc::SYS_swapon, &[], Kind::Deny),
    e(libc::SYS_swapoff, &[], Kind::Deny),
    e(libc::SYS_getuid, &[], Kind::Identity(IdCall::Uid)),
    e(libc::SYS_geteuid, &[], Kind::Identity(IdCall::Uid)),
    e(libc::SYS_getgid, &[], Kind::Identity(IdCall::Gid)),
    e(libc::SYS_getegid, &[], Kind::Identity(IdCall::Gid)),
    e(libc::SYS_getresuid, &[], Kind::Identity(IdCall::ResUid)),
    e(libc::SYS_getresgid, &[], Kind::Identity(IdCall::ResGid)),
    e(libc::SYS_setuid, &[], Kind::SetId),
    e(libc::SYS_setgid, &[], Kind::SetId),
    e(libc::SYS_setreuid, &[], Kind::SetId),
    e(libc::SYS_setregid, &[], Kind::SetId),
    e(libc::SYS_setresuid, &[], Kind::SetId),
    e(libc::SYS_setresgid, &[], Kind::SetId),
    e(libc::SYS_setgroups, &[], Kind::SetId),
    e(libc::SYS_setfsuid, &[], Kind::SetId),
    e(libc::SYS_setfsgid, &[], Kind::SetId),
];

fn needs_identity(kind: Kind) -> bool {
    matches!(kind, Kind::Identity(_) | Kind::SetId | Kind::Chown)
}

/// Numbers of the calls that must stop under the filter.
fn filtered_calls(identity: bool) -> Vec<u32> {
    TABLE
        .iter()
        .filter(|e| identity || !needs_identity(e.kind) || (matches!(e.kind, Kind::Chown) && !e.paths.is_empty()))
        .map(|e| e.nr as u32)
        .collect()
}

const AUDIT_ARCH_X86_64: u32 = 0xc000_003e;
const X32_BIT: u32 = 0x4000_0000;

fn stmt(code: u32, k: u32) -> libc::sock_filter {
    libc::sock_filter {
        code: code as u16,
        jt: 0,
        jf: 0,
        k,
    }
}

fn jump(code: u32, k: u32, jt: usize, jf: usize) -> libc::sock_filter {
    libc::sock_filter {
        code: code as u16,
        jt: jt as u8,
        jf: jf as u8,
        k,
    }
}

/// A classic BPF program returning SECCOMP_RET_TRACE for `calls` and
/// allowing everything else. Foreign ABIs get ENOSYS.
fn build_filter(calls: &[u32]) -> Vec<libc::sock_filter> {
    use libc::{BPF_ABS, BPF_JEQ, BPF_JGE, BPF_JMP, BPF_K, BPF_LD, BPF_RET, BPF_W};
    let n = calls.len();
    // 0 ld arch, 1 jeq arch, 2 ld nr, 3 jge x32, 4.. jeq calls,
    // then allow, trace, errno.
    let allow = 4 + n;
    let trace = allow + 1;
    let errno = trace + 1;
    let mut prog = vec![
        stmt(BPF_LD | BPF_W | BPF_ABS, 4),
        jump(BPF_JMP | BPF_JEQ | BPF_K, AUDIT_ARCH_X86_64, 0, errno - 2),
        stmt(BPF_LD | BPF_W | BPF_ABS, 0),
        jump(BPF_JMP | BPF_JGE | BPF_K, X32_BIT, errno - 4, 0),
    ];
    for (i, &nr) in calls.iter().enumerate() {
        let at = 4 + i;
        prog.push(jump(BPF_JMP | BPF_JEQ | BPF_K, nr, trace - at - 1, 0));
    }
    prog.push(stmt(BPF_RET | BPF_K, libc::SECCOMP_RET_ALLOW));
    prog.push(stmt(BPF_RET | BPF_K, libc::SECCOMP_RET_TRACE));
    prog.push(stmt(BPF_RET | BPF_K, libc::SECCOMP_RET_ERRNO | libc::ENOSYS as u32));
    prog
}

fn arg(regs: &user_regs_struct, i: usize) -> u64 {
    match i {
        0 => regs.rdi,
        1 => regs.rsi,
        2 => regs.rdx,
        3 => regs.r10,
        4 => regs.r8,
        _ => regs.r9,
    }
}

fn set_arg(regs: &mut user_regs_struct, i: usize, v: u64) {
    match i {
        0 => regs.rdi = v,
        1 => regs.rsi = v,
        2 => regs.rdx = v,
        3 => regs.r10 = v,
        4 => regs.r8 = v,
        _ => regs.r9 = v,
    }
}

fn errno() -> c_int {
    io::Error::last_os_error().raw_os_error().unwrap_or(libc::EIO)
}

fn getregs(tid: pid_t) -> io::Result<user_regs_struct> {
    let mut regs: user_regs_struct = unsafe { std::mem::zeroed() };
    let r = unsafe { libc::ptrace(libc::PTRACE_GETREGS, tid, 0, &mut regs as *mut _ as *mut c_void) };
    if r < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(regs)
}

fn setregs(tid: pid_t, regs: &user_regs_struct) -> io::Result<()> {
    let r = unsafe { libc::ptrace(libc::PTRACE_SETREGS, tid, 0, regs as *const _ as *mut c_void) };
    if r < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

fn event_msg(tid: pid_t) -> u64 {
    let mut msg: libc::c_ulong = 0;
    unsafe { libc::ptrace(libc::PTRACE_GETEVENTMSG, tid, 0, &mut msg as *mut _ as *mut c_void) };
    msg as u64
}

fn read_mem(tid: pid_t, addr: u64, buf: &mut [u8]) -> Result<usize, c_int> {
    let local = libc::iovec {
        iov_base: buf.as_mut_ptr() as *mut c_void,
        iov_len: buf.len(),
    };
    let remote = libc::iovec {
        iov_base: addr as *mut c_void,
        iov_len: buf.len(),
    };
    let n = unsafe { libc::process_vm_readv(tid, &local, 1, &remote, 1, 0) };
    if n < 0 {
        Err(libc::EFAULT)
    } else {
        Ok(n as usize)
    }
}

fn write_mem(tid: pid_t, addr: u64, data: &[u8]) -> Result<(), c_int> {
    let local = libc::iovec {
        iov_base: data.as_ptr() as *mut c_void,
        iov_len: data.len(),
    };
    let remote = libc::iovec {
        iov_base: addr as *mut c_void,
        iov_len: data.len(),
    };
    let n = unsafe { libc::process_vm_writev(tid, &local, 1, &remote, 1, 0) };
    if n < 0 || n as usize != data.len() {
        Err(libc::EFAULT)
    } else {
        Ok(())
    }
}

const PAGE: u64 = 4096;
const PATH_MAX: usize = 4096;

/// A NUL-terminated string from the tracee, read a page at a time.
fn read_cstr(tid: pid_t, addr: u64) -> Result<Vec<u8>, c_int> {
    let mut out = Vec::new();
    let mut cur = addr;
    loop {
        let chunk = (PAGE - cur % PAGE) as usize;
        let mut buf = vec![0u8; chunk];
        let n = read_mem(tid, cur, &mut buf)?;
        if let Some(z) = buf[..n].iter().position(|&b| b == 0) {
            out.extend_from_slice(&buf[..z]);
            return Ok(out);
        }
        out.extend_from_slice(&buf[..n]);
        if out.len() > PATH_MAX * 32 {
            return Err(libc::E2BIG);
        }
        cur += n as u64;
    }
}

fn read_u64(tid: pid_t, addr: u64) -> Result<u64, c_int> {
    let mut b = [0u8; 8];
    if read_mem(tid, addr, &mut b)? != 8 {
        return Err(libc::EFAULT);
    }
    Ok(u64::from_ne_bytes(b))
}

/// A NULL-terminated array of strings (argv).
fn read_strv(tid: pid_t, addr: u64) -> Result<Vec<Vec<u8>>, c_int> {
    let mut out = Vec::new();
    if addr == 0 {
        return Ok(out);
    }
    for i in 0..(1 << 17) {
        let ptr = read_u64(tid, addr + i * 8)?;
        if ptr == 0 {
            return Ok(out);
        }
        out.push(read_cstr(tid, ptr)?);
    }
    Err(libc::E2BIG)
}

/// Space below the tracee's stack red zone for rewritten arguments.
struct Scratch {
    tid: pid_t,
    top: u64,
}

impl Scratch {
    fn new(tid: pid_t, regs: &user_regs_struct) -> Self {
        Scratch {
            tid,
            top: regs.rsp.wrapping_sub(128) & !15,
        }
    }

    fn push(&mut self, data: &[u8]) -> Result<u64, c_int> {
        self.top = (self.top - data.len() as u64) & !15;
        write_mem(self.tid, self.top, data)?;
        Ok(self.top)
    }

    fn push_cstr(&mut self, s: &[u8]) -> Result<u64, c_int> {
        let mut v = Vec::with_capacity(s.len() + 1);
        v.extend_from_slice(s);
        v.push(0);
        self.push(&v)
    }
}

enum ExitAction {
    Return(i64),
    Getcwd { buf: u64, size: u64 },
    Readlink { buf: u64, size: u64, exe: Option<Vec<u8>> },
}

#[derive(Default)]
struct Task {
    in_syscall: bool,
    /// The initial SIGSTOP of a new tracee is still to come.
    fresh: bool,
    exit: Option<ExitAction>,
    exe: Option<Vec<u8>>,
    pending_exe: Option<Vec<u8>>,
}

fn proc_link(tid: pid_t, what: &str) -> Option<PathBuf> {
    std::fs::read_link(format!("/proc/{tid}/{what}")).ok()
}

struct Tracer<'a> {
    map: &'a PathMap,
    table: HashMap<c_long, &'static Entry>,
    identity: Option<(u32, u32)>,
    filtered: bool,
    tasks: HashMap<pid_t, Task>,
    argv0_ok: HashMap<PathBuf, bool>,
    stats: TraceStats,
}

impl<'a> Tracer<'a> {
    fn cwd(&self, tid: pid_t) -> PathBuf {
        proc_link(tid, "cwd")
            .and_then(|h| self.map.to_container(&h))
            .unwrap_or_else(|| PathBuf::from("/"))
    }

    fn fd_dir(&self, tid: pid_t, fd: i32) -> Option<PathBuf> {
        self.map.to_container(&proc_link(tid, &format!("fd/{fd}"))?)
    }

    /// Container directory a relative path argument starts from; `None`
    /// when the descriptor is not inside the container and the argument
    /// is left to the kernel.
    fn base(&self, tid: pid_t, regs: &user_regs_struct, pa: &PathArg, raw: &[u8]) -> Option<PathBuf> {
        if raw.starts_with(b"/") {
            return Some(PathBuf::from("/"));
        }
        match pa.dirfd.map(|d| arg(regs, d) as i32) {
            Some(fd) if fd != libc::AT_FDCWD => self.fd_dir(tid, fd),
            _ => Some(self.cwd(tid)),
        }
    }

    fn follows(regs: &user_regs_struct, f: Follow) -> bool {
        match f {
            Follow::Yes => true,
            Follow::No => false,
            Follow::Open(i) => {
                let flags = arg(regs, i) as c_int;
                flags & libc::O_NOFOLLOW == 0 && flags & (libc::O_CREAT | libc::O_EXCL) != (libc::O_CREAT | libc::O_EXCL)
            }
            Follow::Unless(i, bit) => arg(regs, i) as c_int & bit == 0,
            Follow::Only(i, bit) => arg(regs, i) as c_int & bit != 0,
        }
    }

    /// Rewrites one path argument; returns the host path, or `None` when it
    /// is passed on unchanged.
    fn rewrite(
        &mut self,
        tid: pid_t,
        regs: &mut user_regs_struct,
        pa: &PathArg,
        scratch: &mut Scratch,
    ) -> Result<Option<PathBuf>, c_int> {
        let addr = arg(regs, pa.arg);
        if addr == 0 {
            return Ok(None);
        }
        let raw = read_cstr(tid, addr)?;
        if raw.is_empty() {
            return Ok(None);
        }
        if raw.len() >= PATH_MAX {
            return Err(libc::ENAMETOOLONG);
        }
        let Some(base) = self.base(tid, regs, pa, &raw) else {
            return Ok(None);
        };
        let follow = Self::follows(regs, pa.follow);
        let r = self.map.resolve(&RealFs, &base, &raw, follow).map_err(|e| e.errno())?;
        let host = r.host.as_os_str().as_bytes();
        let ptr = scratch.push_cstr(host)?;
        set_arg(regs, pa.arg, ptr);
        self.stats.rewritten += 1;
        Ok(Some(r.host))
    }

    fn supports_argv0(&mut self, loader: &Path) -> bool {
        *self.argv0_ok.entry(loader.to_path_buf()).or_insert_with(|| {
            std::fs::read(loader)
                .map(|d| d.windows(7).any(|w| w == b"--argv0"))
                .unwrap_or(false)
        })
    }

    /// Turns an exec request into an execve of the host program, or of
    /// the container's loader with the program as its argument.
    fn exec(
        &mut self,
        tid: pid_t,
        regs: &mut user_regs_struct,
        path: Vec<u8>,
        cwd: &Path,
        argv_addr: u64,
        envp: u64,
    ) -> Result<(), c_int> {
        let argv = read_strv(tid, argv_addr)?;
        let plan = plan_exec(self.map, &RealFs, cwd, &path, argv).map_err(|e| e.errno())?;
        let (exe, new_argv) = match &plan.loader {
            Some(l) => {
                let mut a = vec![l.container.as_os_str().as_bytes().to_vec()];
                if self.supports_argv0(&l.host) {
                    a.push(b"--argv0".to_vec());
                    a.push(plan.argv.first().cloned().unwrap_or_default());
                }
                a.push(plan.container_path.as_os_str().as_bytes().to_vec());
                a.extend(plan.argv.iter().skip(1).cloned());
                (l.host.clone(), a)
            }
            None => (plan.host_path.clone(), plan.argv.clone()),
        };
        let mut scratch = Scratch::new(tid, regs);
        let mut ptrs = Vec::with_capacity(new_argv.len() + 1);
        for a in &new_argv {
            ptrs.push(scratch.push_cstr(a)?);
        }
        ptrs.push(0);
        let table: Vec<u8> = ptrs.iter().flat_map(|p| p.to_ne_bytes()).collect();
        let argv_ptr = scratch.push(&table)?;
        let path_ptr = scratch.push_cstr(exe.as_os_str().as_bytes())?;
        regs.orig_rax = libc::SYS_execve as u64;
        regs.rdi = path_ptr;
        regs.rsi = argv_ptr;
        regs.rdx = envp;
        self.stats.execs += 1;
        self.stats.rewritten += 1;
        if let Some(t) = self.tasks.get_mut(&tid) {
            t.pending_exe = Some(plan.container_path.as_os_str().as_bytes().to_vec());
        }
        Ok(())
    }

    /// The exe a `/proc/.../exe` link should show, for traced processes.
    fn exe_for(&self, tid: pid_t, host: &Path) -> Option<Vec<u8>> {
        let rest = host.strip_prefix("/proc").ok()?;
        let mut comps = rest.iter();
        let who = comps.next()?.as_bytes();
        if comps.next()? != "exe" || comps.next().is_some() {
            return None;
        }
        let pid = match who {
            b"self" | b"thread-self" => tid,
            n => std::str::from_utf8(n).ok()?.parse().ok()?,
        };
        self.tasks.get(&pid)?.exe.clone()
    }

    fn entry(&mut self, tid: pid_t, regs: &mut user_regs_struct) -> Result<Option<ExitAction>, c_int> {
        let nr = regs.orig_rax as c_long;
        let Some(entry) = self.table.get(&nr).copied() else {
            return Ok(None);
        };
        let fake = self.identity;
        match entry.kind {
            Kind::Deny => return Err(libc::EPERM),
            Kind::SetId if fake.is_some() => return Ok(Some(ExitAction::Return(0))),
            Kind::SetId => return Ok(None),
            Kind::Chown if fake.is_some() => return Ok(Some(ExitAction::Return(0))),
            Kind::Identity(call) => {
                let Some((uid, gid)) = fake else { return Ok(None) };
                let v = if matches!(call, IdCall::Uid | IdCall::ResUid) { uid } else { gid };
                if matches!(call, IdCall::ResUid | IdCall::ResGid) {
                    for i in 0..3 {
                        write_mem(tid, arg(regs, i), &v.to_ne_bytes())?;
                    }
                    return Ok(Some(ExitAction::Return(0)));
                }
                return Ok(Some(ExitAction::Return(v as i64)));
            }
            Kind::Mknod { mode } => {
                let fmt = arg(regs, mode) as u32 & libc::S_IFMT;
                if fmt == libc::S_IFCHR || fmt == libc::S_IFBLK {
                    return Err(libc::EPERM);
                }
            }
            Kind::Getcwd => {
                return Ok(Some(ExitAction::Getcwd {
                    buf: regs.rdi,
                    size: regs.rsi,
                }))
            }
            Kind::Exec => {
                let path = read_cstr(tid, regs.rdi)?;
                let cwd = self.cwd(tid);
                let (argv, envp) = (regs.rsi, regs.rdx);
                self.exec(tid, regs, path, &cwd, argv, envp)?;
                return Ok(None);
            }
            Kind::ExecAt => {
                let dirfd = regs.rdi as i32;
                let path = read_cstr(tid, regs.rsi)?;
                let flags = regs.r8 as c_int;
                let (path, base) = if path.is_empty() && flags & libc::AT_EMPTY_PATH != 0 {
                    let p = self.fd_dir(tid, dirfd).ok_or(libc::ENOENT)?;
                    (p.as_os_str().as_bytes().to_vec(), PathBuf::from("/"))
                } else if path.starts_with(b"/") || dirfd == libc::AT_FDCWD {
                    (path, self.cwd(tid))
                } else {
                    (path, self.fd_dir(tid, dirfd).ok_or(libc::ENOENT)?)
                };
                let (argv, envp) = (regs.rdx, regs.r10);
                self.exec(tid, regs, path, &base, argv, envp)?;
                return Ok(None);
            }
            _ => {}
        }
        let mut scratch = Scratch::new(tid, regs);
        let mut last = None;
        for pa in entry.paths {
            last = self.rewrite(tid, regs, pa, &mut scratch)?;
        }
        if let Kind::Readlink { buf, size } = entry.kind {
            if let Some(host) = last.filter(|h| h.starts_with("/proc")) {
                return Ok(Some(ExitAction::Readlink {
                    buf: arg(regs, buf),
                    size: arg(regs, size),
                    exe: self.exe_for(tid, &host),
                }));
            }
        }
        Ok(None)
    }

    fn exit(&mut self, tid: pid_t, action: ExitAction) -> io::Result<()> {
        let mut regs = getregs(tid)?;
        let ret = regs.rax as i64;
        match action {
            ExitAction::Return(v) => regs.rax = v as u64,
            ExitAction::Getcwd { buf, size } if ret >= 0 => {
                let cwd = self.cwd(tid);
                let mut bytes = cwd.as_os_str().as_bytes().to_vec();
                bytes.push(0);
                if bytes.len() as u64 > size {
                    regs.rax = (-libc::ERANGE) as i64 as u64;
                } else if write_mem(tid, buf, &bytes).is_ok() {
                    regs.rax = bytes.len() as u64;
                }
            }
            ExitAction::Getcwd { .. } => return Ok(()),
            ExitAction::Readlink { buf, size, exe } => {
                let shown = match exe {
                    Some(e) => Some(e),
                    None if ret > 0 => {
                        let mut got = vec![0u8; ret as usize];
                        let n = read_mem(tid, buf, &mut got).unwrap_or(0);
                        got.truncate(n);
                        self.map
                            .to_container(Path::new(OsStr::from_bytes(&got)))
                            .map(|p| p.into_os_string().into_vec())
                    }
                    None => None,
                };
                let Some(mut shown) = shown else { return Ok(()) };
                shown.truncate(size as usize);
                if write_mem(tid, buf, &shown).is_ok() {
                    regs.rax = shown.len() as u64;
                }
            }
        }
        setregs(tid, &regs)
    }

    /// Handles a syscall entry (or seccomp) stop. Returns whether an exit
    /// stop is needed.
    fn on_entry(&mut self, tid: pid_t) -> bool {
        let Ok(mut regs) = getregs(tid) else { return false };
        let before = regs;
        let action = match self.entry(tid, &mut regs) {
            Ok(a) => a,
            Err(e) => Some(ExitAction::Return(-(e as i64))),
        };
        if matches!(action, Some(ExitAction::Return(_))) {
            regs = before;
            // Skip the call; the result is set at the exit stop.
            regs.orig_rax = u64::MAX;
        }
        if !regs_eq(&regs, &before) {
            let _ = setregs(tid, &regs);
        }
        let need = action.is_some();
        if let Some(t) = self.tasks.get_mut(&tid) {
            t.exit = action;
        }
        need
    }

    fn on_exit(&mut self, tid: pid_t) {
        let action = self.tasks.get_mut(&tid).and_then(|t| t.exit.take());
        if let Some(a) = action {
            let _ = self.exit(tid, a);
        }
    }
}

fn regs_eq(a: &user_regs_struct, b: &user_regs_struct) -> bool {
    a.orig_rax == b.orig_rax
        && a.rax == b.rax
        && a.rdi == b.rdi
        && a.rsi == b.rsi
        && a.rdx == b.rdx
        && a.r10 == b.r10
        && a.r8 == b.r8
        && a.r9 == b.r9
}

fn cstring(b: &[u8]) -> Result<CString, EngineError> {
    CString::new(b).map_err(|_| EngineError::Fault("argument contains a NUL byte".into()))
}

fn resume(tid: pid_t, syscall: bool, sig: c_int) {
    let req = if syscall { libc::PTRACE_SYSCALL } else { libc::PTRACE_CONT };
    unsafe { libc::ptrace(req, tid, 0, sig as c_long) };
}

/// Runs the program under the tracer and waits for every process of the
/// container to finish.
pub fn trace(req: &TraceRequest) -> Result<TraceOutcome, EngineError> {
    if !cfg!(target_arch = "x86_64") {
        return Err(EngineError::Unavailable("ptrace modes support x86_64 only".into()));
    }
    let program = cstring(req.program)?;
    let cwd = cstring(req.host_cwd.as_os_str().as_bytes())?;
    let argv: Vec<CString> = req.argv.iter().map(|a| cstring(a.as_bytes())).collect::<Result<_, _>>()?;
    let env: Vec<CString> = req.env.iter().map(|a| cstring(a.as_bytes())).collect::<Result<_, _>>()?;
    let mut argv_p: Vec<*const libc::c_char> = argv.iter().map(|c| c.as_ptr()).collect();
    argv_p.push(std::ptr::null());
    let mut env_p: Vec<*const libc::c_char> = env.iter().map(|c| c.as_ptr()).collect();
    env_p.push(std::ptr::null());
    let filter = build_filter(&filtered_calls(req.identity.is_some()));
    let fprog = libc::sock_fprog {
        len: filter.len() as u16,
        filter: filter.as_ptr() as *mut _,
    };
    let mut pipe = [0 as RawFd; 2];
    if unsafe { libc::pipe2(pipe.as_mut_ptr(), libc::O_CLOEXEC) } < 0 {
        return Err(EngineError::Io(io::Error::last_os_error()));
    }
    let fds = req.fds;
    let want_filter = req.filter;
    let fail_filter = req.fail_filter;

    let pid = unsafe { libc::fork() };
    if pid < 0 {
        return Err(EngineError::Io(io::Error::last_os_error()));
    }
    if pid == 0 {
        // Child: only async-signal-safe calls from here on.
        unsafe {
            libc::close(pipe[0]);
            for (from, to) in [(fds.stdin, 0), (fds.stdout, 1), (fds.stderr, 2)] {
                if from != to {
                    libc::dup2(from, to);
                }
            }
            if libc::chdir(cwd.as_ptr()) != 0 {
                libc::_exit(126);
            }
            libc::ptrace(libc::PTRACE_TRACEME, 0, 0, 0);
            if want_filter {
                let ok = !fail_filter
                    && libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) == 0
                    && libc::prctl(libc::PR_SET_SECCOMP, libc::SECCOMP_MODE_FILTER, &fprog as *const _) == 0;
                if !ok {
                    libc::write(pipe[1], b"F".as_ptr() as *const c_void, 1);
                }
            }
            libc::close(pipe[1]);
            libc::kill(libc::getpid(), libc::SIGSTOP);
            libc::execve(program.as_ptr(), argv_p.as_ptr(), env_p.as_ptr());
            libc::_exit(127);
        }
    }
    unsafe { libc::close(pipe[1]) };
    let mut status = 0;
    let w = unsafe { libc::waitpid(pid, &mut status, libc::__WALL) };
    let mut flag = [0u8; 1];
    let failed = unsafe { libc::read(pipe[0], flag.as_mut_ptr() as *mut c_void, 1) } == 1;
    unsafe { libc::close(pipe[0]) };
    if w != pid || !libc::WIFSTOPPED(status) {
        let code = if libc::WIFEXITED(status) { libc::WEXITSTATUS(status) } else { 1 };
        return Err(EngineError::Fault(format!("tracee did not stop before exec (status {code})")));
    }
    let filtered = want_filter && !failed;
    if want_filter && failed {
        log::warn!("seccomp filter unavailable, stopping at every system call (P2)");
    }
    let mut opts = libc::PTRACE_O_TRACESYSGOOD
        | libc::PTRACE_O_TRACEEXEC
        | libc::PTRACE_O_TRACEFORK
        | libc::PTRACE_O_TRACEVFORK
        | libc::PTRACE_O_TRACECLONE
        | libc::PTRACE_O_EXITKILL;
    if filtered {
        opts |= libc::PTRACE_O_TRACESECCOMP;
    }
    if unsafe { libc::ptrace(libc::PTRACE_SETOPTIONS, pid, 0, opts as c_long) } < 0 {
        let e = io::Error::last_os_error();
        unsafe { libc::kill(pid, libc::SIGKILL) };
        return Err(EngineError::Fault(format!("PTRACE_SETOPTIONS: {e}")));
    }

    let calls = filtered_calls(req.identity.is_some());
    let table = TABLE
        .iter()
        .filter(|e| calls.contains(&(e.nr as u32)))
        .map(|e| (e.nr, e))
        .collect();
    let mut tr = Tracer {
        map: req.map,
        table,
        identity: req.identity,
        filtered,
        tasks: HashMap::new(),
        argv0_ok: HashMap::new(),
        stats: TraceStats {
            filtered,
            ..TraceStats::default()
        },
    };
    tr.tasks.insert(
        pid,
        Task {
            exe: Some(req.program.to_vec()),
            ..Task::default()
        },
    );
    resume(pid, !filtered, 0);
    let code = tr.run(pid)?;
    Ok(TraceOutcome {
        exit_code: code,
        stats: tr.stats,
    })
}

fn group_stop(tid: pid_t, sig: c_int) -> bool {
    if !matches!(sig, libc::SIGSTOP | libc::SIGTSTP | libc::SIGTTIN | libc::SIGTTOU) {
        return false;
    }
    let mut info: libc::siginfo_t = unsafe { std::mem::zeroed() };
    unsafe { libc::ptrace(libc::PTRACE_GETSIGINFO, tid, 0, &mut info as *mut _ as *mut c_void) < 0 }
}

impl Tracer<'_> {
    fn run(&mut self, root: pid_t) -> Result<i32, EngineError> {
        let mut code = 0;
        loop {
            let mut status = 0;
            let tid = unsafe { libc::waitpid(-1, &mut status, libc::__WALL | libc::__WNOTHREAD) };
            if tid < 0 {
                match errno() {
                    libc::EINTR => continue,
                    libc::ECHILD => break,
                    e => return Err(EngineError::Io(io::Error::from_raw_os_error(e))),
                }
            }
            if libc::WIFEXITED(status) || libc::WIFSIGNALED(status) {
                self.tasks.remove(&tid);
                if tid == root {
                    code = if libc::WIFEXITED(status) {
                        libc::WEXITSTATUS(status)
                    } else {
                        128 + libc::WTERMSIG(status)
                    };
                }
                continue;
            }
            if !libc::WIFSTOPPED(status) {
                continue;
            }
            self.stats.stops += 1;
            let sig = libc::WSTOPSIG(status);
            let event = (status >> 16) & 0xff;
            let filtered = self.filtered;
            let task = self.tasks.entry(tid).or_insert_with(|| Task {
                fresh: true,
                ..Task::default()
            });

            if sig == (libc::SIGTRAP | 0x80) {
                self.stats.syscall_stops += 1;
                if filtered {
                    self.on_exit(tid);
                    resume(tid, false, 0);
                } else if !task.in_syscall {
                    task.in_syscall = true;
                    self.on_entry(tid);
                    resume(tid, true, 0);
                } else {
                    task.in_syscall = false;
                    self.on_exit(tid);
                    resume(tid, true, 0);
                }
                continue;
            }
            if sig == libc::SIGTRAP && event != 0 {
                match event {
                    libc::PTRACE_EVENT_SECCOMP => {
                        self.stats.seccomp_stops += 1;
                        let need_exit = self.on_entry(tid);
                        resume(tid, need_exit, 0);
                        continue;
                    }
                    libc::PTRACE_EVENT_FORK | libc::PTRACE_EVENT_VFORK | libc::PTRACE_EVENT_CLONE => {
                        let child = event_msg(tid) as pid_t;
                        let exe = task.exe.clone();
                        let t = self.tasks.entry(child).or_insert_with(|| Task {
                            fresh: true,
                            ..Task::default()
                        });
                        t.exe = exe;
                    }
                    libc::PTRACE_EVENT_EXEC => {
                        let former = event_msg(tid) as pid_t;
                        if former != tid {
                            if let Some(old) = self.tasks.remove(&former) {
                                let in_syscall = self.tasks.get(&tid).map(|t| t.in_syscall).unwrap_or(false);
                                self.tasks.insert(tid, Task { in_syscall, ..old });
                            }
                        }
                        if let Some(t) = self.tasks.get_mut(&tid) {
                            if let Some(e) = t.pending_exe.take() {
                                t.exe = Some(e);
                            }
                        }
                    }
                    _ => {}
                }
                let needs_exit = self.tasks.get(&tid).map(|t| t.exit.is_some()).unwrap_or(false);
                resume(tid, !filtered || needs_exit, 0);
                continue;
            }
            let needs_exit = task.exit.is_some();
            let sys = !filtered || needs_exit;
            if sig == libc::SIGSTOP && task.fresh {
                task.fresh = false;
                resume(tid, sys, 0);
            } else if group_stop(tid, sig) {
                resume(tid, sys, 0);
            } else {
                task.fresh = false;
                resume(tid, sys, sig);
            }
        }
        Ok(code)
    }
}

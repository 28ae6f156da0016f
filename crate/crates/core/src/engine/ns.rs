//! R1: the container runs in new user, mount and PID namespaces with its
//! tree as the root filesystem, or is handed to an OCI runtime.

use std::ffi::CString;
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};
use std::process::Command;

use libc::c_int;
use udocker_elf::tree::resolve_in_root;
use udocker_pathmap::PathMap;

use super::{ContainerDirs, EngineError, EngineOptions};
use crate::metadata::{to_oci, ExecSpec};

/// Environment variable naming an OCI runtime to delegate R1 to.
pub const ENV_OCI_RUNTIME: &str = "UDOCKER_OCI_RUNTIME";

/// OCI runtimes looked up on PATH when delegation is requested without a
/// specific program.
pub const OCI_RUNTIMES: [&str; 3] = ["runc", "crun", "youki"];

fn cstr(p: &Path) -> Result<CString, EngineError> {
    CString::new(p.as_os_str().as_bytes()).map_err(|_| EngineError::Fault(format!("{}: NUL in path", p.display())))
}

struct Mount {
    source: CString,
    target: CString,
    proc_fs: bool,
}

/// Mount points created for binds, removed again after the run.
#[derive(Default)]
struct Created(Vec<PathBuf>);

impl Created {
    fn dir(&mut self, p: &Path) -> io::Result<()> {
        let mut missing = Vec::new();
        let mut cur = p.to_path_buf();
        while fs::symlink_metadata(&cur).is_err() {
            missing.push(cur.clone());
            if !cur.pop() {
                break;
            }
        }
        fs::create_dir_all(p)?;
        self.0.extend(missing.into_iter().rev());
        Ok(())
    }

    fn file(&mut self, p: &Path) -> io::Result<()> {
        if let Some(parent) = p.parent() {
            self.dir(parent)?;
        }
        fs::File::create(p)?;
        self.0.push(p.to_path_buf());
        Ok(())
    }
}

impl Drop for Created {
    fn drop(&mut self) {
        for p in self.0.iter().rev() {
            let _ = fs::remove_dir(p).or_else(|_| fs::remove_file(p));
        }
    }
}

/// Host location inside the tree where a bind for `container` is mounted,
/// created when missing. Symlinks are followed within the tree only.
fn mount_point(rootfs: &Path, container: &Path, is_dir: bool, created: &mut Created) -> Option<PathBuf> {
    let c = container.to_string_lossy();
    if let Some(real) = resolve_in_root(rootfs, &c) {
        return Some(rootfs.join(real.trim_start_matches('/')));
    }
    let parent = container.parent()?.to_string_lossy().into_owned();
    let name = container.file_name()?;
    let base = match resolve_in_root(rootfs, &parent) {
        Some(p) => rootfs.join(p.trim_start_matches('/')),
        None => {
            // Nothing of the parent exists yet; create it plainly, which
            // cannot leave the tree since no component is a symlink.
            let p = rootfs.join(parent.trim_start_matches('/'));
            if fs::symlink_metadata(&p).is_ok() {
                return None;
            }
            p
        }
    };
    let target = base.join(name);
    let ok = if is_dir { created.dir(&target) } else { created.file(&target) };
    ok.ok().map(|_| target)
}

/// Writes `stage: errno N` to the error pipe and exits. Allocation free.
unsafe fn fail(fd: c_int, stage: &[u8]) -> ! {
    let e = *libc::__errno_location();
    let mut buf = [0u8; 128];
    let mut n = 0;
    for &b in stage.iter().chain(b": errno ".iter()) {
        if n < 100 {
            buf[n] = b;
            n += 1;
        }
    }
    let mut digits = [0u8; 12];
    let mut d = 0;
    let mut v = e.max(0);
    loop {
        digits[d] = b'0' + (v % 10) as u8;
        d += 1;
        v /= 10;
        if v == 0 {
            break;
        }
    }
    while d > 0 {
        d -= 1;
        buf[n] = digits[d];
        n += 1;
    }
    libc::write(fd, buf.as_ptr() as *const _, n);
    libc::_exit(127);
}

unsafe fn write_file(path: &[u8], data: &[u8]) -> bool {
    let fd = libc::open(path.as_ptr() as *const _, libc::O_WRONLY | libc::O_CLOEXEC);
    if fd < 0 {
        return false;
    }
    let ok = libc::write(fd, data.as_ptr() as *const _, data.len()) == data.len() as isize;
    libc::close(fd);
    ok
}

/// Runs the spec, delegating to an OCI runtime when one is configured.
pub fn run(ct: &ContainerDirs, spec: &ExecSpec, map: &PathMap, program: &Path, opts: &EngineOptions) -> Result<i32, EngineError> {
    let runtime = opts
        .oci_runtime
        .clone()
        .or_else(|| std::env::var_os(ENV_OCI_RUNTIME).map(PathBuf::from));
    match runtime {
        Some(rt) => delegate(ct, spec, map, &rt),
        None => native(spec, map, program, opts),
    }
}

/// Finds an OCI runtime on PATH.
pub fn find_oci_runtime() -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    OCI_RUNTIMES
        .iter()
        .flat_map(|n| std::env::split_paths(&path).map(move |d| d.join(n)))
        .find(|p| p.is_file())
}

/// Writes an OCI bundle for the container and runs it with `runtime`.
fn delegate(ct: &ContainerDirs, spec: &ExecSpec, map: &PathMap, runtime: &Path) -> Result<i32, EngineError> {
    let runtime = if runtime.components().count() == 1 {
        let name = runtime.to_string_lossy();
        std::env::var_os("PATH")
            .and_then(|p| std::env::split_paths(&p).map(|d| d.join(&*name)).find(|p| p.is_file()))
            .ok_or_else(|| EngineError::Unavailable(format!("OCI runtime {name} not found")))?
    } else if runtime.is_file() {
        runtime.to_path_buf()
    } else {
        return Err(EngineError::Unavailable(format!("OCI runtime {} not found", runtime.display())));
    };
    let bundle = ct.dir.join("bundle");
    fs::create_dir_all(&bundle)?;
    let (uid, gid) = unsafe { (libc::geteuid(), libc::getegid()) };
    let doc = to_oci(spec, map.rootfs(), uid, gid);
    let json = serde_json::to_vec_pretty(&doc).map_err(|e| EngineError::Fault(e.to_string()))?;
    fs::write(bundle.join("config.json"), json)?;
    let name = format!("udocker-{}", ct.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    let status = Command::new(&runtime)
        .arg("--root")
        .arg(ct.dir.join("runtime-state"))
        .arg("run")
        .arg("--bundle")
        .arg(&bundle)
        .arg(&name)
        .status()
        .map_err(|e| EngineError::Unavailable(format!("{}: {e}", runtime.display())))?;
    use std::os::unix::process::ExitStatusExt;
    Ok(status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0)))
}

fn native(spec: &ExecSpec, map: &PathMap, program: &Path, opts: &EngineOptions) -> Result<i32, EngineError> {
    let rootfs = map.rootfs().to_path_buf();
    let mut created = Created::default();
    let mut mounts = Vec::new();
    let mut binds: Vec<_> = map.binds().to_vec();
    binds.sort_by_key(|b| b.container.components().count());
    for b in &binds {
        let is_dir = b.host.is_dir();
        let Some(target) = mount_point(&rootfs, &b.container, is_dir, &mut created) else {
            log::warn!("cannot create mount point for {}, skipped", b.container.display());
            continue;
        };
        mounts.push(Mount {
            source: cstr(&b.host)?,
            target: cstr(&target)?,
            proc_fs: b.container == Path::new("/proc") && b.host == Path::new("/proc"),
        });
    }
    let root_c = cstr(&rootfs)?;
    let cwd_c = cstr(&spec.cwd)?;
    let prog_c = cstr(program)?;
    let argv: Vec<CString> = spec
        .argv
        .iter()
        .map(|a| CString::new(a.as_bytes()).map_err(|_| EngineError::Fault("NUL in argument".into())))
        .collect::<Result<_, _>>()?;
    let env: Vec<CString> = spec
        .env_list()
        .into_iter()
        .map(|a| CString::new(a).map_err(|_| EngineError::Fault("NUL in environment".into())))
        .collect::<Result<_, _>>()?;
    let mut argv_p: Vec<*const libc::c_char> = argv.iter().map(|c| c.as_ptr()).collect();
    argv_p.push(std::ptr::null());
    let mut env_p: Vec<*const libc::c_char> = env.iter().map(|c| c.as_ptr()).collect();
    env_p.push(std::ptr::null());
    let (uid, gid) = unsafe { (libc::geteuid(), libc::getegid()) };
    let uid_map = format!("{} {} 1\n", spec.identity.uid, uid);
    let gid_map = format!("{} {} 1\n", spec.identity.gid, gid);
    let fds = opts.fds;

    let mut pipe = [0; 2];
    if unsafe { libc::pipe2(pipe.as_mut_ptr(), libc::O_CLOEXEC) } < 0 {
        return Err(io::Error::last_os_error().into());
    }
    let pid = unsafe { libc::fork() };
    if pid < 0 {
        return Err(io::Error::last_os_error().into());
    }
    if pid == 0 {
        unsafe {
            let w = pipe[1];
            libc::close(pipe[0]);
            for (from, to) in [(fds.stdin, 0), (fds.stdout, 1), (fds.stderr, 2)] {
                if from != to {
                    libc::dup2(from, to);
                }
            }
            if libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNS | libc::CLONE_NEWPID) != 0 {
                fail(w, b"unshare");
            }
            if !write_file(b"/proc/self/setgroups\0", b"deny") {
                fail(w, b"setgroups");
            }
            if !write_file(b"/proc/self/uid_map\0", uid_map.as_bytes()) {
                fail(w, b"uid_map");
            }
            if !write_file(b"/proc/self/gid_map\0", gid_map.as_bytes()) {
                fail(w, b"gid_map");
            }
            let child = libc::fork();
            if child < 0 {
                fail(w, b"fork");
            }
            if child == 0 {
                enter(w, &root_c, &mounts, &cwd_c, &prog_c, &argv_p, &env_p);
            }
            libc::close(w);
            let mut status = 0;
            while libc::waitpid(child, &mut status, 0) < 0 {
                if *libc::__errno_location() != libc::EINTR {
                    libc::_exit(127);
                }
            }
            if libc::WIFEXITED(status) {
                libc::_exit(libc::WEXITSTATUS(status));
            }
            libc::_exit(128 + libc::WTERMSIG(status));
        }
    }
    unsafe { libc::close(pipe[1]) };
    let mut status = 0;
    while unsafe { libc::waitpid(pid, &mut status, 0) } < 0 {
        if io::Error::last_os_error().raw_os_error() != Some(libc::EINTR) {
            return Err(io::Error::last_os_error().into());
        }
    }
    let mut msg = Vec::new();
    let mut buf = [0u8; 256];
    loop {
        let n = unsafe { libc::read(pipe[0], buf.as_mut_ptr() as *mut _, buf.len()) };
        if n <= 0 {
            break;
        }
        msg.extend_from_slice(&buf[..n as usize]);
    }
    unsafe { libc::close(pipe[0]) };
    drop(created);
    if !msg.is_empty() {
        let msg = String::from_utf8_lossy(&msg).into_owned();
        let early = ["unshare", "setgroups", "uid_map", "gid_map"].iter().any(|s| msg.starts_with(s));
        return Err(if early {
            EngineError::Unavailable(format!("user namespaces: {msg}"))
        } else {
            EngineError::Fault(format!("namespace setup: {msg}"))
        });
    }
    Ok(if libc::WIFEXITED(status) {
        libc::WEXITSTATUS(status)
    } else {
        128 + libc::WTERMSIG(status)
    })
}

/// In the new namespaces, as PID 1: builds the mount tree, switches root
/// and executes the program.
unsafe fn enter(
    w: c_int,
    root: &CString,
    mounts: &[Mount],
    cwd: &CString,
    prog: &CString,
    argv: &[*const libc::c_char],
    env: &[*const libc::c_char],
) -> ! {
    let null = std::ptr::null::<libc::c_char>();
    if libc::mount(null, c"/".as_ptr(), null, libc::MS_REC | libc::MS_PRIVATE, std::ptr::null()) != 0 {
        fail(w, b"make-private");
    }
    if libc::mount(root.as_ptr(), root.as_ptr(), null, libc::MS_BIND | libc::MS_REC, std::ptr::null()) != 0 {
        fail(w, b"bind-root");
    }
    for m in mounts {
        if m.proc_fs
            && libc::mount(
                c"proc".as_ptr(),
                m.target.as_ptr(),
                c"proc".as_ptr(),
                libc::MS_NOSUID | libc::MS_NODEV | libc::MS_NOEXEC,
                std::ptr::null(),
            ) == 0
        {
            continue;
        }
        if libc::mount(m.source.as_ptr(), m.target.as_ptr(), null, libc::MS_BIND | libc::MS_REC, std::ptr::null()) != 0 {
            fail(w, b"bind");
        }
    }
    if libc::chdir(root.as_ptr()) != 0 {
        fail(w, b"chdir-root");
    }
    if libc::syscall(libc::SYS_pivot_root, c".".as_ptr(), c".".as_ptr()) != 0 {
        fail(w, b"pivot_root");
    }
    if libc::umount2(c".".as_ptr(), libc::MNT_DETACH) != 0 {
        fail(w, b"umount-old-root");
    }
    if libc::chdir(cwd.as_ptr()) != 0 {
        fail(w, b"chdir");
    }
    libc::execve(prog.as_ptr(), argv.as_ptr(), env.as_ptr());
    fail(w, b"execve");
}

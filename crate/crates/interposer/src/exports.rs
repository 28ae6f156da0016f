//! The interposed libc entry points.

#![allow(clippy::missing_safety_doc)]

use std::ffi::{CStr, CString};
use std::os::unix::ffi::{OsStrExt, OsStringExt};
use std::sync::atomic::{AtomicUsize, Ordering};

use libc::{c_char, c_int, c_long, c_uint, c_void, dev_t, gid_t, mode_t, off64_t, off_t, pid_t, size_t, ssize_t, uid_t};
use libc::{AT_FDCWD, FILE};
use udocker_pathmap::launch::{plan_launch, LaunchError};
use udocker_pathmap::{search_path, HostFs, RealFs};

use crate::{active, set_errno, Guard, State};

extern "C" {
    static environ: *const *const c_char;
}

fn missing(name: &str) -> ! {
    let msg = format!("udocker interposer: libc has no {name}\n");
    unsafe {
        libc::write(2, msg.as_ptr().cast(), msg.len());
        libc::abort()
    }
}

/// The next definition of a libc function after this library.
macro_rules! real {
    ($name:ident : fn($($t:ty),*) -> $r:ty) => {{
        static P: AtomicUsize = AtomicUsize::new(0);
        let mut p = P.load(Ordering::Relaxed);
        if p == 0 {
            p = libc::dlsym(libc::RTLD_NEXT, concat!(stringify!($name), "\0").as_ptr().cast()) as usize;
            if p == 0 {
                missing(stringify!($name));
            }
            P.store(p, Ordering::Relaxed);
        }
        std::mem::transmute::<usize, unsafe extern "C" fn($($t),*) -> $r>(p)
    }};
}

unsafe fn xlate(st: Option<&State>, dirfd: c_int, p: *const c_char, follow: bool) -> Result<Option<CString>, c_int> {
    let Some(st) = st else { return Ok(None) };
    if p.is_null() {
        return Ok(None);
    }
    let _g = Guard::enter();
    st.translate(dirfd, CStr::from_ptr(p).to_bytes(), follow)
}

fn open_follow(flags: c_int) -> bool {
    flags & libc::O_NOFOLLOW == 0 && flags & (libc::O_CREAT | libc::O_EXCL) != (libc::O_CREAT | libc::O_EXCL)
}

fn at_follow(flags: c_int) -> bool {
    flags & libc::AT_SYMLINK_NOFOLLOW == 0
}

/// Defines exported functions whose listed path arguments are translated
/// before the real function is called with all arguments.
macro_rules! wrap {
    ($(fn $name:ident($($a:ident: $t:ty),*) -> $r:ty, fail $fail:expr, [$(($d:expr, $p:ident, $f:expr)),*];)*) => {$(
        #[no_mangle]
        pub unsafe extern "C" fn $name($($a: $t),*) -> $r {
            let st = active();
            $(
                let keep = match xlate(st, $d, $p, $f) {
                    Ok(v) => v,
                    Err(e) => {
                        set_errno(e);
                        return $fail;
                    }
                };
                let $p: *const c_char = match &keep {
                    Some(c) => c.as_ptr(),
                    None => $p,
                };
            )*
            real!($name: fn($($t),*) -> $r)($($a),*)
        }
    )*};
}

type Stat = libc::stat;
type Stat64 = libc::stat64;
const NULLF: *mut FILE = std::ptr::null_mut();

wrap! {
    fn open(path: *const c_char, flags: c_int, mode: mode_t) -> c_int, fail -1, [(AT_FDCWD, path, open_follow(flags))];
    fn open64(path: *const c_char, flags: c_int, mode: mode_t) -> c_int, fail -1, [(AT_FDCWD, path, open_follow(flags))];
    fn __open_2(path: *const c_char, flags: c_int) -> c_int, fail -1, [(AT_FDCWD, path, open_follow(flags))];
    fn __open64_2(path: *const c_char, flags: c_int) -> c_int, fail -1, [(AT_FDCWD, path, open_follow(flags))];
    fn openat(dirfd: c_int, path: *const c_char, flags: c_int, mode: mode_t) -> c_int, fail -1, [(dirfd, path, open_follow(flags))];
    fn openat64(dirfd: c_int, path: *const c_char, flags: c_int, mode: mode_t) -> c_int, fail -1, [(dirfd, path, open_follow(flags))];
    fn __openat_2(dirfd: c_int, path: *const c_char, flags: c_int) -> c_int, fail -1, [(dirfd, path, open_follow(flags))];
    fn __openat64_2(dirfd: c_int, path: *const c_char, flags: c_int) -> c_int, fail -1, [(dirfd, path, open_follow(flags))];
    fn creat(path: *const c_char, mode: mode_t) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn creat64(path: *const c_char, mode: mode_t) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn fopen(path: *const c_char, mode: *const c_char) -> *mut FILE, fail NULLF, [(AT_FDCWD, path, true)];
    fn fopen64(path: *const c_char, mode: *const c_char) -> *mut FILE, fail NULLF, [(AT_FDCWD, path, true)];
    fn freopen(path: *const c_char, mode: *const c_char, stream: *mut FILE) -> *mut FILE, fail NULLF, [(AT_FDCWD, path, true)];
    fn freopen64(path: *const c_char, mode: *const c_char, stream: *mut FILE) -> *mut FILE, fail NULLF, [(AT_FDCWD, path, true)];
    fn opendir(path: *const c_char) -> *mut libc::DIR, fail std::ptr::null_mut(), [(AT_FDCWD, path, true)];
    fn stat(path: *const c_char, buf: *mut Stat) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn stat64(path: *const c_char, buf: *mut Stat64) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn lstat(path: *const c_char, buf: *mut Stat) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn lstat64(path: *const c_char, buf: *mut Stat64) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn fstatat(dirfd: c_int, path: *const c_char, buf: *mut Stat, flags: c_int) -> c_int, fail -1, [(dirfd, path, at_follow(flags))];
    fn fstatat64(dirfd: c_int, path: *const c_char, buf: *mut Stat64, flags: c_int) -> c_int, fail -1, [(dirfd, path, at_follow(flags))];
    fn __xstat(ver: c_int, path: *const c_char, buf: *mut Stat) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn __xstat64(ver: c_int, path: *const c_char, buf: *mut Stat64) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn __lxstat(ver: c_int, path: *const c_char, buf: *mut Stat) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn __lxstat64(ver: c_int, path: *const c_char, buf: *mut Stat64) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn __fxstatat(ver: c_int, dirfd: c_int, path: *const c_char, buf: *mut Stat, flags: c_int) -> c_int, fail -1, [(dirfd, path, at_follow(flags))];
    fn __fxstatat64(ver: c_int, dirfd: c_int, path: *const c_char, buf: *mut Stat64, flags: c_int) -> c_int, fail -1, [(dirfd, path, at_follow(flags))];
    fn statx(dirfd: c_int, path: *const c_char, flags: c_int, mask: c_uint, buf: *mut libc::statx) -> c_int, fail -1, [(dirfd, path, at_follow(flags))];
    fn access(path: *const c_char, mode: c_int) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn faccessat(dirfd: c_int, path: *const c_char, mode: c_int, flags: c_int) -> c_int, fail -1, [(dirfd, path, at_follow(flags))];
    fn euidaccess(path: *const c_char, mode: c_int) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn eaccess(path: *const c_char, mode: c_int) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn chdir(path: *const c_char) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn mkdir(path: *const c_char, mode: mode_t) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn mkdirat(dirfd: c_int, path: *const c_char, mode: mode_t) -> c_int, fail -1, [(dirfd, path, false)];
    fn rmdir(path: *const c_char) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn unlink(path: *const c_char) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn unlinkat(dirfd: c_int, path: *const c_char, flags: c_int) -> c_int, fail -1, [(dirfd, path, false)];
    fn remove(path: *const c_char) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn rename(old: *const c_char, new: *const c_char) -> c_int, fail -1, [(AT_FDCWD, old, false), (AT_FDCWD, new, false)];
    fn renameat(od: c_int, old: *const c_char, nd: c_int, new: *const c_char) -> c_int, fail -1, [(od, old, false), (nd, new, false)];
    fn renameat2(od: c_int, old: *const c_char, nd: c_int, new: *const c_char, flags: c_uint) -> c_int, fail -1, [(od, old, false), (nd, new, false)];
    fn link(old: *const c_char, new: *const c_char) -> c_int, fail -1, [(AT_FDCWD, old, false), (AT_FDCWD, new, false)];
    fn linkat(od: c_int, old: *const c_char, nd: c_int, new: *const c_char, flags: c_int) -> c_int, fail -1,
        [(od, old, flags & libc::AT_SYMLINK_FOLLOW != 0), (nd, new, false)];
    fn symlink(target: *const c_char, path: *const c_char) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn symlinkat(target: *const c_char, dirfd: c_int, path: *const c_char) -> c_int, fail -1, [(dirfd, path, false)];
    fn chmod(path: *const c_char, mode: mode_t) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn lchmod(path: *const c_char, mode: mode_t) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn fchmodat(dirfd: c_int, path: *const c_char, mode: mode_t, flags: c_int) -> c_int, fail -1, [(dirfd, path, at_follow(flags))];
    fn chown(path: *const c_char, uid: uid_t, gid: gid_t) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn lchown(path: *const c_char, uid: uid_t, gid: gid_t) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn fchownat(dirfd: c_int, path: *const c_char, uid: uid_t, gid: gid_t, flags: c_int) -> c_int, fail -1, [(dirfd, path, at_follow(flags))];
    fn utime(path: *const c_char, times: *const libc::utimbuf) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn utimes(path: *const c_char, times: *const libc::timeval) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn lutimes(path: *const c_char, times: *const libc::timeval) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn futimesat(dirfd: c_int, path: *const c_char, times: *const libc::timeval) -> c_int, fail -1, [(dirfd, path, true)];
    fn utimensat(dirfd: c_int, path: *const c_char, times: *const libc::timespec, flags: c_int) -> c_int, fail -1, [(dirfd, path, at_follow(flags))];
    fn truncate(path: *const c_char, len: off_t) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn truncate64(path: *const c_char, len: off64_t) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn mknod(path: *const c_char, mode: mode_t, dev: dev_t) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn mknodat(dirfd: c_int, path: *const c_char, mode: mode_t, dev: dev_t) -> c_int, fail -1, [(dirfd, path, false)];
    fn mkfifo(path: *const c_char, mode: mode_t) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn mkfifoat(dirfd: c_int, path: *const c_char, mode: mode_t) -> c_int, fail -1, [(dirfd, path, false)];
    fn statfs(path: *const c_char, buf: *mut libc::statfs) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn statfs64(path: *const c_char, buf: *mut libc::statfs64) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn statvfs(path: *const c_char, buf: *mut libc::statvfs) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn statvfs64(path: *const c_char, buf: *mut libc::statvfs64) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn pathconf(path: *const c_char, name: c_int) -> c_long, fail -1, [(AT_FDCWD, path, true)];
    fn getxattr(path: *const c_char, name: *const c_char, value: *mut c_void, size: size_t) -> ssize_t, fail -1, [(AT_FDCWD, path, true)];
    fn lgetxattr(path: *const c_char, name: *const c_char, value: *mut c_void, size: size_t) -> ssize_t, fail -1, [(AT_FDCWD, path, false)];
    fn setxattr(path: *const c_char, name: *const c_char, value: *const c_void, size: size_t, flags: c_int) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn lsetxattr(path: *const c_char, name: *const c_char, value: *const c_void, size: size_t, flags: c_int) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn listxattr(path: *const c_char, list: *mut c_char, size: size_t) -> ssize_t, fail -1, [(AT_FDCWD, path, true)];
    fn llistxattr(path: *const c_char, list: *mut c_char, size: size_t) -> ssize_t, fail -1, [(AT_FDCWD, path, false)];
    fn removexattr(path: *const c_char, name: *const c_char) -> c_int, fail -1, [(AT_FDCWD, path, true)];
    fn lremovexattr(path: *const c_char, name: *const c_char) -> c_int, fail -1, [(AT_FDCWD, path, false)];
    fn inotify_add_watch(fd: c_int, path: *const c_char, mask: u32) -> c_int, fail -1, [(AT_FDCWD, path, mask & libc::IN_DONT_FOLLOW == 0)];
}

unsafe fn readlink_common(dirfd: c_int, path: *const c_char, buf: *mut c_char, size: size_t) -> ssize_t {
    let st = active();
    let keep = match xlate(st, dirfd, path, false) {
        Ok(v) => v,
        Err(e) => {
            set_errno(e);
            return -1;
        }
    };
    let p = keep.as_ref().map_or(path, |c| c.as_ptr());
    let n = real!(readlinkat: fn(c_int, *const c_char, *mut c_char, size_t) -> ssize_t)(dirfd, p, buf, size);
    let (Some(st), Some(host)) = (st, keep) else { return n };
    if n < 0 || !host.to_bytes().starts_with(b"/proc/") {
        return n;
    }
    let _g = Guard::enter();
    let target = std::slice::from_raw_parts(buf as *const u8, n as usize);
    match st.reverse(target) {
        Some(c) => {
            let len = c.len().min(size);
            std::ptr::copy_nonoverlapping(c.as_ptr(), buf as *mut u8, len);
            len as ssize_t
        }
        None => n,
    }
}

#[no_mangle]
pub unsafe extern "C" fn readlink(path: *const c_char, buf: *mut c_char, size: size_t) -> ssize_t {
    readlink_common(AT_FDCWD, path, buf, size)
}

#[no_mangle]
pub unsafe extern "C" fn readlinkat(dirfd: c_int, path: *const c_char, buf: *mut c_char, size: size_t) -> ssize_t {
    readlink_common(dirfd, path, buf, size)
}

#[no_mangle]
pub unsafe extern "C" fn __readlink_chk(path: *const c_char, buf: *mut c_char, size: size_t, _buflen: size_t) -> ssize_t {
    readlink_common(AT_FDCWD, path, buf, size)
}

#[no_mangle]
pub unsafe extern "C" fn __readlinkat_chk(
    dirfd: c_int,
    path: *const c_char,
    buf: *mut c_char,
    size: size_t,
    _buflen: size_t,
) -> ssize_t {
    readlink_common(dirfd, path, buf, size)
}

/// Copies `bytes` plus a NUL into `buf`, or into fresh `malloc` memory when
/// `buf` is null.
unsafe fn put_string(bytes: &[u8], buf: *mut c_char, size: size_t) -> *mut c_char {
    let need = bytes.len() + 1;
    let out = if buf.is_null() {
        let n = if size == 0 { need } else { size };
        if n < need {
            set_errno(libc::ERANGE);
            return std::ptr::null_mut();
        }
        libc::malloc(n) as *mut c_char
    } else {
        if size < need {
            set_errno(libc::ERANGE);
            return std::ptr::null_mut();
        }
        buf
    };
    if out.is_null() {
        set_errno(libc::ENOMEM);
        return out;
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), out as *mut u8, bytes.len());
    *out.add(bytes.len()) = 0;
    out
}

#[no_mangle]
pub unsafe extern "C" fn getcwd(buf: *mut c_char, size: size_t) -> *mut c_char {
    let Some(st) = active() else {
        return real!(getcwd: fn(*mut c_char, size_t) -> *mut c_char)(buf, size);
    };
    let cwd = {
        let _g = Guard::enter();
        st.cwd()
    };
    put_string(cwd.as_os_str().as_bytes(), buf, size)
}

#[no_mangle]
pub unsafe extern "C" fn __getcwd_chk(buf: *mut c_char, size: size_t, _buflen: size_t) -> *mut c_char {
    getcwd(buf, size)
}

#[no_mangle]
pub unsafe extern "C" fn get_current_dir_name() -> *mut c_char {
    getcwd(std::ptr::null_mut(), 0)
}

#[no_mangle]
pub unsafe extern "C" fn realpath(path: *const c_char, resolved: *mut c_char) -> *mut c_char {
    let Some(st) = active() else {
        return real!(realpath: fn(*const c_char, *mut c_char) -> *mut c_char)(path, resolved);
    };
    if path.is_null() {
        set_errno(libc::EINVAL);
        return std::ptr::null_mut();
    }
    let result = {
        let _g = Guard::enter();
        let raw = CStr::from_ptr(path).to_bytes();
        if raw.is_empty() {
            Err(libc::ENOENT)
        } else {
            match st.map.resolve(&RealFs, &st.cwd(), raw, true) {
                Ok(r) if RealFs.node(&r.host).is_some() => Ok(r.container),
                Ok(_) => Err(libc::ENOENT),
                Err(e) => Err(e.errno()),
            }
        }
    };
    match result {
        Ok(c) => put_string(c.as_os_str().as_bytes(), resolved, if resolved.is_null() { 0 } else { libc::PATH_MAX as usize }),
        Err(e) => {
            set_errno(e);
            std::ptr::null_mut()
        }
    }
}

#[no_mangle]
pub unsafe extern "C" fn __realpath_chk(path: *const c_char, resolved: *mut c_char, _len: size_t) -> *mut c_char {
    realpath(path, resolved)
}

#[no_mangle]
pub unsafe extern "C" fn canonicalize_file_name(path: *const c_char) -> *mut c_char {
    realpath(path, std::ptr::null_mut())
}

#[no_mangle]
pub unsafe extern "C" fn dlopen(file: *const c_char, flags: c_int) -> *mut c_void {
    let st = active();
    let slash = !file.is_null() && CStr::from_ptr(file).to_bytes().contains(&b'/');
    let keep = if slash { xlate(st, AT_FDCWD, file, true).ok().flatten() } else { None };
    let p = keep.as_ref().map_or(file, |c| c.as_ptr());
    real!(dlopen: fn(*const c_char, c_int) -> *mut c_void)(p, flags)
}

unsafe fn cvec(mut p: *const *const c_char) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    if p.is_null() {
        return out;
    }
    while !(*p).is_null() {
        out.push(CStr::from_ptr(*p).to_bytes().to_vec());
        p = p.add(1);
    }
    out
}

/// NUL-terminated strings and the pointer array referring to them.
struct CArray {
    _strings: Vec<CString>,
    ptrs: Vec<*const c_char>,
}

fn carray(items: Vec<Vec<u8>>) -> CArray {
    let strings: Vec<CString> = items
        .into_iter()
        .map(|mut v| {
            v.retain(|&b| b != 0);
            CString::new(v).unwrap()
        })
        .collect();
    let mut ptrs: Vec<*const c_char> = strings.iter().map(|s| s.as_ptr()).collect();
    ptrs.push(std::ptr::null());
    CArray { _strings: strings, ptrs }
}

fn report(e: &LaunchError) {
    if let LaunchError::Static(_) = e {
        let msg = format!("udocker: {e}\n");
        unsafe { libc::write(2, msg.as_ptr().cast(), msg.len()) };
    }
}

/// Path, argv and environment for the real exec or spawn.
unsafe fn launch(st: &State, path: &[u8], argv: Vec<Vec<u8>>, env: Vec<Vec<u8>>) -> Result<(CString, CArray, CArray), c_int> {
    let _g = Guard::enter();
    let cwd = st.cwd();
    match plan_launch(&st.cfg, &RealFs, &cwd, path, argv, &env) {
        Ok(l) => Ok((
            CString::new(l.path.into_os_string().into_vec()).map_err(|_| libc::EINVAL)?,
            carray(l.argv),
            carray(l.env),
        )),
        Err(e) => {
            report(&e);
            Err(e.errno())
        }
    }
}


unsafe fn exec_container(st: &State, path: &[u8], argv: Vec<Vec<u8>>, env: Vec<Vec<u8>>) -> c_int {
    match launch(st, path, argv, env) {
        Ok((p, a, e)) => {
            real!(execve: fn(*const c_char, *const *const c_char, *const *const c_char) -> c_int)(
                p.as_ptr(),
                a.ptrs.as_ptr(),
                e.ptrs.as_ptr(),
            );
            let err = *libc::__errno_location();
            drop((p, a, e));
            set_errno(err);
            -1
        }
        Err(e) => {
            set_errno(e);
            -1
        }
    }
}

/// `PATH` lookup inside the container, as `execvp` does it.
unsafe fn lookup(st: &State, file: &[u8], env: &[Vec<u8>]) -> Result<Vec<u8>, c_int> {
    if file.is_empty() {
        return Err(libc::ENOENT);
    }
    if file.contains(&b'/') {
        return Ok(file.to_vec());
    }
    let _g = Guard::enter();
    let path_var = env
        .iter()
        .find_map(|e| e.strip_prefix(b"PATH="))
        .map(|v| String::from_utf8_lossy(v).into_owned())
        .unwrap_or_else(|| "/bin:/usr/bin".into());
    let name = String::from_utf8_lossy(file);
    search_path(&st.map, &RealFs, &name, &path_var)
        .map(|p| p.as_os_str().as_bytes().to_vec())
        .ok_or(libc::ENOENT)
}

type ExecFn = unsafe extern "C" fn(*const c_char, *const *const c_char, *const *const c_char) -> c_int;

#[no_mangle]
pub unsafe extern "C" fn execve(path: *const c_char, argv: *const *const c_char, envp: *const *const c_char) -> c_int {
    let Some(st) = active() else {
        return real!(execve: fn(*const c_char, *const *const c_char, *const *const c_char) -> c_int)(path, argv, envp);
    };
    if path.is_null() {
        set_errno(libc::EFAULT);
        return -1;
    }
    exec_container(st, CStr::from_ptr(path).to_bytes(), cvec(argv), cvec(envp))
}

#[no_mangle]
pub unsafe extern "C" fn execv(path: *const c_char, argv: *const *const c_char) -> c_int {
    let f: ExecFn = execve;
    f(path, argv, environ)
}

#[no_mangle]
pub unsafe extern "C" fn execvpe(file: *const c_char, argv: *const *const c_char, envp: *const *const c_char) -> c_int {
    let Some(st) = active() else {
        return real!(execvpe: fn(*const c_char, *const *const c_char, *const *const c_char) -> c_int)(file, argv, envp);
    };
    if file.is_null() {
        set_errno(libc::EFAULT);
        return -1;
    }
    let env = cvec(envp);
    let current = cvec(environ);
    match lookup(st, CStr::from_ptr(file).to_bytes(), &current) {
        Ok(p) => exec_container(st, &p, cvec(argv), env),
        Err(e) => {
            set_errno(e);
            -1
        }
    }
}

#[no_mangle]
pub unsafe extern "C" fn execvp(file: *const c_char, argv: *const *const c_char) -> c_int {
    execvpe(file, argv, environ)
}

unsafe fn spawn_common(
    pid: *mut pid_t,
    file: *const c_char,
    search: bool,
    actions: *const libc::posix_spawn_file_actions_t,
    attr: *const libc::posix_spawnattr_t,
    argv: *const *const c_char,
    envp: *const *const c_char,
) -> c_int {
    type SpawnFn = unsafe extern "C" fn(
        *mut pid_t,
        *const c_char,
        *const libc::posix_spawn_file_actions_t,
        *const libc::posix_spawnattr_t,
        *const *const c_char,
        *const *const c_char,
    ) -> c_int;
    let real_spawn: SpawnFn = real!(posix_spawn: fn(
        *mut pid_t,
        *const c_char,
        *const libc::posix_spawn_file_actions_t,
        *const libc::posix_spawnattr_t,
        *const *const c_char,
        *const *const c_char
    ) -> c_int);
    let Some(st) = active() else {
        if search {
            let f: SpawnFn = real!(posix_spawnp: fn(
                *mut pid_t,
                *const c_char,
                *const libc::posix_spawn_file_actions_t,
                *const libc::posix_spawnattr_t,
                *const *const c_char,
                *const *const c_char
            ) -> c_int);
            return f(pid, file, actions, attr, argv, envp);
        }
        return real_spawn(pid, file, actions, attr, argv, envp);
    };
    if file.is_null() {
        return libc::EFAULT;
    }
    let mut path = CStr::from_ptr(file).to_bytes().to_vec();
    if search {
        match lookup(st, &path, &cvec(environ)) {
            Ok(p) => path = p,
            Err(e) => return e,
        }
    }
    match launch(st, &path, cvec(argv), cvec(envp)) {
        Ok((p, a, e)) => real_spawn(pid, p.as_ptr(), actions, attr, a.ptrs.as_ptr(), e.ptrs.as_ptr()),
        Err(e) => e,
    }
}

#[no_mangle]
pub unsafe extern "C" fn posix_spawn(
    pid: *mut pid_t,
    path: *const c_char,
    actions: *const libc::posix_spawn_file_actions_t,
    attr: *const libc::posix_spawnattr_t,
    argv: *const *const c_char,
    envp: *const *const c_char,
) -> c_int {
    spawn_common(pid, path, false, actions, attr, argv, envp)
}

#[no_mangle]
pub unsafe extern "C" fn posix_spawnp(
    pid: *mut pid_t,
    file: *const c_char,
    actions: *const libc::posix_spawn_file_actions_t,
    attr: *const libc::posix_spawnattr_t,
    argv: *const *const c_char,
    envp: *const *const c_char,
) -> c_int {
    spawn_common(pid, file, true, actions, attr, argv, envp)
}

/// `system` runs `/bin/sh` through an internal spawn that no exported
/// symbol covers, so it is reimplemented on top of the interposed exec.
#[no_mangle]
pub unsafe extern "C" fn system(cmd: *const c_char) -> c_int {
    let Some(st) = active() else {
        return real!(system: fn(*const c_char) -> c_int)(cmd);
    };
    if cmd.is_null() {
        return 1;
    }
    let argv = vec![b"sh".to_vec(), b"-c".to_vec(), CStr::from_ptr(cmd).to_bytes().to_vec()];
    let env = cvec(environ);
    let pid = libc::fork();
    if pid < 0 {
        return -1;
    }
    if pid == 0 {
        exec_container(st, b"/bin/sh", argv, env);
        libc::_exit(127);
    }
    let mut status = 0;
    loop {
        let r = libc::waitpid(pid, &mut status, 0);
        if r == pid {
            return status;
        }
        if r < 0 && *libc::__errno_location() != libc::EINTR {
            return -1;
        }
    }
}

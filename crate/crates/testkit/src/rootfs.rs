//! Container root trees assembled from host programs.
//!
//! Programs are copied with the shared objects `ldd` reports and every
//! symlink met on the way, so the tree mirrors the host layout (merged /usr
//! included) and the container's own loader and libc are used.

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Component, Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

/// Copies host `path` into `root` at the same location, recreating any
/// symlinks on the way (and what they point to).
pub fn copy_host_path(root: &Path, path: &Path) -> std::io::Result<()> {
    copy_inner(root, path, 0)
}

fn copy_inner(root: &Path, path: &Path, depth: usize) -> std::io::Result<()> {
    if depth > 16 {
        return Ok(());
    }
    let mut host = PathBuf::from("/");
    let comps: Vec<_> = path.components().filter(|c| matches!(c, Component::Normal(_))).collect();
    for (i, c) in comps.iter().enumerate() {
        host.push(c);
        let inside = root.join(host.strip_prefix("/").unwrap());
        let meta = fs::symlink_metadata(&host)?;
        if meta.file_type().is_symlink() {
            let target = fs::read_link(&host)?;
            if fs::symlink_metadata(&inside).is_err() {
                symlink(&target, &inside)?;
            }
            let resolved = host.parent().unwrap().join(&target);
            let mut rest = resolved;
            for c in &comps[i + 1..] {
                rest.push(c);
            }
            return copy_inner(root, &normalize(&rest), depth + 1);
        } else if meta.is_dir() {
            if fs::symlink_metadata(&inside).is_err() {
                fs::create_dir(&inside)?;
            }
        } else {
            if fs::symlink_metadata(&inside).is_err() {
                fs::copy(&host, &inside)?;
                fs::set_permissions(&inside, fs::Permissions::from_mode(meta.permissions().mode() | 0o200))?;
            }
            return Ok(());
        }
    }
    Ok(())
}

fn normalize(p: &Path) -> PathBuf {
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

/// Shared objects (and the loader) `ldd` lists for `program`.
pub fn shared_deps(program: &Path) -> Vec<PathBuf> {
    let Ok(out) = Command::new("ldd").arg(program).output() else {
        return Vec::new();
    };
    let text = String::from_utf8_lossy(&out.stdout);
    let mut deps = Vec::new();
    for line in text.lines() {
        let path = match line.split_once("=>") {
            Some((_, rhs)) => rhs.split_whitespace().next(),
            None => line.split_whitespace().next(),
        };
        if let Some(p) = path.filter(|p| p.starts_with('/')) {
            deps.push(PathBuf::from(p));
        }
    }
    deps
}

/// Programs every fixture rootfs gets, as `(container path, host program)`.
pub const BASE_PROGRAMS: &[(&str, &str)] = &[
    ("/bin/sh", "dash"),
    ("/bin/ls", "ls"),
    ("/bin/cat", "cat"),
    ("/bin/mkdir", "mkdir"),
    ("/bin/rm", "rm"),
    ("/bin/mv", "mv"),
    ("/bin/env", "env"),
    ("/bin/pwd", "pwd"),
    ("/bin/id", "id"),
    ("/bin/touch", "touch"),
    ("/bin/sort", "sort"),
    ("/bin/sha256sum", "sha256sum"),
    ("/bin/readlink", "readlink"),
];

fn which(name: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path).map(|d| d.join(name)).find(|p| p.is_file())
}

/// Builds a small rootfs at `root` from host programs. Returns false when a
/// required program is unavailable.
pub fn build_base(root: &Path) -> bool {
    if fs::create_dir_all(root).is_err() {
        return false;
    }
    for (dest, prog) in BASE_PROGRAMS {
        let Some(host) = which(prog) else { return false };
        if !install_program(root, &host, dest) {
            return false;
        }
    }
    for d in ["etc", "tmp", "root", "home", "dev", "proc", "sys", "var", "mnt"] {
        let _ = fs::create_dir_all(root.join(d));
    }
    let _ = fs::set_permissions(root.join("tmp"), fs::Permissions::from_mode(0o1777));
    let _ = fs::write(root.join("etc/passwd"), "root:x:0:0:root:/root:/bin/sh\nuser:x:1000:1000:user:/home/user:/bin/sh\n");
    let _ = fs::write(root.join("etc/group"), "root:x:0:\nuser:x:1000:\n");
    let _ = fs::write(root.join("etc/hostname"), "fixture\n");
    let _ = fs::write(root.join("etc/msg"), "inside\n");
    update_ld_cache(root);
    true
}

/// Copies `host` to `dest` inside `root` along with its shared objects.
pub fn install_program(root: &Path, host: &Path, dest: &str) -> bool {
    for dep in shared_deps(host) {
        if copy_host_path(root, &dep).is_err() {
            return false;
        }
    }
    let target = root.join(dest.trim_start_matches('/'));
    if let Some(parent) = target.parent() {
        // /bin may be a symlink to usr/bin on merged hosts; a plain
        // directory is fine for fixtures.
        if fs::create_dir_all(parent).is_err() && !parent.exists() {
            return false;
        }
    }
    let _ = fs::remove_file(&target);
    fs::copy(host, &target).is_ok()
}

/// Writes an `ld.so.cache` for the tree using the host `ldconfig`.
pub fn update_ld_cache(root: &Path) -> bool {
    let mut dirs = Vec::new();
    for d in ["lib", "lib64", "usr/lib", "usr/lib64", "usr/lib/x86_64-linux-gnu", "lib/x86_64-linux-gnu"] {
        let p = root.join(d);
        if p.is_dir() && !fs::symlink_metadata(&p).map(|m| m.file_type().is_symlink()).unwrap_or(true) {
            dirs.push(format!("/{d}"));
        }
    }
    let _ = fs::create_dir_all(root.join("etc"));
    let _ = fs::write(root.join("etc/ld.so.conf"), dirs.join("\n") + "\n");
    let ldconfig = ["/sbin/ldconfig", "/usr/sbin/ldconfig"].into_iter().find(|p| Path::new(p).is_file());
    let Some(ldconfig) = ldconfig else { return false };
    Command::new(ldconfig)
        .arg("-r")
        .arg(root)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// sha256 of every regular file and the target of every symlink, keyed by
/// relative path. Directories are recorded with their mode.
pub fn snapshot(root: &Path) -> BTreeMap<String, String> {
    fn go(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let Ok(rd) = fs::read_dir(dir) else { return };
        for e in rd.flatten() {
            let p = e.path();
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let Ok(meta) = fs::symlink_metadata(&p) else { continue };
            if meta.file_type().is_symlink() {
                out.insert(rel, format!("link:{}", fs::read_link(&p).unwrap().display()));
            } else if meta.is_dir() {
                out.insert(rel, "dir".into());
                go(root, &p, out);
            } else if meta.is_file() {
                let data = fs::read(&p).unwrap_or_default();
                let h = Sha256::digest(&data);
                let hex: String = h.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(rel, format!("file:{hex}"));
            }
        }
    }
    let mut out = BTreeMap::new();
    go(root, root, &mut out);
    out
}

//! Patching a whole container tree so that its programs load only
//! container libraries through the container's own loader.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::os::unix::ffi::OsStrExt;
use std::path::{Component, Path, PathBuf};

use crate::journal::{Journal, RecordKind};
use crate::ldcache::prefix;
use crate::loader::neutralize_loader;
use crate::{apply_edit, ElfEdit, ElfError, ElfFile, ElfInfo, ObjectKind};

const MAX_LINKS: usize = 40;

/// Library directories searched when the container has no loader cache.
pub const DEFAULT_LIB_DIRS: &[&str] = &[
    "/lib64",
    "/usr/lib64",
    "/lib",
    "/usr/lib",
    "/lib/x86_64-linux-gnu",
    "/usr/lib/x86_64-linux-gnu",
    "/lib/aarch64-linux-gnu",
    "/usr/lib/aarch64-linux-gnu",
    "/usr/local/lib",
];

/// Resolves a container path to the real file or directory inside
/// `rootfs`, following symlinks with the container root as `/`. Returns
/// the resolved container path, or `None` when it does not exist.
pub fn resolve_in_root(rootfs: &Path, container: &str) -> Option<String> {
    let mut done: Vec<Vec<u8>> = Vec::new();
    let mut todo: Vec<Vec<u8>> = split_rev(container.as_bytes());
    let mut links = 0;
    while let Some(c) = todo.pop() {
        match c.as_slice() {
            b"." => continue,
            b".." => {
                done.pop();
                continue;
            }
            _ => {}
        }
        done.push(c);
        let host = host_of(rootfs, &done);
        let meta = fs::symlink_metadata(&host).ok()?;
        if meta.file_type().is_symlink() {
            links += 1;
            if links > MAX_LINKS {
                return None;
            }
            let target = fs::read_link(&host).ok()?;
            let target = target.as_os_str().as_bytes();
            done.pop();
            if target.starts_with(b"/") {
                done.clear();
            }
            todo.extend(split_rev(target));
        }
    }
    let mut out = String::new();
    for c in &done {
        out.push('/');
        out.push_str(&String::from_utf8_lossy(c));
    }
    Some(if out.is_empty() { "/".into() } else { out })
}

fn split_rev(p: &[u8]) -> Vec<Vec<u8>> {
    let mut v: Vec<Vec<u8>> = p.split(|&b| b == b'/').filter(|c| !c.is_empty()).map(<[u8]>::to_vec).collect();
    v.reverse();
    v
}

fn host_of(rootfs: &Path, comps: &[Vec<u8>]) -> PathBuf {
    let mut p = rootfs.to_path_buf();
    for c in comps {
        p.push(std::ffi::OsStr::from_bytes(c));
    }
    p
}

/// What to rewrite every ELF object of a container to.
#[derive(Debug, Clone)]
pub struct TreeSpec {
    pub rootfs: PathBuf,
    /// Container directories appended to every search path, usually the
    /// directories of the container's loader cache.
    pub lib_dirs: Vec<String>,
    /// Only objects for this machine are touched.
    pub machine: u16,
}

impl TreeSpec {
    pub fn new(rootfs: impl Into<PathBuf>, lib_dirs: Vec<String>) -> Self {
        TreeSpec {
            rootfs: rootfs.into(),
            lib_dirs,
            machine: host_machine(),
        }
    }

    fn prefixed(&self, container: &str) -> String {
        let real = resolve_in_root(&self.rootfs, container).unwrap_or_else(|| container.to_string());
        prefix(&self.rootfs, &real).to_string_lossy().into_owned()
    }

    fn is_prefixed(&self, value: &str) -> bool {
        Path::new(value).starts_with(&self.rootfs)
    }

    /// The edit that makes `info` self-contained, or an empty edit.
    pub fn edit_for(&self, info: &ElfInfo) -> ElfEdit {
        let mut edit = ElfEdit::default();
        if let Some(i) = &info.interpreter {
            if i.starts_with('/') && !self.is_prefixed(i) {
                edit.interpreter = Some(self.prefixed(i));
            }
        }
        if !info.is_dynamic {
            return edit;
        }
        let mut search: Vec<String> = Vec::new();
        for entry in info.rpath.iter().chain(&info.runpath) {
            for dir in entry.split(':').filter(|d| !d.is_empty()) {
                let v = if dir.starts_with('/') && !self.is_prefixed(dir) {
                    self.prefixed(dir)
                } else {
                    dir.to_string()
                };
                if !search.contains(&v) {
                    search.push(v);
                }
            }
        }
        for dir in &self.lib_dirs {
            if resolve_in_root(&self.rootfs, dir).is_none() {
                continue;
            }
            let v = self.prefixed(dir);
            if !search.contains(&v) {
                search.push(v);
            }
        }
        let current: Vec<String> = info
            .rpath
            .iter()
            .chain(&info.runpath)
            .flat_map(|e| e.split(':').filter(|d| !d.is_empty()).map(str::to_string))
            .collect();
        if search != current && !search.is_empty() {
            edit.search_path = Some(vec![search.join(":")]);
        }
        for n in &info.needed {
            if n.starts_with('/') && !self.is_prefixed(n) {
                edit.needed.insert(n.clone(), self.prefixed(n));
            }
        }
        edit
    }
}

/// ELF machine number of the running host.
pub fn host_machine() -> u16 {
    match std::env::consts::ARCH {
        "x86_64" => 62,
        "aarch64" => 183,
        "x86" => 3,
        "arm" => 40,
        "powerpc64" => 21,
        "s390x" => 22,
        "riscv64" => 243,
        _ => 0,
    }
}

/// Outcome of patching a tree.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct TreeReport {
    /// Rootfs-relative ELF objects rewritten in this call.
    pub patched: Vec<PathBuf>,
    /// Loaders neutralized in this call.
    pub loaders: Vec<PathBuf>,
    /// Objects left alone, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

fn read_prefix(path: &Path, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(n);
    fs::File::open(path)?.take(n as u64).read_to_end(&mut buf)?;
    Ok(buf)
}

fn info_of(data: &[u8]) -> Result<ElfInfo, ElfError> {
    ElfFile::parse(data)?.info()
}

fn rel_of(container: &str) -> PathBuf {
    PathBuf::from(container.trim_start_matches('/'))
}

/// Neutralizes the loader at container path `loader` in place.
fn patch_loader(spec: &TreeSpec, journal: &Journal, loader: &str, report: &mut TreeReport) -> Result<(), ElfError> {
    let Some(real) = resolve_in_root(&spec.rootfs, loader) else {
        report.skipped.push((rel_of(loader), "loader missing".into()));
        return Ok(());
    };
    let rel = rel_of(&real);
    if journal.patch_file(&spec.rootfs, &rel, RecordKind::Loader, |d| Ok(neutralize_loader(d)))? {
        report.loaders.push(rel);
    }
    Ok(())
}

/// Rewrites one rootfs-relative file if it is an ELF object needing it.
/// Returns the interpreter it names, if any.
fn patch_object(
    spec: &TreeSpec,
    journal: &Journal,
    rel: &Path,
    report: &mut TreeReport,
) -> Result<Option<String>, ElfError> {
    let host = spec.rootfs.join(rel);
    if read_prefix(&host, 4)? != crate::ELF_MAGIC {
        return Ok(None);
    }
    let data = fs::read(&host)?;
    let info = match info_of(&data) {
        Ok(i) => i,
        Err(e) => {
            report.skipped.push((rel.to_path_buf(), e.to_string()));
            return Ok(None);
        }
    };
    if info.machine != spec.machine {
        report.skipped.push((rel.to_path_buf(), format!("foreign machine {}", info.machine)));
        return Ok(None);
    }
    if matches!(info.kind, ObjectKind::Other(_)) || (!info.is_dynamic && info.interpreter.is_none()) {
        return Ok(None);
    }
    let edit = spec.edit_for(&info);
    if edit.is_empty() {
        return Ok(info.interpreter);
    }
    let changed = journal.patch_file(&spec.rootfs, rel, RecordKind::Elf, |orig| {
        // Re-derive from what patch_file read, in case the file changed.
        let info = info_of(orig)?;
        let edit = spec.edit_for(&info);
        Ok(apply_edit(orig, &edit)?.data)
    });
    match changed {
        Ok(true) => report.patched.push(rel.to_path_buf()),
        Ok(false) => {}
        Err(e @ ElfError::Io(_)) => return Err(e),
        Err(e) => report.skipped.push((rel.to_path_buf(), e.to_string())),
    }
    Ok(info.interpreter)
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let ft = e.file_type()?;
        let path = e.path();
        if ft.is_dir() {
            walk(root, &path, out)?;
        } else if ft.is_file() {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    Ok(())
}

/// Rewrites every ELF executable and library under the rootfs and
/// neutralizes every loader they name. Already journaled files are left
/// alone, so a second call changes nothing.
pub fn patch_tree(spec: &TreeSpec, journal: &Journal) -> Result<TreeReport, ElfError> {
    let mut files = Vec::new();
    walk(&spec.rootfs, &spec.rootfs, &mut files)?;
    let mut report = TreeReport::default();
    let mut loaders = BTreeSet::new();
    let mut loader_files = BTreeSet::new();
    // Loaders first, so their own files are never given an ELF edit.
    for rel in &files {
        if let Ok(head) = read_prefix(&spec.rootfs.join(rel), 1 << 16) {
            if let Ok(crate::HeadProbe::Interpreter(i)) = crate::interpreter_from_head(&head) {
                loaders.insert(i);
            }
        }
    }
    for l in &loaders {
        let l = strip_root(spec, l);
        if let Some(real) = resolve_in_root(&spec.rootfs, &l) {
            loader_files.insert(rel_of(&real));
        }
        patch_loader(spec, journal, &l, &mut report)?;
    }
    for rel in &files {
        if loader_files.contains(rel) {
            continue;
        }
        patch_object(spec, journal, rel, &mut report)?;
    }
    Ok(report)
}

/// An interpreter path already rewritten to the host location of the
/// container loader, mapped back to its container path.
fn strip_root(spec: &TreeSpec, interp: &str) -> String {
    match Path::new(interp).strip_prefix(&spec.rootfs) {
        Ok(rest) => format!("/{}", rest.display()),
        Err(_) => interp.to_string(),
    }
}

/// Rewrites a single rootfs-relative executable, and neutralizes the loader
/// it names, unless already done. Used when patching on first execution.
pub fn patch_one(spec: &TreeSpec, journal: &Journal, rel: &Path) -> Result<TreeReport, ElfError> {
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(ElfError::Journal(format!("path {} is not rootfs relative", rel.display())));
    }
    let mut report = TreeReport::default();
    if let Some(l) = patch_object(spec, journal, rel, &mut report)? {
        patch_loader(spec, journal, &strip_root(spec, &l), &mut report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::unix::fs::symlink;

    #[test]
    fn in_root_resolution() {
        let t = std::env::temp_dir().join(format!("udk-inroot-{}", std::process::id()));
        let _ = fs::remove_dir_all(&t);
        fs::create_dir_all(t.join("usr/lib")).unwrap();
        fs::write(t.join("usr/lib/ld.so"), b"x").unwrap();
        symlink("usr/lib", t.join("lib")).unwrap();
        fs::create_dir_all(t.join("lib64")).unwrap();
        symlink("/lib/ld.so", t.join("lib64/ld.so")).unwrap();
        symlink("../../../../../../usr", t.join("up")).unwrap();
        assert_eq!(resolve_in_root(&t, "/lib64/ld.so").as_deref(), Some("/usr/lib/ld.so"));
        assert_eq!(resolve_in_root(&t, "/up/lib").as_deref(), Some("/usr/lib"));
        assert_eq!(resolve_in_root(&t, "/nope"), None);
        fs::remove_dir_all(&t).unwrap();
    }
}

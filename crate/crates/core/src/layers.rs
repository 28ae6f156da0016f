//! Flattening of layer archives into a root tree, and tree import/export.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::{symlink, OpenOptionsExt, PermissionsExt};
use std::path::{Component, Path, PathBuf};
use std::time::{Duration, UNIX_EPOCH};

use tar::EntryType;
use udocker_pathmap::{PathMap, RealFs};

pub const WHITEOUT_PREFIX: &str = ".wh.";
pub const OPAQUE_MARKER: &str = ".wh..wh..opq";

#[derive(Debug, thiserror::Error)]
pub enum LayerError {
    #[error("layer {layer}: rejected entry {path:?}: {reason}")]
    Rejected { layer: String, path: String, reason: String },
    #[error("layer {layer}: not a readable tar archive: {msg}")]
    Format { layer: String, msg: String },
    #[error("layer {layer}: {what} compression is not supported")]
    Unsupported { layer: String, what: &'static str },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LayerError + '_ {
    move |source| LayerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A deletion marker found in a layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WhiteoutEntry {
    /// `dir/.wh.name` hides `dir/name`.
    File(PathBuf),
    /// `dir/.wh..wh..opq` hides everything below `dir`.
    Opaque(PathBuf),
}

impl WhiteoutEntry {
    /// Classifies a normalized relative entry path.
    pub fn classify(rel: &Path) -> Option<WhiteoutEntry> {
        let name = rel.file_name()?.to_str()?;
        let parent = rel.parent().unwrap_or(Path::new("")).to_path_buf();
        if name == OPAQUE_MARKER {
            Some(WhiteoutEntry::Opaque(parent))
        } else {
            name.strip_prefix(WHITEOUT_PREFIX)
                .filter(|n| !n.is_empty())
                .map(|n| WhiteoutEntry::File(parent.join(n)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionPolicy {
    pub strip_setuid: bool,
    /// Entries nested deeper than this are rejected.
    pub max_path_depth: usize,
}

impl Default for ExtractionPolicy {
    fn default() -> Self {
        ExtractionPolicy {
            strip_setuid: true,
            max_path_depth: 256,
        }
    }
}

/// Entries that were deliberately not materialized.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractReport {
    pub entries: usize,
    pub skipped: Vec<(String, String)>,
}

/// Extracts `layers` (base first) over `dest`, honoring whiteouts.
pub fn flatten<P: AsRef<Path>>(layers: &[P], dest: &Path, policy: &ExtractionPolicy) -> Result<ExtractReport, LayerError> {
    let mut report = ExtractReport::default();
    for layer in layers {
        let layer = layer.as_ref();
        let label = layer.display().to_string();
        let open = || -> Result<Box<dyn Read>, LayerError> {
            let f = File::open(layer).map_err(io_err(layer))?;
            decompress(BufReader::new(f), &label)
        };
        apply_layer(open, &label, dest, policy, &mut report)?;
    }
    Ok(report)
}

/// Like [`flatten`] for layers held in memory.
pub fn flatten_bytes(layers: &[Vec<u8>], dest: &Path, policy: &ExtractionPolicy) -> Result<ExtractReport, LayerError> {
    let mut report = ExtractReport::default();
    for (i, data) in layers.iter().enumerate() {
        let label = format!("#{}", i + 1);
        let open = || decompress(BufReader::new(io::Cursor::new(data.as_slice())), &label);
        apply_layer(open, &label, dest, policy, &mut report)?;
    }
    Ok(report)
}

fn decompress<'a, R: BufRead + 'a>(mut r: R, label: &str) -> Result<Box<dyn Read + 'a>, LayerError> {
    let head = r.fill_buf().map_err(|e| LayerError::Format {
        layer: label.to_string(),
        msg: e.to_string(),
    })?;
    if head.starts_with(&[0x1f, 0x8b]) {
        Ok(Box::new(flate2::bufread::MultiGzDecoder::new(r)))
    } else if head.starts_with(&[0x28, 0xb5, 0x2f, 0xfd]) {
        Err(LayerError::Unsupported {
            layer: label.to_string(),
            what: "zstd",
        })
    } else {
        Ok(Box::new(r))
    }
}

/// Entry path relative to the root, or the reason it is refused.
fn entry_rel(raw: &[u8], policy: &ExtractionPolicy) -> Result<PathBuf, String> {
    if raw.first() == Some(&b'/') {
        return Err("absolute path".into());
    }
    let mut rel = PathBuf::new();
    for c in Path::new(std::ffi::OsStr::from_bytes(raw)).components() {
        match c {
            Component::Normal(n) => rel.push(n),
            Component::CurDir => {}
            Component::ParentDir => return Err("parent directory reference".into()),
            Component::RootDir | Component::Prefix(_) => return Err("absolute path".into()),
        }
    }
    if rel.components().count() > policy.max_path_depth {
        return Err("path too deep".into());
    }
    Ok(rel)
}

fn format_err(label: &str) -> impl Fn(io::Error) -> LayerError + '_ {
    move |e| LayerError::Format {
        layer: label.to_string(),
        msg: e.to_string(),
    }
}

fn apply_layer<'a>(
    open: impl Fn() -> Result<Box<dyn Read + 'a>, LayerError>,
    label: &str,
    dest: &Path,
    policy: &ExtractionPolicy,
    report: &mut ExtractReport,
) -> Result<(), LayerError> {
    let rejected = |path: &[u8], reason: String| LayerError::Rejected {
        layer: label.to_string(),
        path: String::from_utf8_lossy(path).into_owned(),
        reason,
    };
    let fmt = format_err(label);
    let ex = Extractor::new(dest);

    // Deletions apply to what lower layers left, whatever their position in
    // this archive.
    let mut archive = tar::Archive::new(open()?);
    for entry in archive.entries().map_err(&fmt)? {
        let entry = entry.map_err(&fmt)?;
        let raw = entry.path_bytes().into_owned();
        let rel = entry_rel(&raw, policy).map_err(|r| rejected(&raw, r))?;
        match WhiteoutEntry::classify(&rel) {
            Some(WhiteoutEntry::File(target)) => ex.remove(&target)?,
            Some(WhiteoutEntry::Opaque(dir)) => ex.clear_dir(&dir)?,
            None => {}
        }
    }

    let mut archive = tar::Archive::new(open()?);
    let mut written: HashSet<PathBuf> = HashSet::new();
    let mut dir_times: Vec<(PathBuf, u64)> = Vec::new();
    for entry in archive.entries().map_err(&fmt)? {
        let mut entry = entry.map_err(&fmt)?;
        let raw = entry.path_bytes().into_owned();
        let rel = entry_rel(&raw, policy).map_err(|r| rejected(&raw, r))?;
        match WhiteoutEntry::classify(&rel) {
            Some(WhiteoutEntry::Opaque(dir)) => {
                ex.parent_dir(&dir.join(OPAQUE_MARKER), true, true)?;
                continue;
            }
            Some(WhiteoutEntry::File(_)) => continue,
            None => {}
        }
        let header = entry.header();
        let mut mode = header.mode().map_err(&fmt)? & 0o7777;
        if policy.strip_setuid {
            mode &= !0o6000;
        }
        let mtime = header.mtime().unwrap_or(0);
        let kind = header.entry_type();
        if rel.as_os_str().is_empty() {
            if kind == EntryType::Directory {
                continue;
            }
            return Err(rejected(&raw, "non-directory entry for the root".into()));
        }
        report.entries += 1;
        match kind {
            EntryType::Directory => {
                let host = ex.ensure_dir(&rel, mode)?;
                dir_times.push((host, mtime));
            }
            EntryType::Regular | EntryType::Continuous | EntryType::GNUSparse => {
                let host = ex.place(&rel)?;
                let mut out = OpenOptions::new()
                    .write(true)
                    .create_new(true)
                    .mode(0o600)
                    .custom_flags(libc::O_NOFOLLOW)
                    .open(&host)
                    .map_err(io_err(&host))?;
                io::copy(&mut entry, &mut out).map_err(&fmt)?;
                out.set_modified(UNIX_EPOCH + Duration::from_secs(mtime)).map_err(io_err(&host))?;
                drop(out);
                fs::set_permissions(&host, fs::Permissions::from_mode(mode)).map_err(io_err(&host))?;
                written.insert(rel);
            }
            EntryType::Symlink => {
                let target = entry
                    .link_name_bytes()
                    .ok_or_else(|| rejected(&raw, "symlink without target".into()))?
                    .into_owned();
                let host = ex.place(&rel)?;
                symlink(std::ffi::OsStr::from_bytes(&target), &host).map_err(io_err(&host))?;
                set_symlink_mtime(&host, mtime);
            }
            EntryType::Link => {
                let target = entry
                    .link_name_bytes()
                    .ok_or_else(|| rejected(&raw, "hard link without target".into()))?
                    .into_owned();
                let target_rel = entry_rel(&target, policy).map_err(|r| rejected(&raw, format!("hard link target: {r}")))?;
                if !written.contains(&target_rel) {
                    return Err(rejected(&raw, "hard link to a file outside this layer".into()));
                }
                let source = ex.locate(&target_rel).ok_or_else(|| rejected(&raw, "hard link target vanished".into()))?;
                let host = ex.place(&rel)?;
                fs::hard_link(&source, &host).map_err(io_err(&host))?;
                written.insert(rel);
            }
            EntryType::Char | EntryType::Block | EntryType::Fifo => {
                let what = if kind == EntryType::Fifo { "fifo" } else { "device node" };
                log::warn!("layer {label}: skipping {what} {}", rel.display());
                report.skipped.push((rel.display().to_string(), what.to_string()));
                report.entries -= 1;
            }
            EntryType::XGlobalHeader | EntryType::XHeader | EntryType::GNULongName | EntryType::GNULongLink => {
                report.entries -= 1;
            }
            other => {
                log::warn!("layer {label}: skipping entry {} of type {other:?}", rel.display());
                report.skipped.push((rel.display().to_string(), format!("{other:?}")));
                report.entries -= 1;
            }
        }
    }
    for (dir, mtime) in dir_times.into_iter().rev() {
        if let Ok(f) = File::open(&dir) {
            let _ = f.set_modified(UNIX_EPOCH + Duration::from_secs(mtime));
        }
    }
    Ok(())
}

fn set_symlink_mtime(path: &Path, mtime: u64) {
    let Ok(c) = std::ffi::CString::new(path.as_os_str().as_bytes()) else { return };
    let t = libc::timespec {
        tv_sec: mtime as libc::time_t,
        tv_nsec: 0,
    };
    let times = [t, t];
    unsafe {
        libc::utimensat(libc::AT_FDCWD, c.as_ptr(), times.as_ptr(), libc::AT_SYMLINK_NOFOLLOW);
    }
}

/// Places entries below `dest` without ever leaving it: parent symlinks are
/// followed as they would be from inside the root.
struct Extractor {
    dest: PathBuf,
    map: PathMap,
}

impl Extractor {
    fn new(dest: &Path) -> Self {
        Extractor {
            dest: dest.to_path_buf(),
            map: PathMap::new(dest, Vec::new()),
        }
    }

    /// Host directory for the parent of `rel`. With `create`, missing
    /// directories are made and non-directories in the way replaced.
    /// Without `follow`, a symlink on the way means there is no such parent.
    fn parent_dir(&self, rel: &Path, create: bool, follow: bool) -> Result<Option<PathBuf>, LayerError> {
        let mut host = self.dest.clone();
        let mut container = PathBuf::from("/");
        let parent = rel.parent().unwrap_or(Path::new(""));
        for c in parent.components() {
            let name = c.as_os_str();
            let cand = host.join(name);
            let cand_container = container.join(name);
            let meta = fs::symlink_metadata(&cand).ok();
            match meta {
                Some(m) if m.is_dir() => {
                    host = cand;
                    container = cand_container;
                }
                Some(m) if m.file_type().is_symlink() && !follow => return Ok(None),
                Some(m) if m.file_type().is_symlink() => {
                    let followed = self
                        .map
                        .resolve(&RealFs, Path::new("/"), cand_container.as_os_str().as_bytes(), true)
                        .ok()
                        .filter(|r| fs::metadata(&r.host).map(|m| m.is_dir()).unwrap_or(false));
                    match followed {
                        Some(r) => {
                            host = r.host;
                            container = r.container;
                        }
                        None if create => {
                            fs::remove_file(&cand).map_err(io_err(&cand))?;
                            make_dir(&cand, 0o755)?;
                            host = cand;
                            container = cand_container;
                        }
                        None => return Ok(None),
                    }
                }
                Some(_) if create => {
                    remove_any(&cand)?;
                    make_dir(&cand, 0o755)?;
                    host = cand;
                    container = cand_container;
                }
                None if create => {
                    make_dir(&cand, 0o755)?;
                    host = cand;
                    container = cand_container;
                }
                _ => return Ok(None),
            }
        }
        Ok(Some(host))
    }

    /// Clears the way for a new non-directory at `rel`.
    fn place(&self, rel: &Path) -> Result<PathBuf, LayerError> {
        let parent = self.parent_dir(rel, true, true)?.expect("created");
        let host = parent.join(rel.file_name().expect("non-empty entry"));
        if fs::symlink_metadata(&host).is_ok() {
            remove_any(&host)?;
        }
        Ok(host)
    }

    fn ensure_dir(&self, rel: &Path, mode: u32) -> Result<PathBuf, LayerError> {
        let Some(name) = rel.file_name() else {
            return Ok(self.dest.clone());
        };
        let host = self.parent_dir(rel, true, true)?.expect("created").join(name);
        match fs::symlink_metadata(&host) {
            Ok(m) if m.is_dir() => {}
            Ok(_) => {
                remove_any(&host)?;
                make_dir(&host, mode)?;
            }
            Err(_) => make_dir(&host, mode)?,
        }
        // Owner keeps full access so later layers can write below it.
        fs::set_permissions(&host, fs::Permissions::from_mode(mode | 0o700)).map_err(io_err(&host))?;
        Ok(host)
    }

    fn locate(&self, rel: &Path) -> Option<PathBuf> {
        let host = self.parent_dir(rel, false, true).ok()??.join(rel.file_name()?);
        fs::symlink_metadata(&host).ok().filter(|m| m.is_file()).map(|_| host)
    }

    /// Deletions look at lower layers literally: a directory of this layer
    /// replaces a lower symlink rather than merging with its target.
    fn remove(&self, rel: &Path) -> Result<(), LayerError> {
        let Some(name) = rel.file_name() else { return Ok(()) };
        if let Some(parent) = self.parent_dir(rel, false, false)? {
            let host = parent.join(name);
            if fs::symlink_metadata(&host).is_ok() {
                remove_any(&host)?;
            }
        }
        Ok(())
    }

    fn clear_dir(&self, rel: &Path) -> Result<(), LayerError> {
        let dir = if rel.as_os_str().is_empty() {
            Some(self.dest.clone())
        } else {
            self.parent_dir(&rel.join("x"), false, false)?
        };
        let Some(dir) = dir else { return Ok(()) };
        if !fs::symlink_metadata(&dir).map(|m| m.is_dir()).unwrap_or(false) {
            return Ok(());
        }
        for e in fs::read_dir(&dir).map_err(io_err(&dir))? {
            remove_any(&e.map_err(io_err(&dir))?.path())?;
        }
        Ok(())
    }
}

fn make_dir(path: &Path, mode: u32) -> Result<(), LayerError> {
    fs::create_dir(path).map_err(io_err(path))?;
    fs::set_permissions(path, fs::Permissions::from_mode(mode | 0o700)).map_err(io_err(path))
}

fn remove_any(path: &Path) -> Result<(), LayerError> {
    let meta = fs::symlink_metadata(path).map_err(io_err(path))?;
    if meta.is_dir() {
        crate::repo::remove_tree(path).map_err(io_err(path))
    } else {
        fs::remove_file(path).map_err(io_err(path))
    }
}

/// Grants the owner read access to every file and full access to every
/// directory. Other bits are kept, so running it twice changes nothing.
pub fn adjust_permissions(rootfs: &Path) -> Result<(), LayerError> {
    let meta = fs::symlink_metadata(rootfs).map_err(io_err(rootfs))?;
    let mut stack = vec![(rootfs.to_path_buf(), meta)];
    while let Some((path, meta)) = stack.pop() {
        let mode = meta.permissions().mode() & 0o7777;
        if meta.is_dir() {
            if mode & 0o700 != 0o700 {
                fs::set_permissions(&path, fs::Permissions::from_mode(mode | 0o700)).map_err(io_err(&path))?;
            }
            for e in fs::read_dir(&path).map_err(io_err(&path))? {
                let e = e.map_err(io_err(&path))?;
                let p = e.path();
                let m = fs::symlink_metadata(&p).map_err(io_err(&p))?;
                stack.push((p, m));
            }
        } else if meta.is_file() && mode & 0o400 == 0 {
            fs::set_permissions(&path, fs::Permissions::from_mode(mode | 0o400)).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

/// Writes `rootfs` as a tar stream. Fifos, sockets and device nodes are
/// skipped and reported.
pub fn export_tree(rootfs: &Path, out: &mut dyn Write) -> Result<ExtractReport, LayerError> {
    let mut report = ExtractReport::default();
    let mut builder = tar::Builder::new(out);
    builder.follow_symlinks(false);
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let dir = rootfs.join(&rel);
        let mut names: Vec<_> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<Result<_, _>>()
            .map_err(io_err(&dir))?;
        names.sort();
        for name in names.into_iter().rev() {
            let rel = rel.join(&name);
            let host = rootfs.join(&rel);
            let meta = fs::symlink_metadata(&host).map_err(io_err(&host))?;
            let ft = meta.file_type();
            if ft.is_symlink() {
                let target = fs::read_link(&host).map_err(io_err(&host))?;
                let mut h = tar::Header::new_gnu();
                h.set_metadata(&meta);
                h.set_entry_type(EntryType::Symlink);
                h.set_size(0);
                // The builder would normalize a short target; long ones go
                // through a GNU long-link record, which keeps the bytes.
                if target.as_os_str().len() <= 100 {
                    h.set_link_name_literal(target.as_os_str().as_bytes()).map_err(io_err(&host))?;
                    builder.append_data(&mut h, &rel, io::empty()).map_err(io_err(&host))?;
                } else {
                    builder.append_link(&mut h, &rel, &target).map_err(io_err(&host))?;
                }
                report.entries += 1;
            } else if ft.is_dir() || ft.is_file() {
                builder.append_path_with_name(&host, &rel).map_err(io_err(&host))?;
                report.entries += 1;
                if ft.is_dir() {
                    stack.push(rel);
                }
            } else {
                log::warn!("export: skipping special file {}", rel.display());
                report.skipped.push((rel.display().to_string(), "special file".into()));
            }
        }
    }
    builder.into_inner().map_err(io_err(rootfs))?.flush().map_err(io_err(rootfs))?;
    Ok(report)
}

/// Extracts a tar stream (optionally gzip compressed) into `rootfs`.
pub fn import_tree(input: &mut dyn Read, rootfs: &Path) -> Result<ExtractReport, LayerError> {
    let mut data = Vec::new();
    input.read_to_end(&mut data).map_err(format_err("import"))?;
    if !data.is_empty() {
        // An archive ends with zero blocks; anything else that is shorter
        // than one header is corrupt.
        if data.len() < 512 {
            return Err(LayerError::Format {
                layer: "import".into(),
                msg: "truncated archive".into(),
            });
        }
    }
    let mut report = ExtractReport::default();
    let open = || decompress(BufReader::new(io::Cursor::new(data.as_slice())), "import");
    apply_layer(open, "import", rootfs, &ExtractionPolicy::default(), &mut report)?;
    Ok(report)
}

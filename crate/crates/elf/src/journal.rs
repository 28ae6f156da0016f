//! Append-only record of the original bytes of every patched file.
//!
//! On-disk format (all integers little endian):
//!
//! ```text
//! header:  "UDKJRNL\0"  u32 version (=1)
//! record:  u32 payload length, then payload:
//!          u8 kind, u16 path length, path bytes (relative to the rootfs),
//!          u64 original length, i64 mtime seconds, u32 mtime nanoseconds,
//!          [u8; 32] original sha256, [u8; 32] patched sha256,
//!          u32 range count, then per range: u64 offset, u32 length, bytes
//! ```
//!
//! A record is appended and synced before the file it describes is touched,
//! so an interrupted patch can still be reverted. A truncated trailing record
//! is ignored on read.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::PermissionsExt;
use std::path::{Component, Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::ElfError;

const MAGIC: &[u8; 8] = b"UDKJRNL\0";
const VERSION: u32 = 1;
/// Equal runs shorter than this are folded into the surrounding range.
const MERGE_GAP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    /// Interpreter, search path or DT_NEEDED edit of an ELF object.
    Elf = 1,
    /// String table edit of the container's dynamic loader.
    Loader = 2,
}

impl RecordKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(RecordKind::Elf),
            2 => Some(RecordKind::Loader),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalRecord {
    pub kind: RecordKind,
    /// Path relative to the rootfs.
    pub file: PathBuf,
    pub original_len: u64,
    pub original_mtime: (i64, u32),
    pub original_digest: [u8; 32],
    pub patched_digest: [u8; 32],
    /// Original bytes of every region that differs in the patched file.
    pub ranges: Vec<(u64, Vec<u8>)>,
}

impl JournalRecord {
    /// Builds the record describing the change from `original` to `patched`.
    pub fn describe(
        kind: RecordKind,
        file: PathBuf,
        original: &[u8],
        patched: &[u8],
        original_mtime: (i64, u32),
    ) -> Self {
        JournalRecord {
            kind,
            file,
            original_len: original.len() as u64,
            original_mtime,
            original_digest: sha256(original),
            patched_digest: sha256(patched),
            ranges: diff_ranges(original, patched),
        }
    }

    /// Reconstructs the original bytes from the patched ones.
    pub fn restore(&self, patched: &[u8]) -> Vec<u8> {
        let mut out = patched.to_vec();
        out.resize(self.original_len as usize, 0);
        for (off, bytes) in &self.ranges {
            let off = *off as usize;
            out[off..off + bytes.len()].copy_from_slice(bytes);
        }
        out
    }

    fn encode(&self) -> Vec<u8> {
        let path = self.file.as_os_str().as_bytes();
        let mut p = Vec::with_capacity(128 + path.len());
        p.push(self.kind as u8);
        p.extend_from_slice(&(path.len() as u16).to_le_bytes());
        p.extend_from_slice(path);
        p.extend_from_slice(&self.original_len.to_le_bytes());
        p.extend_from_slice(&self.original_mtime.0.to_le_bytes());
        p.extend_from_slice(&self.original_mtime.1.to_le_bytes());
        p.extend_from_slice(&self.original_digest);
        p.extend_from_slice(&self.patched_digest);
        p.extend_from_slice(&(self.ranges.len() as u32).to_le_bytes());
        for (off, bytes) in &self.ranges {
            p.extend_from_slice(&off.to_le_bytes());
            p.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            p.extend_from_slice(bytes);
        }
        let mut out = (p.len() as u32).to_le_bytes().to_vec();
        out.extend_from_slice(&p);
        out
    }

    fn decode(p: &[u8]) -> Option<Self> {
        let mut cur = Cursor { data: p, pos: 0 };
        let kind = RecordKind::from_u8(cur.take(1)?[0])?;
        let path_len = u16::from_le_bytes(cur.take(2)?.try_into().ok()?) as usize;
        let file = PathBuf::from(std::ffi::OsStr::from_bytes(cur.take(path_len)?));
        let original_len = cur.u64()?;
        let secs = cur.u64()? as i64;
        let nanos = cur.u32()?;
        let original_digest = cur.take(32)?.try_into().ok()?;
        let patched_digest = cur.take(32)?.try_into().ok()?;
        let n = cur.u32()? as usize;
        let mut ranges = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let off = cur.u64()?;
            let len = cur.u32()? as usize;
            ranges.push((off, cur.take(len)?.to_vec()));
        }
        Some(JournalRecord {
            kind,
            file,
            original_len,
            original_mtime: (secs, nanos),
            original_digest,
            patched_digest,
            ranges,
        })
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.data.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

fn diff_ranges(original: &[u8], patched: &[u8]) -> Vec<(u64, Vec<u8>)> {
    let common = original.len().min(patched.len());
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < common {
        if original[i] == patched[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < common && original[i] != patched[i] {
            i += 1;
        }
        match ranges.last_mut() {
            Some(last) if start - last.1 < MERGE_GAP => last.1 = i,
            _ => ranges.push((start, i)),
        }
    }
    // Bytes past the patched length are lost on truncation; keep them too.
    if original.len() > patched.len() {
        ranges.push((patched.len(), original.len()));
    }
    ranges
        .into_iter()
        .map(|(s, e)| (s as u64, original[s..e].to_vec()))
        .collect()
}

/// Outcome of reverting a journal.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RevertReport {
    pub restored: Vec<PathBuf>,
    /// Files whose content after restoration did not hash to the original,
    /// typically because they were modified after patching.
    pub mismatched: Vec<PathBuf>,
    /// Journaled files that no longer exist.
    pub missing: Vec<PathBuf>,
}

/// A patch journal stored outside the rootfs it describes.
#[derive(Debug, Clone)]
pub struct Journal {
    path: PathBuf,
}

fn mtime_of(meta: &fs::Metadata) -> (i64, u32) {
    use std::os::unix::fs::MetadataExt;
    (meta.mtime(), meta.mtime_nsec() as u32)
}

fn set_mtime(file: &File, (secs, nanos): (i64, u32)) -> std::io::Result<()> {
    let t = if secs >= 0 {
        UNIX_EPOCH + Duration::new(secs as u64, nanos)
    } else {
        UNIX_EPOCH - Duration::from_secs(secs.unsigned_abs()) + Duration::from_nanos(nanos.into())
    };
    file.set_modified(t)
}

/// Opens `path` for in-place writing, temporarily granting the owner write
/// permission when the file is read-only. Returns the mode to restore.
fn open_for_patch(path: &Path) -> std::io::Result<(File, Option<u32>)> {
    let meta = fs::symlink_metadata(path)?;
    let mode = meta.permissions().mode();
    let restore = if mode & 0o200 == 0 {
        fs::set_permissions(path, fs::Permissions::from_mode(mode | 0o200))?;
        Some(mode)
    } else {
        None
    };
    let file = OpenOptions::new().read(true).write(true).open(path)?;
    Ok((file, restore))
}

fn write_whole(path: &Path, bytes: &[u8], mtime: Option<(i64, u32)>) -> std::io::Result<()> {
    let (mut file, restore_mode) = open_for_patch(path)?;
    file.seek(SeekFrom::Start(0))?;
    file.write_all(bytes)?;
    file.set_len(bytes.len() as u64)?;
    if let Some(t) = mtime {
        set_mtime(&file, t)?;
    }
    file.sync_data()?;
    if let Some(mode) = restore_mode {
        fs::set_permissions(path, fs::Permissions::from_mode(mode))?;
    }
    Ok(())
}

/// Rejects paths that would leave the rootfs when joined to it.
fn check_relative(rel: &Path) -> Result<(), ElfError> {
    if rel
        .components()
        .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
    {
        Ok(())
    } else {
        Err(ElfError::Journal(format!("path {} is not rootfs relative", rel.display())))
    }
}

impl Journal {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Journal { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn exists(&self) -> bool {
        self.path.exists()
    }

    fn lock(&self) -> Result<File, ElfError> {
        let mut lock_path = self.path.clone().into_os_string();
        lock_path.push(".lock");
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(lock_path)?;
        f.lock()?;
        Ok(f)
    }

    fn read_unlocked(&self) -> Result<Vec<JournalRecord>, ElfError> {
        let mut data = Vec::new();
        match File::open(&self.path) {
            Ok(mut f) => {
                f.read_to_end(&mut data)?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        }
        if data.is_empty() {
            return Ok(Vec::new());
        }
        if data.len() < 12 || &data[..8] != MAGIC {
            return Err(ElfError::Journal(format!("{} is not a patch journal", self.path.display())));
        }
        let version = u32::from_le_bytes(data[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(ElfError::Journal(format!("unsupported journal version {version}")));
        }
        let mut records = Vec::new();
        let mut pos = 12;
        while pos + 4 <= data.len() {
            let len = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
            let Some(payload) = data.get(pos + 4..pos + 4 + len) else {
                break;
            };
            match JournalRecord::decode(payload) {
                Some(r) => records.push(r),
                None => return Err(ElfError::Journal("corrupt journal record".into())),
            }
            pos += 4 + len;
        }
        Ok(records)
    }

    pub fn records(&self) -> Result<Vec<JournalRecord>, ElfError> {
        let _guard = self.lock()?;
        self.read_unlocked()
    }

    fn append_unlocked(&self, record: &JournalRecord) -> Result<(), ElfError> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        if f.metadata()?.len() == 0 {
            f.write_all(MAGIC)?;
            f.write_all(&VERSION.to_le_bytes())?;
        }
        f.write_all(&record.encode())?;
        f.sync_data()?;
        Ok(())
    }

    /// Patches `rootfs/rel` with `patch` unless the file is already journaled.
    ///
    /// `patch` receives the current content and returns the new content, or
    /// `None` to leave the file alone. The record is persisted before the
    /// file is written. Returns true when the file was changed.
    pub fn patch_file<F>(&self, rootfs: &Path, rel: &Path, kind: RecordKind, patch: F) -> Result<bool, ElfError>
    where
        F: FnOnce(&[u8]) -> Result<Option<Vec<u8>>, ElfError>,
    {
        check_relative(rel)?;
        let _guard = self.lock()?;
        if self.read_unlocked()?.iter().any(|r| r.file == rel) {
            return Ok(false);
        }
        let host = rootfs.join(rel);
        let original = fs::read(&host)?;
        let Some(patched) = patch(&original)? else {
            return Ok(false);
        };
        if patched == original {
            return Ok(false);
        }
        let mtime = mtime_of(&fs::symlink_metadata(&host)?);
        let record = JournalRecord::describe(kind, rel.to_path_buf(), &original, &patched, mtime);
        self.append_unlocked(&record)?;
        write_whole(&host, &patched, None)?;
        Ok(true)
    }

    /// Restores every journaled file, newest first, then removes the journal.
    pub fn revert(&self, rootfs: &Path) -> Result<RevertReport, ElfError> {
        let guard = self.lock()?;
        let records = self.read_unlocked()?;
        let mut report = RevertReport::default();
        for record in records.iter().rev() {
            check_relative(&record.file)?;
            let host = rootfs.join(&record.file);
            let current = match fs::read(&host) {
                Ok(d) => d,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    report.missing.push(record.file.clone());
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let restored = record.restore(&current);
            write_whole(&host, &restored, Some(record.original_mtime))?;
            if sha256(&restored) == record.original_digest {
                report.restored.push(record.file.clone());
            } else {
                report.mismatched.push(record.file.clone());
            }
        }
        match fs::remove_file(&self.path) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        drop(guard);
        let mut lock_path = self.path.clone().into_os_string();
        lock_path.push(".lock");
        let _ = fs::remove_file(lock_path);
        Ok(report)
    }
}

/// Current time as journal mtime, for callers building records by hand.
pub fn now_mtime() -> (i64, u32) {
    let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    (d.as_secs() as i64, d.subsec_nanos())
}

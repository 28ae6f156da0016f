//! Reader for the dynamic loader's `ld.so.cache`.
//!
//! Three layouts exist in the wild: the classic `ld.so-1.7.0` table, the
//! `glibc-ld.so.cache1.1` table written by current glibc, and a combined
//! file holding a classic table followed by a new one. The new table wins
//! when both are present.

use std::path::{Path, PathBuf};

use crate::ElfError;

const CLASSIC_MAGIC: &[u8] = b"ld.so-1.7.0";
const NEW_MAGIC: &[u8] = b"glibc-ld.so.cache";
const NEW_VERSION: &[u8] = b"1.1";
const CLASSIC_HEADER: usize = 16;
const CLASSIC_ENTRY: usize = 12;
const NEW_HEADER: usize = 48;
const NEW_ENTRY: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheFormat {
    Classic,
    New,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub soname: String,
    pub path: String,
    /// Library type and ABI bits as stored by ldconfig.
    pub flags: i32,
}

/// The soname to path table of a container's loader cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LdSoCacheView {
    pub format: CacheFormat,
    pub entries: Vec<CacheEntry>,
}

impl LdSoCacheView {
    /// Paths of every entry as seen from the host, under `rootfs`.
    pub fn host_paths(&self, rootfs: &Path) -> Vec<(String, PathBuf)> {
        self.entries
            .iter()
            .map(|e| (e.soname.clone(), prefix(rootfs, &e.path)))
            .collect()
    }

    /// Distinct container directories holding cached libraries, in first-seen
    /// order, which is the order ldconfig sorted them by priority.
    pub fn directories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            let dir = match e.path.rfind('/') {
                Some(0) => "/".to_string(),
                Some(i) => e.path[..i].to_string(),
                None => continue,
            };
            if !out.contains(&dir) {
                out.push(dir);
            }
        }
        out
    }
}

/// Joins an absolute container path onto the rootfs.
pub fn prefix(rootfs: &Path, container_path: &str) -> PathBuf {
    rootfs.join(container_path.trim_start_matches('/'))
}

fn u32_at(d: &[u8], off: usize) -> Result<u32, ElfError> {
    d.get(off..off + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| ElfError::format("truncated ld.so.cache"))
}

fn string_at(d: &[u8], base: usize, off: u32) -> Result<String, ElfError> {
    let start = base
        .checked_add(off as usize)
        .filter(|&s| s < d.len())
        .ok_or_else(|| ElfError::format("ld.so.cache string offset out of range"))?;
    crate::raw::cstr(d, start, d.len())
}

fn parse_classic(d: &[u8]) -> Result<(Vec<CacheEntry>, usize), ElfError> {
    let n = u32_at(d, 12)? as usize;
    let strings = n
        .checked_mul(CLASSIC_ENTRY)
        .and_then(|s| s.checked_add(CLASSIC_HEADER))
        .filter(|&e| e <= d.len())
        .ok_or_else(|| ElfError::format("classic ld.so.cache table past end of file"))?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let at = CLASSIC_HEADER + i * CLASSIC_ENTRY;
        out.push(CacheEntry {
            flags: u32_at(d, at)? as i32,
            soname: string_at(d, strings, u32_at(d, at + 4)?)?,
            path: string_at(d, strings, u32_at(d, at + 8)?)?,
        });
    }
    Ok((out, strings))
}

fn parse_new(d: &[u8], base: usize) -> Result<Vec<CacheEntry>, ElfError> {
    let h = &d[base..];
    if !h.starts_with(NEW_MAGIC) || h.get(NEW_MAGIC.len()..NEW_MAGIC.len() + 3) != Some(NEW_VERSION) {
        return Err(ElfError::format("bad new-format ld.so.cache header"));
    }
    let n = u32_at(h, 20)? as usize;
    n.checked_mul(NEW_ENTRY)
        .and_then(|s| s.checked_add(NEW_HEADER))
        .filter(|&e| e <= h.len())
        .ok_or_else(|| ElfError::format("ld.so.cache table past end of file"))?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let at = NEW_HEADER + i * NEW_ENTRY;
        out.push(CacheEntry {
            flags: u32_at(h, at)? as i32,
            soname: string_at(h, 0, u32_at(h, at + 4)?)?,
            path: string_at(h, 0, u32_at(h, at + 8)?)?,
        });
    }
    Ok(out)
}

/// Decodes a cache image, detecting the layout from its magic.
pub fn parse_ld_so_cache_bytes(d: &[u8]) -> Result<LdSoCacheView, ElfError> {
    if d.starts_with(NEW_MAGIC) {
        return Ok(LdSoCacheView {
            format: CacheFormat::New,
            entries: parse_new(d, 0)?,
        });
    }
    if d.starts_with(CLASSIC_MAGIC) {
        let (classic, strings) = parse_classic(d)?;
        // A new table, when present, starts at the first 8-aligned offset
        // after the classic table where its magic appears.
        let mut pos = strings.next_multiple_of(8);
        while pos + NEW_HEADER <= d.len() {
            if d[pos..].starts_with(NEW_MAGIC) {
                return Ok(LdSoCacheView {
                    format: CacheFormat::Combined,
                    entries: parse_new(d, pos)?,
                });
            }
            pos += 8;
        }
        return Ok(LdSoCacheView {
            format: CacheFormat::Classic,
            entries: classic,
        });
    }
    Err(ElfError::format("unrecognized ld.so.cache magic"))
}

pub fn parse_ld_so_cache(path: impl AsRef<Path>) -> Result<LdSoCacheView, ElfError> {
    parse_ld_so_cache_bytes(&std::fs::read(path)?)
}

/// Writes a classic-layout cache. Used to build fixtures for old images.
pub fn write_classic(entries: &[(String, String, i32)]) -> Vec<u8> {
    let mut strings = Vec::new();
    let mut table = Vec::new();
    for (soname, path, flags) in entries {
        let key = strings.len() as u32;
        strings.extend_from_slice(soname.as_bytes());
        strings.push(0);
        let value = strings.len() as u32;
        strings.extend_from_slice(path.as_bytes());
        strings.push(0);
        table.extend_from_slice(&flags.to_le_bytes());
        table.extend_from_slice(&key.to_le_bytes());
        table.extend_from_slice(&value.to_le_bytes());
    }
    let mut out = CLASSIC_MAGIC.to_vec();
    out.resize(12, 0);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&table);
    out.extend_from_slice(&strings);
    out
}

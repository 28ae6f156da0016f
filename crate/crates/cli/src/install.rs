//! Engine support files: the preloadable interposer and anything else the
//! engines need beside the repository, installed once per repository.

use std::fs;
use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use udocker_core::repo::RepoLayout;
use udocker_pathmap::launch::INTERPOSER_FILE;

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MARKER_FILE: &str = "install.json";
/// Tool tarball used when no bundled files are found.
pub const ENV_TARBALL: &str = "UDOCKER_TARBALL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub version: String,
    /// sha256 of the installed interposer.
    pub sha256: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Installed {
    Fresh(Marker),
    Already(Marker),
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> anyhow::Error + '_ {
    move |e| anyhow::anyhow!("{}: {e}", path.display())
}

pub fn interposer_path(layout: &RepoLayout) -> PathBuf {
    layout.lib().join(INTERPOSER_FILE)
}

/// The marker, when it matches this version and the installed file.
pub fn current(layout: &RepoLayout) -> Option<Marker> {
    let marker: Marker = serde_json::from_slice(&fs::read(layout.lib().join(MARKER_FILE)).ok()?).ok()?;
    let lib = fs::read(interposer_path(layout)).ok()?;
    (marker.version == VERSION && marker.sha256 == sha256_hex(&lib)).then_some(marker)
}

/// Support files shipped next to the executable, as in a build tree or an
/// unpacked release.
pub fn bundled() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?;
    [
        dir.join(INTERPOSER_FILE),
        dir.join("deps").join(INTERPOSER_FILE),
        dir.join("../lib/udocker").join(INTERPOSER_FILE),
    ]
    .into_iter()
    .find(|p| p.is_file())
}

fn write_marker(layout: &RepoLayout, source: &str) -> anyhow::Result<Marker> {
    let lib = interposer_path(layout);
    let marker = Marker {
        version: VERSION.into(),
        sha256: sha256_hex(&fs::read(&lib).map_err(io(&lib))?),
        source: source.into(),
    };
    let path = layout.lib().join(MARKER_FILE);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&marker)?).map_err(io(&tmp))?;
    fs::rename(&tmp, &path).map_err(io(&path))?;
    Ok(marker)
}

fn place(src: &[u8], dest: &Path) -> anyhow::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    let tmp = dest.with_extension(format!("part{}", std::process::id()));
    fs::write(&tmp, src).map_err(io(&tmp))?;
    fs::set_permissions(&tmp, fs::Permissions::from_mode(0o755)).map_err(io(&tmp))?;
    fs::rename(&tmp, dest).map_err(io(dest))?;
    Ok(())
}

fn expected_checksum(tarball: &Path, given: Option<&str>) -> Result<String, CliError> {
    let text = match given {
        Some(g) => g.to_string(),
        None => {
            let side = PathBuf::from(format!("{}.sha256", tarball.display()));
            fs::read_to_string(&side).map_err(|_| {
                CliError::Integrity(format!("no checksum for {} (give --sha256 or {})", tarball.display(), side.display()))
            })?
        }
    };
    let hex = text.split_whitespace().next().unwrap_or("");
    let hex = hex.strip_prefix("sha256:").unwrap_or(hex).to_ascii_lowercase();
    if hex.len() != 64 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(CliError::Integrity(format!("malformed checksum {hex:?}")));
    }
    Ok(hex)
}

/// Files of a tool tarball, as `(dir, name, content)` with `dir` either
/// `bin` or `lib`.
fn unpack(data: &[u8]) -> anyhow::Result<Vec<(String, String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut archive = tar::Archive::new(flate2::read::GzDecoder::new(data));
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        if entry.header().entry_type().is_dir() {
            continue;
        }
        let parts: Vec<_> = path.components().collect();
        let ok = entry.header().entry_type().is_file()
            && parts.len() == 2
            && matches!(parts[0], Component::Normal(d) if d == "bin" || d == "lib")
            && matches!(parts[1], Component::Normal(_));
        if !ok {
            anyhow::bail!(CliError::Integrity(format!("unexpected tool tarball entry {}", path.display())));
        }
        let mut content = Vec::new();
        entry.read_to_end(&mut content)?;
        let dir = parts[0].as_os_str().to_string_lossy().into_owned();
        let name = parts[1].as_os_str().to_string_lossy().into_owned();
        out.push((dir, name, content));
    }
    if !out.iter().any(|(d, n, _)| d == "lib" && n == INTERPOSER_FILE) {
        anyhow::bail!(CliError::Integrity(format!("tool tarball has no lib/{INTERPOSER_FILE}")));
    }
    Ok(out)
}

/// Installs from a tool tarball after checking its sha256. Nothing is
/// written when the check fails.
pub fn from_tarball(layout: &RepoLayout, tarball: &Path, sha256: Option<&str>) -> anyhow::Result<Marker> {
    let expected = expected_checksum(tarball, sha256)?;
    let data = fs::read(tarball).map_err(|e| CliError::NotFound(format!("{}: {e}", tarball.display())))?;
    let actual = sha256_hex(&data);
    if actual != expected {
        anyhow::bail!(CliError::Integrity(format!(
            "{}: expected sha256 {expected}, content hashes to {actual}",
            tarball.display()
        )));
    }
    let files = unpack(&data)?;
    for (dir, name, content) in &files {
        let base = if dir == "bin" { layout.bin() } else { layout.lib() };
        place(content, &base.join(name))?;
    }
    write_marker(layout, &tarball.display().to_string())
}

/// Installs the bundled files.
pub fn from_bundle(layout: &RepoLayout, lib: &Path) -> anyhow::Result<Marker> {
    place(&fs::read(lib).map_err(io(lib))?, &interposer_path(layout))?;
    write_marker(layout, &lib.display().to_string())
}

/// Installs unless the current version is in place. `tarball` wins over
/// the bundled files, then `$UDOCKER_TARBALL`.
pub fn install(layout: &RepoLayout, tarball: Option<&Path>, sha256: Option<&str>, force: bool) -> anyhow::Result<Installed> {
    if !force {
        if let Some(m) = current(layout) {
            return Ok(Installed::Already(m));
        }
    }
    if let Some(t) = tarball {
        return from_tarball(layout, t, sha256).map(Installed::Fresh);
    }
    if let Some(lib) = bundled() {
        return from_bundle(layout, &lib).map(Installed::Fresh);
    }
    if let Some(t) = std::env::var_os(ENV_TARBALL).filter(|t| !t.is_empty()) {
        return from_tarball(layout, Path::new(&t), sha256).map(Installed::Fresh);
    }
    Err(CliError::NotFound(format!(
        "no support files to install: none next to the executable and no tool tarball given (--from or ${ENV_TARBALL})"
    ))
    .into())
}

/// The interposer to use for a run, installing it first when needed.
/// Engines that do not need it still work when nothing can be installed.
pub fn ensure(layout: &RepoLayout) -> Option<PathBuf> {
    match install(layout, None, None, false) {
        Ok(Installed::Fresh(m)) => log::info!("installed support files {} from {}", m.version, m.source),
        Ok(Installed::Already(_)) => {}
        Err(e) => {
            log::debug!("support files not installed: {e:#}");
            return None;
        }
    }
    Some(interposer_path(layout))
}

/// Writes the bundled files as a tool tarball with a `.sha256` sidecar.
/// Returns the checksum.
pub fn pack(out: &Path) -> anyhow::Result<String> {
    let lib = bundled().ok_or_else(|| CliError::NotFound("no bundled support files next to the executable".into()))?;
    let content = fs::read(&lib).map_err(io(&lib))?;
    let mut builder = tar::Builder::new(flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default()));
    let mut header = tar::Header::new_gnu();
    header.set_size(content.len() as u64);
    header.set_mode(0o755);
    header.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut header, format!("lib/{INTERPOSER_FILE}"), content.as_slice())?;
    let data = builder.into_inner()?.finish()?;
    fs::write(out, &data).map_err(io(out))?;
    let sum = sha256_hex(&data);
    let side = PathBuf::from(format!("{}.sha256", out.display()));
    let mut f = fs::File::create(&side).map_err(io(&side))?;
    writeln!(f, "{sum}  {}", out.file_name().map(|n| n.to_string_lossy()).unwrap_or_default())?;
    Ok(sum)
}

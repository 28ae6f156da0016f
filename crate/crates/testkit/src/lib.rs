//! Test fixtures. Nothing here depends on the runtime crates, so the
//! fixtures can serve as independent oracles for them.

pub mod cprog;
pub mod layerstack;
pub mod registry;
pub mod rootfs;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use udocker_pathmap::launch::INTERPOSER_FILE;

fn find_interposer(profile_dir: &Path) -> Option<PathBuf> {
    [profile_dir.join(INTERPOSER_FILE), profile_dir.join("deps").join(INTERPOSER_FILE)]
        .into_iter()
        .find(|p| p.is_file())
}

/// The preloadable interposer built in this workspace, brought up to date
/// first.
pub fn interposer_library() -> Option<PathBuf> {
    static LIB: OnceLock<Option<PathBuf>> = OnceLock::new();
    LIB.get_or_init(|| {
        let exe = std::env::current_exe().ok()?;
        // target/<profile>/deps/<test binary>
        let profile_dir = exe.ancestors().find(|a| a.file_name().is_some_and(|n| n != "deps" && a.join("deps").is_dir()))?;
        let target = profile_dir.parent()?;
        let cargo = std::env::var_os("CARGO").unwrap_or_else(|| "cargo".into());
        let mut cmd = Command::new(cargo);
        cmd.args(["build", "-q", "-p", "udocker-interposer", "--target-dir"]).arg(target);
        if profile_dir.file_name()? == "release" {
            cmd.arg("--release");
        }
        // Rebuilt every time so a stale library from an earlier build is
        // never used; a no-op when it is current.
        let built = cmd.status().map(|s| s.success()).unwrap_or(false);
        if !built {
            eprintln!("building the interposer failed, using any existing copy");
        }
        find_interposer(profile_dir)
    })
    .clone()
}

/// Lower-case hex sha256 of `data`, prefixed `sha256:`.
pub fn digest(data: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(data);
    let mut s = String::from("sha256:");
    for b in d.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

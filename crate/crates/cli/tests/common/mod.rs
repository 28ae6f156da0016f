#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use udocker_core::layers::export_tree;
use udocker_testkit::rootfs;

pub const BIN: &str = env!("CARGO_BIN_EXE_udocker");

/// A private repository and scratch space; the interposer is built first
/// so the command finds it next to itself.
pub struct Env {
    pub dir: tempfile::TempDir,
    pub repo: PathBuf,
}

impl Env {
    pub fn new() -> Self {
        udocker_testkit::interposer_library();
        let dir = tempfile::tempdir().unwrap();
        let repo = dir.path().join("repo");
        Env { dir, repo }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(BIN);
        c.args(args).env("UDOCKER_DIR", &self.repo).env_remove("UDOCKER_TARBALL").env_remove("UDOCKER_LOG");
        c.stdin(Stdio::null());
        c
    }

    pub fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    /// Stdout of a command that must succeed.
    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "udocker {args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Imports the fixture tree as a container called `name`; returns its
    /// id and root.
    pub fn import(&self, tarball: &Path, name: &str) -> (String, PathBuf) {
        let id = self.ok(&["import", tarball.to_str().unwrap(), "--name", name]).trim().to_string();
        let root = self.repo.join("containers").join(&id).join("ROOT");
        (id, root)
    }
}

/// Exports the fixture tree, after `extra` has added to it, as a tar
/// archive. None when the host lacks the programs it is made of.
pub fn base_tarball(dir: &Path, extra: impl FnOnce(&Path) -> bool) -> Option<PathBuf> {
    let root = dir.join("base");
    if !rootfs::build_base(&root) || !extra(&root) {
        eprintln!("skipped: fixture tree could not be built");
        return None;
    }
    let out = dir.join("base.tar");
    export_tree(&root, &mut fs::File::create(&out).unwrap()).unwrap();
    fs::remove_dir_all(&root).unwrap();
    Some(out)
}

/// Sorted file hashes of a tree.
pub fn hash_multiset(root: &Path) -> Vec<String> {
    let mut v: Vec<String> = rootfs::snapshot(root).into_values().collect();
    v.sort();
    v
}

pub fn snapshot(root: &Path) -> BTreeMap<String, String> {
    rootfs::snapshot(root)
}

pub fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn errtext(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

// Whole-tree patching of a minimal container: one program, two libraries
// and the loader, copied from the host.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use udocker_elf::journal::sha256;
use udocker_elf::loader::is_neutralized;
use udocker_elf::tree::{patch_one, patch_tree, resolve_in_root, TreeSpec};
use udocker_elf::{read_elf, Journal, RecordKind};

const LIBDIR: &str = "/lib/x86_64-linux-gnu";

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
int main(void) {
    volatile double x = 2.0;
    printf("sqrt=%.3f\n", sqrt(x));
    return 0;
}
"#;

fn host_lib(name: &str) -> Option<PathBuf> {
    [LIBDIR, "/usr/lib/x86_64-linux-gnu", "/lib64", "/usr/lib64"]
        .iter()
        .map(|d| Path::new(d).join(name))
        .find(|p| p.exists())
}

/// Builds the tree, or returns None when the host lacks a compiler or the
/// expected glibc layout.
fn minimal_rootfs(root: &Path) -> Option<()> {
    let loader = Path::new("/lib64/ld-linux-x86-64.so.2");
    if !loader.exists() {
        return None;
    }
    let libc = host_lib("libc.so.6")?;
    let libm = host_lib("libm.so.6")?;
    fs::create_dir_all(root.join("lib64")).unwrap();
    fs::create_dir_all(root.join(LIBDIR.trim_start_matches('/'))).unwrap();
    fs::create_dir_all(root.join("bin")).unwrap();
    fs::copy(loader, root.join("lib64/ld-linux-x86-64.so.2")).unwrap();
    fs::copy(libc, root.join("lib/x86_64-linux-gnu/libc.so.6")).unwrap();
    fs::copy(libm, root.join("lib/x86_64-linux-gnu/libm.so.6")).unwrap();
    let src = root.join("../prog.c");
    fs::write(&src, PROGRAM).unwrap();
    let ok = Command::new("cc")
        .arg("-O1")
        .arg("-o")
        .arg(root.join("bin/prog"))
        .arg(&src)
        .arg("-lm")
        .status()
        .ok()?
        .success();
    ok.then_some(())
}

fn hashes(root: &Path) -> BTreeMap<PathBuf, [u8; 32]> {
    let mut out = BTreeMap::new();
    for dir in ["bin", "lib64", "lib/x86_64-linux-gnu"] {
        for e in fs::read_dir(root.join(dir)).unwrap() {
            let p = e.unwrap().path();
            out.insert(p.clone(), sha256(&fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn tree_patch_runs_from_container_and_reverts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ROOT");
    if minimal_rootfs(&root).is_none() {
        eprintln!("skipped: no compiler or glibc layout");
        return;
    }
    let before = hashes(&root);
    let journal = Journal::new(dir.path().join("patch.journal"));
    let spec = TreeSpec::new(&root, vec![LIBDIR.into()]);

    let report = patch_tree(&spec, &journal).unwrap();
    let records = journal.records().unwrap();
    let elf: Vec<_> = records.iter().filter(|r| r.kind == RecordKind::Elf).collect();
    assert_eq!(elf.len(), 3, "{report:?}");
    assert_eq!(records.iter().filter(|r| r.kind == RecordKind::Loader).count(), 1);
    assert!(is_neutralized(&fs::read(root.join("lib64/ld-linux-x86-64.so.2")).unwrap()));

    let info = read_elf(root.join("bin/prog")).unwrap();
    let loader = root.join("lib64/ld-linux-x86-64.so.2");
    assert_eq!(info.interpreter.as_deref(), Some(loader.to_str().unwrap()));
    let libdir = root.join("lib/x86_64-linux-gnu");
    assert!(info.runpath.iter().any(|p| Path::new(p) == libdir), "{:?}", info.runpath);

    let out = Command::new(root.join("bin/prog")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "sqrt=1.414\n");

    // A second pass finds nothing left to do.
    let again = patch_tree(&spec, &journal).unwrap();
    assert!(again.patched.is_empty() && again.loaders.is_empty(), "{again:?}");
    assert_eq!(journal.records().unwrap().len(), records.len());

    let rev = journal.revert(&root).unwrap();
    assert_eq!(rev.restored.len(), 4);
    assert!(rev.mismatched.is_empty() && rev.missing.is_empty());
    assert_eq!(hashes(&root), before);
    assert!(!journal.exists());
}

#[test]
fn single_program_patch_touches_only_it_and_its_loader() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ROOT");
    if minimal_rootfs(&root).is_none() {
        eprintln!("skipped: no compiler or glibc layout");
        return;
    }
    let before = hashes(&root);
    let journal = Journal::new(dir.path().join("patch.journal"));
    let spec = TreeSpec::new(&root, vec![LIBDIR.into()]);
    let report = patch_one(&spec, &journal, Path::new("bin/prog")).unwrap();
    assert_eq!(report.patched, vec![PathBuf::from("bin/prog")]);
    assert_eq!(report.loaders, vec![PathBuf::from("lib64/ld-linux-x86-64.so.2")]);
    assert!(patch_one(&spec, &journal, Path::new("bin/prog")).unwrap().patched.is_empty());
    assert!(patch_one(&spec, &journal, Path::new("../etc/passwd")).is_err());
    journal.revert(&root).unwrap();
    assert_eq!(hashes(&root), before);
}

#[test]
fn symlinked_loader_is_followed_inside_the_root() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ROOT");
    fs::create_dir_all(root.join("usr/lib")).unwrap();
    fs::write(root.join("usr/lib/ld.so"), b"").unwrap();
    std::os::unix::fs::symlink("usr/lib", root.join("lib")).unwrap();
    std::os::unix::fs::symlink("/lib/ld.so", root.join("ld")).unwrap();
    assert_eq!(resolve_in_root(&root, "/ld").as_deref(), Some("/usr/lib/ld.so"));
}

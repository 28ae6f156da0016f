// Patches real compiler output and checks the result with readelf, ldconfig
// and by running it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use udocker_elf::journal::sha256;
use udocker_elf::ldcache::{parse_ld_so_cache, write_classic, CacheFormat};
use udocker_elf::loader::{host_references, neutralize_loader};
use udocker_elf::{apply_edit, read_elf, ElfEdit, ElfError, Journal, RecordKind};

const HOST_LOADER: &str = "/lib64/ld-linux-x86-64.so.2";

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
int main(int argc, char **argv) {
    volatile double x = 2.0;
    printf("sqrt=%.3f args=%d\n", sqrt(x), argc);
    return 0;
}
"#;

fn have(tool: &str) -> bool {
    Command::new("sh")
        .arg("-c")
        .arg(format!("command -v {tool}"))
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn compile(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let src = dir.join(format!("{name}.c"));
    fs::write(&src, PROGRAM).unwrap();
    let out = dir.join(name);
    let status = Command::new("cc")
        .arg("-O1")
        .arg("-o")
        .arg(&out)
        .arg(&src)
        .args(extra)
        .arg("-lm")
        .status()
        .expect("run cc");
    assert!(status.success());
    out
}

struct Dump {
    interpreter: Option<String>,
    needed: Vec<String>,
    runpath: Vec<String>,
    rpath: Vec<String>,
}

fn bracketed(line: &str) -> Option<String> {
    let start = line.find('[')? + 1;
    let end = line.rfind(']')?;
    Some(line[start..end].to_string())
}

fn readelf(path: &Path) -> Dump {
    let run = |flag: &str| {
        let out = Command::new("readelf").arg("-W").arg(flag).arg(path).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let mut dump = Dump {
        interpreter: None,
        needed: Vec::new(),
        runpath: Vec::new(),
        rpath: Vec::new(),
    };
    for line in run("-l").lines() {
        if line.contains("Requesting program interpreter") {
            dump.interpreter = bracketed(line).map(|s| s.trim_start_matches("Requesting program interpreter: ").to_string());
        }
    }
    let split = |s: String| s.split(':').filter(|p| !p.is_empty()).map(String::from).collect::<Vec<_>>();
    for line in run("-d").lines() {
        if line.contains("(NEEDED)") {
            dump.needed.push(bracketed(line).unwrap());
        } else if line.contains("(RUNPATH)") {
            dump.runpath.extend(split(bracketed(line).unwrap()));
        } else if line.contains("(RPATH)") {
            dump.rpath.extend(split(bracketed(line).unwrap()));
        }
    }
    dump
}

fn run(path: &Path) -> (bool, String) {
    let out = Command::new(path).arg("one").output().unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn read_elf_agrees_with_readelf() {
    if !have("cc") || !have("readelf") {
        eprintln!("skipping: cc or readelf missing");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let dynamic = compile(dir.path(), "dyn", &["-Wl,-rpath,/opt/x:/opt/y"]);
    let info = read_elf(&dynamic).unwrap();
    let dump = readelf(&dynamic);
    assert_eq!(info.interpreter, dump.interpreter);
    assert_eq!(info.interpreter.as_deref(), Some(HOST_LOADER));
    assert_eq!(info.needed, dump.needed);
    assert_eq!(info.runpath, dump.runpath);
    assert_eq!(info.rpath, dump.rpath);
    assert!(info.is_dynamic);

    let stat = compile(dir.path(), "static", &["-static"]);
    let info = read_elf(&stat).unwrap();
    assert_eq!(info.interpreter, None);
    assert!(info.needed.is_empty());
    assert!(!info.is_dynamic);

    let text = dir.path().join("hello");
    fs::write(&text, "hello").unwrap();
    assert!(matches!(read_elf(&text), Err(ElfError::NotElf)));
}

#[test]
fn interpreter_runpath_and_needed_edits_keep_binary_runnable() {
    if !have("cc") || !have("readelf") {
        eprintln!("skipping: cc or readelf missing");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = compile(dir.path(), "app", &[]);
    let pristine = fs::read(&bin).unwrap();

    // A loader copy at a path much longer than the original PT_INTERP.
    let root = dir.path().join("a-rather-long-container-directory-name/ROOT");
    fs::create_dir_all(root.join("lib64")).unwrap();
    let loader = root.join("lib64/ld-linux-x86-64.so.2");
    fs::copy(fs::canonicalize(HOST_LOADER).unwrap(), &loader).unwrap();
    let libm = fs::canonicalize("/lib/x86_64-linux-gnu/libm.so.6").unwrap();

    let edit = ElfEdit {
        interpreter: Some(loader.to_str().unwrap().to_string()),
        search_path: Some(vec![format!("{}/usr/lib64", root.display()), "/lib/x86_64-linux-gnu".into()]),
        needed: BTreeMap::from([("libm.so.6".to_string(), libm.to_str().unwrap().to_string())]),
    };

    let journal = Journal::new(dir.path().join("patch.journal"));
    let changed = journal
        .patch_file(dir.path(), Path::new("app"), RecordKind::Elf, |data| {
            Ok(apply_edit(data, &edit)?.data)
        })
        .unwrap();
    assert!(changed);

    let dump = readelf(&bin);
    let info = read_elf(&bin).unwrap();
    assert_eq!(dump.interpreter, edit.interpreter);
    assert_eq!(info.interpreter, edit.interpreter);
    assert_eq!(dump.runpath, *edit.search_path.as_ref().unwrap());
    assert_eq!(info.runpath, dump.runpath);
    assert_eq!(dump.needed, vec![libm.to_str().unwrap().to_string(), "libc.so.6".to_string()]);
    assert_eq!(info.needed, dump.needed);

    let (ok, out) = run(&bin);
    assert!(ok);
    assert_eq!(out, "sqrt=1.414 args=2\n");

    // A second, larger edit reuses the appended segment.
    let patched_len = fs::metadata(&bin).unwrap().len();
    let data = fs::read(&bin).unwrap();
    let mut bigger = edit.clone();
    bigger.search_path = Some(vec![format!("{}/usr/lib64/and/a/few/more/components", root.display())]);
    let again = apply_edit(&data, &bigger).unwrap().data.unwrap();
    assert!((again.len() as u64) < patched_len + 4096);
    fs::write(&bin, &again).unwrap();
    assert_eq!(readelf(&bin).runpath, *bigger.search_path.as_ref().unwrap());
    assert!(run(&bin).0);

    // Identical values are a no-op.
    let same = ElfEdit {
        interpreter: bigger.interpreter.clone(),
        ..Default::default()
    };
    assert_eq!(apply_edit(&again, &same).unwrap().data, None);
    assert_eq!(apply_edit(&again, &ElfEdit::default()).unwrap().data, None);

    let report = journal.revert(dir.path()).unwrap();
    assert_eq!(report.restored, vec![PathBuf::from("app")]);
    assert_eq!(sha256(&fs::read(&bin).unwrap()), sha256(&pristine));
}

#[test]
fn short_interpreter_is_patched_in_place() {
    if !have("cc") {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = compile(dir.path(), "app", &[]);
    let data = fs::read(&bin).unwrap();
    let edit = ElfEdit {
        interpreter: Some("/lib/ld.so".into()),
        ..Default::default()
    };
    let out = apply_edit(&data, &edit).unwrap().data.unwrap();
    assert_eq!(out.len(), data.len());
    assert_eq!(
        udocker_elf::ElfFile::parse(&out).unwrap().info().unwrap().interpreter.as_deref(),
        Some("/lib/ld.so")
    );
}

#[test]
fn edits_on_static_binaries_are_refused() {
    if !have("cc") {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = compile(dir.path(), "static", &["-static"]);
    let data = fs::read(&bin).unwrap();
    let edit = ElfEdit {
        interpreter: Some("/x".into()),
        ..Default::default()
    };
    assert!(matches!(apply_edit(&data, &edit), Err(ElfError::Unsupported(_))));
}

#[test]
fn unmatched_rename_is_reported_without_change() {
    if !have("cc") {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = compile(dir.path(), "app", &[]);
    let data = fs::read(&bin).unwrap();
    let edit = ElfEdit {
        needed: BTreeMap::from([("libnothere.so.1".to_string(), "/x.so".to_string())]),
        ..Default::default()
    };
    let outcome = apply_edit(&data, &edit).unwrap();
    assert_eq!(outcome.data, None);
    assert_eq!(outcome.unmatched_needed, vec!["libnothere.so.1".to_string()]);
}

#[test]
fn neutralized_loader_ignores_host_locations() {
    if !have("cc") || !Path::new(HOST_LOADER).exists() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = compile(dir.path(), "app", &[]);
    let original = fs::read(fs::canonicalize(HOST_LOADER).unwrap()).unwrap();
    assert!(host_references(&original).iter().any(|r| r == "/etc/ld.so.cache"));
    let patched = neutralize_loader(&original).unwrap();
    assert!(host_references(&patched).is_empty());
    let ld = dir.path().join("ld.so");
    fs::write(&ld, &patched).unwrap();
    Command::new("chmod").arg("755").arg(&ld).status().unwrap();

    // Without a library path nothing can be found.
    let out = Command::new(&ld).arg(&bin).env_remove("LD_LIBRARY_PATH").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot open shared object"));

    let out = Command::new(&ld)
        .arg("--library-path")
        .arg("/lib/x86_64-linux-gnu")
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "sqrt=1.414 args=1\n");
}

/// Parses `ldconfig -p` output into (soname, path) pairs.
fn ldconfig_print(cache: &Path) -> Option<Vec<(String, String)>> {
    let out = Command::new("/sbin/ldconfig").arg("-p").arg("-C").arg(cache).output().ok()?;
    if !out.status.success() {
        return None;
    }
    let text = String::from_utf8(out.stdout).ok()?;
    Some(
        text.lines()
            .skip(1)
            .filter_map(|l| {
                let (left, path) = l.split_once(" => ")?;
                let soname = left.trim().split(" (").next()?.to_string();
                Some((soname, path.trim().to_string()))
            })
            .collect(),
    )
}

#[test]
fn cache_parser_matches_ldconfig_on_fixture_rootfs() {
    if !have("cc") || !Path::new("/sbin/ldconfig").exists() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let libdir = root.join("usr/lib64");
    fs::create_dir_all(&libdir).unwrap();
    fs::create_dir_all(root.join("etc")).unwrap();
    fs::write(root.join("etc/ld.so.conf"), "/usr/lib64\n").unwrap();
    for name in ["alpha", "beta", "delta"] {
        let src = dir.path().join(format!("{name}.c"));
        fs::write(&src, format!("int {name}(void) {{ return 1; }}\n")).unwrap();
        let soname = format!("lib{name}.so.1");
        let status = Command::new("cc")
            .args(["-shared", "-fPIC", "-o"])
            .arg(libdir.join(&soname))
            .arg(format!("-Wl,-soname,{soname}"))
            .arg(&src)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let status = Command::new("/sbin/ldconfig")
        .arg("-r")
        .arg(&root)
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    if !status.success() {
        eprintln!("skipping: ldconfig -r needs chroot privileges");
        return;
    }
    let cache = root.join("etc/ld.so.cache");
    let view = parse_ld_so_cache(&cache).unwrap();
    assert_eq!(view.format, CacheFormat::New);
    let ours: Vec<(String, String)> = view.entries.iter().map(|e| (e.soname.clone(), e.path.clone())).collect();
    let oracle = ldconfig_print(&cache).unwrap();
    assert_eq!(ours.len(), 3);
    assert_eq!(ours, oracle);
    assert_eq!(
        view.host_paths(&root)[0].1,
        root.join("usr/lib64").join(&ours[0].0)
    );
}

#[test]
fn cache_parser_matches_ldconfig_on_host_and_classic_caches() {
    let host = Path::new("/etc/ld.so.cache");
    if host.exists() && Path::new("/sbin/ldconfig").exists() {
        let view = parse_ld_so_cache(host).unwrap();
        let ours: Vec<(String, String)> = view.entries.iter().map(|e| (e.soname.clone(), e.path.clone())).collect();
        assert_eq!(Some(ours), ldconfig_print(host));
    }
    let dir = tempfile::tempdir().unwrap();
    let classic = dir.path().join("classic.cache");
    fs::write(
        &classic,
        write_classic(&[
            ("libm.so.6".into(), "/usr/lib64/libm.so.6".into(), 0x0303),
            ("libc.so.6".into(), "/usr/lib64/libc.so.6".into(), 0x0303),
        ]),
    )
    .unwrap();
    let view = parse_ld_so_cache(&classic).unwrap();
    assert_eq!(view.format, CacheFormat::Classic);
    assert_eq!(
        view.host_paths(Path::new("/repo/ROOT"))[0].1,
        PathBuf::from("/repo/ROOT/usr/lib64/libm.so.6")
    );
    let empty = dir.path().join("empty.cache");
    fs::write(&empty, b"").unwrap();
    assert!(matches!(parse_ld_so_cache(&empty), Err(ElfError::Format(_))));
}

mod edits_touch_nothing_else {
    use super::*;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    const DT_NEEDED: u64 = 1;
    const DT_STRTAB: u64 = 5;
    const DT_STRSZ: u64 = 10;
    const DT_RUNPATH: u64 = 29;

    fn fixture() -> Option<&'static Vec<u8>> {
        static BIN: OnceLock<Option<Vec<u8>>> = OnceLock::new();
        BIN.get_or_init(|| {
            if !have("cc") {
                return None;
            }
            let dir = tempfile::tempdir().unwrap();
            Some(fs::read(compile(dir.path(), "app", &[])).unwrap())
        })
        .as_ref()
    }

    fn stable_entries(data: &[u8]) -> Vec<(u64, u64)> {
        udocker_elf::ElfFile::parse(data)
            .unwrap()
            .dynamic()
            .unwrap()
            .into_iter()
            .filter(|e| ![DT_NEEDED, DT_STRTAB, DT_STRSZ, DT_RUNPATH, 0].contains(&e.tag))
            .map(|e| (e.tag, e.val))
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn requested_fields_change_and_others_survive(
            interp in proptest::option::of("/[a-z]{1,60}(/[a-z0-9.-]{1,40}){0,3}"),
            runpath in proptest::option::of(proptest::collection::vec("/[a-z0-9]{1,30}", 1..4)),
            rename in proptest::option::of("/[a-z]{1,50}/libm\\.so\\.6"),
        ) {
            let Some(original) = fixture() else { return Ok(()); };
            let before = udocker_elf::ElfFile::parse(original).unwrap().info().unwrap();
            let edit = ElfEdit {
                interpreter: interp.clone(),
                search_path: runpath.clone(),
                needed: rename.iter().map(|r| ("libm.so.6".to_string(), r.clone())).collect(),
            };
            let outcome = apply_edit(original, &edit).unwrap();
            let patched = outcome.data.clone().unwrap_or_else(|| original.clone());
            let after = udocker_elf::ElfFile::parse(&patched).unwrap().info().unwrap();

            prop_assert_eq!(after.interpreter, interp.or(before.interpreter.clone()));
            prop_assert_eq!(after.runpath, runpath.unwrap_or(before.runpath.clone()));
            let expect_needed: Vec<String> = before
                .needed
                .iter()
                .map(|n| if n == "libm.so.6" { rename.clone().unwrap_or(n.clone()) } else { n.clone() })
                .collect();
            prop_assert_eq!(after.needed, expect_needed);
            prop_assert_eq!(after.rpath, before.rpath);
            prop_assert_eq!(after.soname, before.soname);
            prop_assert_eq!(stable_entries(&patched), stable_entries(original));
        }
    }
}

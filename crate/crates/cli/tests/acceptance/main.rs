// Acceptance checks for the whole runtime. Runs as a plain program and
// prints one PASS or FAIL line per criterion.

#[path = "../common/mod.rs"]
mod common;
mod fuzz;
mod modes;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::json;
use sha2::{Digest, Sha256};
use udocker_cli::{parse, Operation};
use udocker_core::bench::ratio_of;
use udocker_core::engine::loader::container_lib_dirs;
use udocker_core::layers::{flatten_bytes, ExtractionPolicy};
use udocker_core::metadata::{build_exec_spec, ContainerConfig, HostContext, Overrides};
use udocker_core::registry::{ClientOptions, RegistryClient};
use udocker_core::{ExecMode, ImageRef, Repo};
use udocker_elf::tree::{patch_tree, TreeSpec};
use udocker_elf::{apply_edit, read_elf, ElfEdit, Journal, RecordKind};
use udocker_pathmap::Bind;
use udocker_testkit::layerstack::{self, layer_tar, oracle, walk, Layer, Op};
use udocker_testkit::registry::{FixtureImage, FixtureRegistry};
use udocker_testkit::{cprog, rootfs};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// 1

fn flatten_oracle() -> Check {
    let cases = Cell::new(0usize);
    let config = Config {
        cases: 200,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner
        .run(&layerstack::stack(2, 5), |stack: Vec<Layer>| {
            let dir = tempfile::tempdir().unwrap();
            let blobs: Vec<Vec<u8>> = stack.iter().map(layer_tar).collect();
            flatten_bytes(&blobs, dir.path(), &ExtractionPolicy::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            cases.set(cases.get() + 1);
            if walk(dir.path()) != oracle(&stack) {
                return Err(TestCaseError::fail("flattened tree differs from sequential extraction"));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{} stacks of 2-5 layers equal the sequential oracle", cases.get()))
}

// 2

fn file_op(path: &str, content: &str) -> Op {
    Op::File {
        path: path.into(),
        content: content.as_bytes().to_vec(),
        mode: 0o644,
    }
}

fn pull_integrity() -> Check {
    let layers = [
        Layer {
            ops: vec![Op::Dir { path: "etc".into(), mode: 0o755 }, file_op("etc/one", "1")],
        },
        Layer {
            ops: vec![Op::Dir { path: "usr".into(), mode: 0o755 }, file_op("usr/two", "2")],
        },
        Layer {
            ops: vec![Op::Whiteout { path: "etc/one".into() }, file_op("three", "3")],
        },
    ];
    let img = FixtureImage::from_layers(json!({"config": {"Cmd": ["/bin/sh"]}}), &layers);
    let client = RegistryClient::new(ClientOptions {
        insecure: true,
        backoff: Duration::from_millis(10),
        ..ClientOptions::default()
    });
    let reg = FixtureRegistry::start();
    reg.add_image("team/app", "latest", &img);
    let image: ImageRef = format!("{}/team/app", reg.host()).parse().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let repo = Repo::open(dir.path()).unwrap();
    let report = client.pull(&repo, &image).map_err(|e| e.to_string())?;
    ensure(report.layers.len() == 3, "expected three layers")?;
    for d in &report.layers {
        let data = fs::read(repo.layer_path(d).unwrap()).map_err(|e| e.to_string())?;
        let hex: String = Sha256::digest(&data).iter().map(|b| format!("{b:02x}")).collect();
        ensure(d == &format!("sha256:{hex}"), format!("stored blob {d} hashes to {hex}"))?;
    }
    ensure(repo.images().unwrap() == vec![image.clone()], "image not registered")?;

    let mut blobs = img.layer_digests();
    blobs.push(format!("sha256:{}", hex_of(&img.config)));
    for victim in &blobs {
        let reg = FixtureRegistry::start();
        reg.add_image("team/app", "latest", &img);
        reg.tamper(victim);
        let image: ImageRef = format!("{}/team/app", reg.host()).parse().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let repo = Repo::open(dir.path()).unwrap();
        ensure(client.pull(&repo, &image).is_err(), format!("pull with {victim} corrupted succeeded"))?;
        ensure(repo.images().unwrap().is_empty(), format!("image registered despite corrupt {victim}"))?;
        ensure(!repo.has_layer(victim), format!("corrupt {victim} kept"))?;
    }
    Ok(format!("3 layers verified; each of {} corrupted blobs aborts with nothing registered", blobs.len()))
}

fn hex_of(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

// 3

const ELF_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
int main(int argc, char **argv) {
    volatile double x = 2.0;
    printf("sqrt=%.3f args=%d\n", sqrt(x), argc);
    return 0;
}
"#;

/// Interpreter, needed entries and run path as readelf prints them.
fn readelf(path: &Path) -> Result<(Option<String>, Vec<String>, Vec<String>), String> {
    let run = |flag: &str| -> Result<String, String> {
        let out = Command::new("readelf").args(["-W", flag]).arg(path).output().map_err(|e| e.to_string())?;
        ensure(out.status.success(), String::from_utf8_lossy(&out.stderr))?;
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    };
    let inner = |l: &str| l[l.find('[').unwrap() + 1..l.rfind(']').unwrap()].to_string();
    let mut interp = None;
    for l in run("-l")?.lines().filter(|l| l.contains("Requesting program interpreter")) {
        interp = Some(inner(l).trim_start_matches("Requesting program interpreter: ").to_string());
    }
    let (mut needed, mut runpath) = (Vec::new(), Vec::new());
    for l in run("-d")?.lines() {
        if l.contains("(NEEDED)") {
            needed.push(inner(l));
        } else if l.contains("(RUNPATH)") {
            runpath.extend(inner(l).split(':').map(String::from));
        }
    }
    Ok((interp, needed, runpath))
}

fn elf_round_trip() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("app");
    if !cprog::compile(ELF_PROGRAM, &bin, &["-lm"]) {
        return Err("no C compiler".into());
    }
    let pristine = fs::read(&bin).unwrap();
    let root = dir.path().join("a-container-directory-with-a-long-name/ROOT");
    fs::create_dir_all(root.join("lib64")).unwrap();
    let loader = root.join("lib64/ld-linux-x86-64.so.2");
    fs::copy(fs::canonicalize("/lib64/ld-linux-x86-64.so.2").map_err(|e| e.to_string())?, &loader).unwrap();
    let libm = fs::canonicalize("/lib/x86_64-linux-gnu/libm.so.6").map_err(|e| e.to_string())?;
    let edit = ElfEdit {
        interpreter: Some(loader.to_string_lossy().into_owned()),
        search_path: Some(vec![format!("{}/usr/lib64", root.display()), "/lib/x86_64-linux-gnu".into()]),
        needed: BTreeMap::from([("libm.so.6".to_string(), libm.to_string_lossy().into_owned())]),
    };
    let journal = Journal::new(dir.path().join("patch.journal"));
    journal
        .patch_file(dir.path(), Path::new("app"), RecordKind::Elf, |data| Ok(apply_edit(data, &edit)?.data))
        .map_err(|e| e.to_string())?;
    let (interp, needed, runpath) = readelf(&bin)?;
    ensure(interp == edit.interpreter, format!("readelf interpreter {interp:?}"))?;
    ensure(&runpath == edit.search_path.as_ref().unwrap(), format!("readelf runpath {runpath:?}"))?;
    ensure(needed.first() == Some(&libm.to_string_lossy().into_owned()), format!("readelf needed {needed:?}"))?;
    let ours = read_elf(&bin).map_err(|e| e.to_string())?;
    ensure(ours.interpreter == interp && ours.needed == needed && ours.runpath == runpath, "reader disagrees with readelf")?;
    let out = Command::new(&bin).output().map_err(|e| e.to_string())?;
    ensure(
        out.status.success() && out.stdout == b"sqrt=1.414 args=1\n",
        format!("patched binary printed {:?}", String::from_utf8_lossy(&out.stdout)),
    )?;
    journal.revert(dir.path()).map_err(|e| e.to_string())?;
    ensure(fs::read(&bin).unwrap() == pristine, "single binary not restored")?;

    // A whole tree: every patched file must come back.
    let tree = dir.path().join("tree/ROOT");
    ensure(rootfs::build_base(&tree), "fixture tree could not be built")?;
    let before = rootfs::snapshot(&tree);
    let journal = Journal::new(dir.path().join("tree/patch.journal"));
    let report = patch_tree(&TreeSpec::new(&tree, container_lib_dirs(&tree)), &journal).map_err(|e| e.to_string())?;
    let touched = report.patched.len() + report.loaders.len();
    ensure(touched > 0, "nothing patched in the tree")?;
    let changed = rootfs::snapshot(&tree).iter().filter(|(k, v)| before.get(*k) != Some(v)).count();
    let r = journal.revert(&tree).map_err(|e| e.to_string())?;
    let after = rootfs::snapshot(&tree);
    let equal = before.iter().filter(|(k, v)| after.get(*k) == Some(v)).count();
    ensure(after == before, format!("{equal}/{} files equal after revert", before.len()))?;
    Ok(format!(
        "readelf confirms interpreter, runpath and needed rename; binary runs; {touched} tree files patched ({changed} changed), {} restored, {equal}/{} files equal",
        r.restored.len(),
        before.len()
    ))
}

// 4

fn containment() -> Check {
    let p1 = fuzz::run(ExecMode::P1, 10_000, 0x5eed).ok_or("fixture could not be built")?;
    let p2 = fuzz::run(ExecMode::P2, 2_000, 0xfeed).ok_or("fixture could not be built")?;
    for (mode, r) in [("P1", &p1), ("P2", &p2)] {
        ensure(
            r.clean(),
            format!(
                "{mode}: exit {} escapes {:?} cwd {:?} model {:?}",
                r.exit_code, r.escapes, r.cwd_mismatches, r.model_errors
            ),
        )?;
    }
    ensure(p1.ops >= 10_000, format!("only {} operations ran", p1.ops))?;
    Ok(format!(
        "P1 {} ops, {} fds checked, 0 escapes, getcwd matched every step; P2 {} ops, {} fds checked",
        p1.ops, p1.fds_checked, p2.ops, p2.fds_checked
    ))
}

// 5

fn parity() -> Check {
    let r = modes::parity().ok_or("fixture could not be built")?;
    ensure(r.differences.is_empty(), r.differences.join("; "))?;
    let mut s = format!("identical stdout, exit code and end state under {}", r.modes.join(" "));
    if !r.skipped.is_empty() {
        s.push_str(&format!(" (skipped {})", r.skipped.join("; ")));
    }
    Ok(s)
}

// 6

fn overhead() -> Check {
    let o = modes::overhead(100_000, 10).ok_or("fixture could not be built")?;
    let mean = |m: &str| o.stat.row(m).and_then(|r| r.summary).map(|s| s.mean);
    let stops = |m: &str| o.stat.row(m).and_then(|r| r.stops);
    let (Some(native), Some(p1), Some(p2)) = (mean("native"), mean("P1"), mean("P2")) else {
        return Err("a mode failed to run".into());
    };
    let (Some(s1), Some(s2)) = (stops("P1"), stops("P2")) else {
        return Err("stop counts missing".into());
    };
    let cpu = o.cpu_ratio.map(|r| format!("{r:.3}")).unwrap_or_else(|| "n/a".into());
    let detail = format!(
        "masked means native {native:.4}s P1 {p1:.4}s P2 {p2:.4}s; stops P1 {s1} P2 {s2}; cpu loop P1/native {cpu} (informational, target <= 1.10)"
    );
    ensure(p2 >= p1 && p1 >= 0.95 * native && s1 < s2, detail.clone())?;
    Ok(detail)
}

// 7

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

fn sqrt(q: &BigRational) -> BigRational {
    let scale = BigInt::from(10).pow(60);
    BigRational::new((q.numer() * q.denom() * &scale * &scale).sqrt(), q.denom() * scale)
}

fn rel_err(got: f64, want: &BigRational) -> f64 {
    let diff = (exact(got) - want).abs();
    if want.is_zero() {
        diff.to_f64().unwrap()
    } else {
        (diff / want.abs()).to_f64().unwrap()
    }
}

fn ratio_exactness() -> Check {
    let mut rng = StdRng::seed_from_u64(7);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let mag = |rng: &mut StdRng| 10f64.powf(rng.random_range(-6.0..6.0)) * rng.random_range(1.0..10.0);
        let (ti, th) = (mag(&mut rng), mag(&mut rng));
        let (dti, dth) = (ti * rng.random_range(0.0..0.5), th * rng.random_range(0.0..0.5));
        let got = ratio_of(ti, dti, th, dth).map_err(|e| e.to_string())?;
        let (eti, edti, eth, edth) = (exact(ti), exact(dti), exact(th), exact(dth));
        let r = &eti / &eth;
        let (a, b) = (&edti / &eti, &edth / &eth);
        let dr = &r * sqrt(&(&a * &a + &b * &b));
        worst = worst.max(rel_err(got.r, &r)).max(rel_err(got.dr, &dr));
    }
    ensure(worst <= 1e-12, format!("worst relative error {worst:e}"))?;
    let w = ratio_of(100.0, 2.0, 50.0, 1.0).map_err(|e| e.to_string())?;
    ensure(w.r == 2.0 && (w.dr - 0.056569).abs() < 5e-7, format!("(100±2)/(50±1) gave {} ± {}", w.r, w.dr))?;
    Ok(format!("1000 inputs, worst relative error {worst:.2e}; (100±2)/(50±1) = {} ± {:.6}", w.r, w.dr))
}

// 8

fn interchangeability() -> Check {
    let r = modes::interchange(3, 8).ok_or("fixture could not be built")?;
    ensure(r.failures.is_empty(), r.failures.join("; "))?;
    Ok(format!(
        "{} transitions in {} sequences ({}), hash multiset restored each time",
        r.transitions,
        r.sequences.len(),
        r.sequences.join(", ")
    ))
}

// 9

fn words(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

fn run_op(line: &str) -> Result<(String, Overrides), String> {
    match parse(words(line)).map_err(|e| format!("{line}: {e}"))?.1 {
        Operation::Run { container, overrides, .. } => Ok((container, overrides)),
        other => Err(format!("{line}: parsed as {other:?}")),
    }
}

fn cli_grammar() -> Check {
    let hub: ImageRef = "docker.io/repo_name/container_name".parse().unwrap();
    ensure(hub.registry == "docker.io" && hub.repository == "repo_name/container_name" && hub.tag == "latest", "image ref")?;
    let op = |line: &str| parse(words(line)).map(|p| p.1).map_err(|e| format!("{line}: {e}"));

    ensure(
        op("udocker pull docker.io/repo_name/container_name")?
            == Operation::Pull {
                image: hub.clone(),
                insecure: false,
                credentials: None,
            },
        "pull",
    )?;
    ensure(
        op("udocker create docker.io/repo_name/container_name")? == Operation::Create { image: hub, name: None },
        "create",
    )?;
    ensure(
        op("udocker name 95c22b84-1868-332b-9bf0-2e056beafb00 my_container")?
            == Operation::Name {
                container: "95c22b84-1868-332b-9bf0-2e056beafb00".into(),
                name: "my_container".into(),
            },
        "name",
    )?;
    ensure(
        op("udocker setup --execmode=F3 container_name")?
            == Operation::Setup {
                container: "container_name".into(),
                mode: Some(ExecMode::F3),
            },
        "setup",
    )?;

    // The run lines are carried through to a launch description.
    let passwd = "root:x:0:0:root:/root:/bin/sh\njorge:x:1001:1001::/home/jorge:/bin/sh\n";
    let host = HostContext {
        env: vec![("DISPLAY".into(), ":0".into()), ("PATH".into(), "/usr/bin".into())],
        home: Some(PathBuf::from("/home/jorge")),
        uid: 1001,
        gid: 1001,
        username: "jorge".into(),
    };
    let cfg = ContainerConfig::default();
    let spec = |ov: &Overrides| build_exec_spec(&cfg, ov, &host, Some(passwd)).map_err(|e| e.to_string());
    let binds = |s: &udocker_core::metadata::ExecSpec| -> Vec<(String, String)> {
        s.binds
            .iter()
            .map(|b: &Bind| (b.host.display().to_string(), b.container.display().to_string()))
            .collect()
    };
    let pair = |h: &str, c: &str| (h.to_string(), c.to_string());

    let (c, ov) = run_op("udocker run --user=root container_name yum install -y firefox pulseaudio gnash-plugin")?;
    let s = spec(&ov)?;
    ensure(
        c == "container_name" && s.argv == ["yum", "install", "-y", "firefox", "pulseaudio", "gnash-plugin"] && s.identity.uid == 0,
        "run --user=root",
    )?;

    let (c, ov) = run_op("udocker run -v /var -v /tmp -v /home/x/user:/mnt container_name /bin/bash")?;
    let s = spec(&ov)?;
    ensure(
        c == "container_name"
            && s.argv == ["/bin/bash"]
            && binds(&s) == [pair("/var", "/var"), pair("/tmp", "/tmp"), pair("/home/x/user", "/mnt")],
        format!("run -v: {:?}", binds(&s)),
    )?;

    let (c, ov) = run_op("udocker run container_name /usr/sbin/ifconfig")?;
    ensure(c == "container_name" && spec(&ov)?.argv == ["/usr/sbin/ifconfig"], "run ifconfig")?;

    let (c, ov) = run_op(
        "udocker run --bindhome --hostauth --hostenv -v /sys -v /proc -v /var/run -v /dev --user=jorge --dri container_name /usr/bin/xeyes",
    )?;
    let s = spec(&ov)?;
    let b = binds(&s);
    for want in ["/sys", "/proc", "/var/run", "/dev", "/home/jorge", "/etc/passwd", "/etc/group"] {
        ensure(b.contains(&pair(want, want)), format!("xeyes line lacks bind {want}: {b:?}"))?;
    }
    ensure(
        c == "container_name"
            && s.argv == ["/usr/bin/xeyes"]
            && s.identity.uid == 1001
            && s.env.get("DISPLAY").map(String::as_str) == Some(":0"),
        "xeyes line",
    )?;

    // Repository location and layout.
    let env = common::Env::new();
    env.ok(&["images"]);
    let mut names: Vec<String> = fs::read_dir(&env.repo).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    ensure(names == ["bin", "containers", "layers", "lib", "repos"], format!("layout {names:?}"))?;
    let home = env.path("home");
    fs::create_dir(&home).unwrap();
    let out = env.cmd(&["ps"]).env_remove("UDOCKER_DIR").env("HOME", &home).output().unwrap();
    ensure(out.status.success() && home.join(".udocker/repos").is_dir(), "default $HOME/.udocker")?;
    Ok("8 command lines parse and map to their operations; layout bin containers layers lib repos under $UDOCKER_DIR or $HOME/.udocker".into())
}

fn main() {
    let criteria: [(u32, &str, Option<u64>, fn() -> Check); 9] = [
        (1, "layer flatten oracle", Some(60), flatten_oracle),
        (2, "pull integrity", Some(30), pull_integrity),
        (3, "ELF patch round trip", Some(30), elf_round_trip),
        (4, "P-mode containment", Some(300), containment),
        (5, "mode parity", None, parity),
        (6, "overhead ordering", None, overhead),
        (7, "ratio exactness", None, ratio_exactness),
        (8, "mode interchangeability", None, interchangeability),
        (9, "CLI grammar", None, cli_grammar),
    ];
    // Build the interposer before any timing starts.
    udocker_testkit::interposer_library();
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, limit, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let result = match (result, limit) {
            (Ok(d), Some(l)) if secs >= l as f64 => Err(format!("took {secs:.1}s, limit {l}s; {d}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

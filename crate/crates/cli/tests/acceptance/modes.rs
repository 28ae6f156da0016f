//! Whole-container checks across execution modes, through the command.

use std::collections::BTreeMap;
use std::fs;
use std::os::fd::AsRawFd;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use udocker_core::bench::{run_matrix, Manifest, Measurement, Report, RowStatus};
use udocker_core::engine::{self, ContainerDirs, EngineOptions, StdFds};
use udocker_core::metadata::{ExecSpec, Identity, DEFAULT_PATH};
use udocker_core::ExecMode;
use udocker_testkit::{cprog, interposer_library, rootfs};

use crate::common::{base_tarball, errtext, hash_multiset, snapshot, text, Env};

/// File I/O, directory changes, an exec chain, environment changes and a
/// bound directory.
const PARITY_SCRIPT: &str = r#"set -e
cd /tmp
mkdir -p work/sub
cd work/sub
echo "line one" > a.txt
echo "line two" >> a.txt
cat a.txt
/bin/pwd
cd ../..
pwd
mv work/sub/a.txt work/b.txt
ls work | sort
export STAGE=one
sh -c 'echo child $STAGE; exec env STAGE=two sh -c "echo grandchild \$STAGE; cat /etc/msg"'
unset STAGE
echo "unset ${STAGE:-none}"
cat /data/note
echo written > /data/out.txt
ls /data | sort
cd /data && pwd
rm -r /tmp/work/sub
ls /tmp/work
id -u
exit 3
"#;

pub struct ParityResult {
    pub modes: Vec<String>,
    pub skipped: Vec<String>,
    pub differences: Vec<String>,
}

pub fn parity() -> Option<ParityResult> {
    let env = Env::new();
    let base = base_tarball(env.dir.path(), |_| true)?;
    let mut reference: Option<(String, String, i32, BTreeMap<String, String>, BTreeMap<String, String>)> = None;
    let mut result = ParityResult {
        modes: Vec::new(),
        skipped: Vec::new(),
        differences: Vec::new(),
    };
    for mode in ["P1", "P2", "F1", "F2", "F3", "R1"] {
        let name = format!("parity-{}", mode.to_lowercase());
        let (_, root) = env.import(&base, &name);
        let data = env.path(&format!("data-{mode}"));
        fs::create_dir(&data).unwrap();
        fs::write(data.join("note"), "from the host\n").unwrap();
        let bind = format!("{}:/data", data.display());
        let out = env.run(&["run", &format!("--execmode={mode}"), "-v", &bind, &name, "sh", "-c", PARITY_SCRIPT]);
        if mode == "R1" && out.status.code() == Some(udocker_cli::EXIT_UNAVAILABLE) {
            result.skipped.push(format!("R1: {}", errtext(&out).trim()));
            continue;
        }
        // Undo mode-specific patching before comparing trees.
        env.ok(&["setup", "--execmode=P1", &name]);
        let state = (
            mode.to_string(),
            text(&out),
            out.status.code().unwrap_or(-1),
            snapshot(&root),
            snapshot(&data),
        );
        result.modes.push(mode.to_string());
        match &reference {
            None => {
                if state.2 != 3 {
                    result.differences.push(format!("{mode}: exit {} stderr {}", state.2, errtext(&out)));
                }
                reference = Some(state);
            }
            Some(r) => {
                if state.1 != r.1 {
                    result.differences.push(format!("{mode} stdout {:?} vs {} {:?}", state.1, r.0, r.1));
                }
                if state.2 != r.2 {
                    result.differences.push(format!("{mode} exit {} vs {}: {}", state.2, r.2, errtext(&out)));
                }
                if state.3 != r.3 {
                    let diff: Vec<&String> = state.3.keys().filter(|k| r.3.get(*k) != state.3.get(*k)).take(5).collect();
                    result.differences.push(format!("{mode} rootfs differs from {}: {diff:?}", r.0));
                }
                if state.4 != r.4 {
                    result.differences.push(format!("{mode} bound directory differs from {}", r.0));
                }
            }
        }
    }
    if let Some(r) = &reference {
        if r.1.is_empty() {
            result.differences.push("reference run printed nothing".into());
        }
    }
    Some(result)
}

pub struct Interchange {
    pub transitions: usize,
    pub sequences: Vec<String>,
    pub failures: Vec<String>,
}

/// Random `setup --execmode` sequences; after each, the container must
/// still run, and after the final revert its files must be as before.
pub fn interchange(sequences: usize, seed: u64) -> Option<Interchange> {
    const MODES: [&str; 6] = ["P1", "P2", "F1", "F2", "F3", "F4"];
    let env = Env::new();
    let base = base_tarball(env.dir.path(), |_| true)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Interchange {
        transitions: 0,
        sequences: Vec::new(),
        failures: Vec::new(),
    };
    for s in 0..sequences {
        let name = format!("seq{s}");
        let (_, root) = env.import(&base, &name);
        let initial = hash_multiset(&root);
        let seq: Vec<&str> = (0..10).map(|_| *MODES.choose(&mut rng).unwrap()).collect();
        for mode in &seq {
            let r = env.run(&["setup", &format!("--execmode={mode}"), &name]);
            out.transitions += 1;
            if !r.status.success() {
                out.failures.push(format!("{name} setup {mode}: {}", errtext(&r)));
                continue;
            }
            let run = env.run(&["run", &name, "cat", "/etc/msg"]);
            if text(&run) != "inside\n" {
                out.failures.push(format!("{name} run under {mode}: {:?} {}", text(&run), errtext(&run)));
            }
        }
        env.ok(&["setup", "--execmode=P1", &name]);
        if hash_multiset(&root) != initial {
            out.failures.push(format!("{name} {seq:?}: files differ after the final revert"));
        }
        out.sequences.push(seq.join(">"));
    }
    Some(out)
}

pub struct Overhead {
    pub stat: Report,
    pub cpu_ratio: Option<f64>,
}

fn engine_spec(argv: &[&str], mode: ExecMode) -> ExecSpec {
    let (uid, gid) = unsafe { (libc::geteuid(), libc::getegid()) };
    ExecSpec {
        argv: argv.iter().map(|s| s.to_string()).collect(),
        env: BTreeMap::from([("PATH".to_string(), DEFAULT_PATH.to_string())]),
        cwd: "/".into(),
        binds: Vec::new(),
        identity: Identity {
            uid,
            gid,
            username: "root".into(),
        },
        mode,
        host_env_passthrough: false,
        bind_home: false,
    }
}

fn timed_native(program: &Path, args: &[String]) -> Result<Measurement, String> {
    let start = Instant::now();
    let status = Command::new(program)
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    Ok(Measurement {
        seconds: start.elapsed().as_secs_f64(),
        exit_code: status.code().unwrap_or(-1),
        stops: None,
    })
}

fn timed_engine(ct: &ContainerDirs, spec: &ExecSpec) -> Result<Measurement, String> {
    let null = fs::OpenOptions::new().write(true).open("/dev/null").unwrap();
    let opts = EngineOptions {
        interposer: interposer_library(),
        fds: StdFds {
            stdin: 0,
            stdout: null.as_raw_fd(),
            stderr: 2,
        },
        ..EngineOptions::default()
    };
    let start = Instant::now();
    let out = engine::run(ct, spec, &opts).map_err(|e| e.to_string())?;
    Ok(Measurement {
        seconds: start.elapsed().as_secs_f64(),
        exit_code: out.exit_code,
        stops: out.stats.map(|s| s.stops),
    })
}

fn matrix(ct: &ContainerDirs, name: &str, container_argv: &[&str], host_argv: &[String], modes: &[&str], reps: usize) -> Report {
    let manifest = Manifest::parse(&format!(
        "name = \"{name}\"\ncontainer = \"fixture\"\ncommand = {:?}\nmodes = {:?}\nrepetitions = {reps}\n",
        container_argv, modes
    ))
    .unwrap();
    let mut runner = |tag: &str| -> Result<Measurement, String> {
        if tag == "native" {
            return timed_native(Path::new(&host_argv[0]), &host_argv[1..]);
        }
        let mode: ExecMode = tag.parse().map_err(|e| format!("{e}"))?;
        timed_engine(ct, &engine_spec(container_argv, mode))
    };
    run_matrix(&manifest, &mut runner).unwrap()
}

pub fn overhead(stats: u32, reps: usize) -> Option<Overhead> {
    let dir = tempfile::tempdir().unwrap();
    let ct = ContainerDirs::new(dir.path().join("ctr"));
    let root = ct.rootfs.clone();
    if !rootfs::build_base(&root)
        || !cprog::compile(cprog::STAT_LOOP, &root.join("bin/statloop"), &[])
        || !cprog::compile(cprog::CPU_LOOP, &root.join("bin/cpuloop"), &[])
    {
        return None;
    }
    let n = stats.to_string();
    let host = |p: &str| root.join(p.trim_start_matches('/')).to_string_lossy().into_owned();
    let stat = matrix(
        &ct,
        "stat",
        &["/bin/statloop", "/etc/msg", &n],
        &[host("/bin/statloop"), host("/etc/msg"), n.clone()],
        &["native", "P1", "P2"],
        reps,
    );
    let iters = "200000000";
    let cpu = matrix(&ct, "cpu", &["/bin/cpuloop", iters], &[host("/bin/cpuloop"), iters.into()], &["native", "P1"], 5);
    let cpu_ratio = cpu.row("P1").and_then(|r| r.ratio).map(|r| r.r);
    for r in stat.rows.iter().chain(&cpu.rows) {
        if let RowStatus::Failed(why) = &r.status {
            eprintln!("{}: {why}", r.mode);
        }
    }
    Some(Overhead { stat, cpu_ratio })
}

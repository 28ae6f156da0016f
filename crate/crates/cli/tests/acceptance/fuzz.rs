//! Random path system calls run under a ptrace mode, checked two ways:
//! every descriptor the program holds must point into the container tree
//! or a bound directory, and the directory getcwd reports must match an
//! in-memory model of the container that knows nothing of host paths.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::path::{Path, PathBuf};
use std::thread;

use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use udocker_core::engine::{self, ContainerDirs, EngineOptions, StdFds};
use udocker_core::metadata::{ExecSpec, Identity, DEFAULT_PATH};
use udocker_core::ExecMode;
use udocker_pathmap::Bind;
use udocker_testkit::{cprog, rootfs};

const ENOENT: i32 = 2;
const ENOTDIR: i32 = 20;
const ELOOP: i32 = 40;
const MAX_HOPS: u32 = 40;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Dir,
    File,
    Link(String),
    /// A bound system directory whose content is not modelled.
    Opaque,
}

type CPath = Vec<String>;

fn key(p: &[String]) -> String {
    format!("/{}", p.join("/"))
}

/// The container as the program should see it.
struct Model {
    nodes: BTreeMap<String, Node>,
}

impl Model {
    fn get(&self, p: &[String]) -> Option<&Node> {
        if p.is_empty() {
            return Some(&Node::Dir);
        }
        self.nodes.get(&key(p))
    }

    fn is_dir(&self, p: &[String]) -> bool {
        matches!(self.get(p), Some(Node::Dir | Node::Opaque))
    }

    /// Path lookup with the root pinned at `/`. A missing last component
    /// is not an error: the returned path then names what would be created.
    fn resolve(&self, start: &[String], path: &str, follow_last: bool, hops: &mut u32) -> Result<CPath, i32> {
        let mut cur: CPath = if path.starts_with('/') { Vec::new() } else { start.to_vec() };
        let comps: Vec<&str> = path.split('/').filter(|c| !c.is_empty()).collect();
        for (i, c) in comps.iter().enumerate() {
            let last = i + 1 == comps.len();
            match *c {
                "." => continue,
                ".." => {
                    cur.pop();
                    continue;
                }
                _ => {}
            }
            let mut next = cur.clone();
            next.push(c.to_string());
            match self.get(&next) {
                None if last => return Ok(next),
                None => return Err(ENOENT),
                Some(Node::Link(t)) if !last || follow_last => {
                    *hops += 1;
                    if *hops > MAX_HOPS {
                        return Err(ELOOP);
                    }
                    let t = t.clone();
                    let r = self.resolve(&cur, &t, true, hops)?;
                    if !last && !self.is_dir(&r) {
                        return Err(if self.get(&r).is_none() { ENOENT } else { ENOTDIR });
                    }
                    cur = r;
                }
                Some(Node::Dir | Node::Opaque) => cur = next,
                Some(_) if last => cur = next,
                Some(_) => return Err(ENOTDIR),
            }
        }
        Ok(cur)
    }

    fn lookup(&self, cwd: &[String], path: &str, follow: bool) -> Result<CPath, i32> {
        self.resolve(cwd, path, follow, &mut 0)
    }

    fn remove(&mut self, p: &[String]) {
        let k = key(p);
        let below = format!("{k}/");
        self.nodes.retain(|n, _| n != &k && !n.starts_with(&below));
    }

    fn rename(&mut self, from: &[String], to: &[String]) {
        if from == to {
            return;
        }
        self.remove(to);
        let (fk, tk) = (key(from), key(to));
        let below = format!("{fk}/");
        let moved: Vec<(String, Node)> = self
            .nodes
            .iter()
            .filter(|(n, _)| **n == fk || n.starts_with(&below))
            .map(|(n, v)| (format!("{tk}{}", &n[fk.len()..]), v.clone()))
            .collect();
        self.remove(from);
        self.nodes.extend(moved);
    }

    fn add_host_tree(&mut self, host: &Path, at: &str) {
        let Ok(meta) = fs::symlink_metadata(host) else { return };
        let node = if meta.file_type().is_symlink() {
            Node::Link(fs::read_link(host).unwrap().to_string_lossy().into_owned())
        } else if meta.is_dir() {
            Node::Dir
        } else {
            Node::File
        };
        let is_dir = node == Node::Dir;
        self.nodes.insert(at.to_string(), node);
        if is_dir {
            for e in fs::read_dir(host).unwrap().flatten() {
                let name = e.file_name().to_string_lossy().into_owned();
                let child = if at == "/" { format!("/{name}") } else { format!("{at}/{name}") };
                self.add_host_tree(&e.path(), &child);
            }
        }
    }

    fn from_container(rootfs: &Path, binds: &[Bind]) -> Model {
        let mut m = Model { nodes: BTreeMap::new() };
        m.add_host_tree(rootfs, "/");
        m.nodes.remove("/");
        for b in binds {
            let at = b.container.to_string_lossy().into_owned();
            let parts: CPath = at.split('/').filter(|c| !c.is_empty()).map(String::from).collect();
            m.remove(&parts);
            if ["/dev", "/proc", "/sys"].contains(&at.as_str()) {
                m.nodes.insert(at, Node::Opaque);
            } else {
                m.add_host_tree(&b.host, &at);
            }
        }
        m
    }
}

const WORDS: &[&str] = &[
    "a", "b", "c", "abs", "esc", "loop", "tob", "rel", "..", "..", ".", "tmp", "fz", "etc", "mnt", "bind", "d", "f", "passwd",
    "n1", "n2", "n3",
];
/// Names that exist nowhere on the host, so a mutation that escaped the
/// container could not damage anything and would be found afterwards.
const SCRATCH: &[&str] = &["n1", "n2", "n3", "n4"];
const TARGETS: &[&str] = &["/etc", "/tmp/fz/a", "../..", "n1", "/mnt/bind/d", "../../../../..", "/no/such", "/tmp/fz/esc", "n2/.."];

fn random_path(rng: &mut StdRng) -> String {
    let mut s = String::new();
    match rng.random_range(0..10) {
        0..=2 => s.push_str("/tmp/fz/"),
        3 => s.push('/'),
        _ => {}
    }
    let n = rng.random_range(1..=4);
    let parts: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    s.push_str(&parts.join("/"));
    s
}

fn scratch_path(rng: &mut StdRng) -> String {
    let mut s = String::new();
    if rng.random_bool(0.3) {
        s.push_str("/tmp/fz/");
    }
    for _ in 0..rng.random_range(0..=2) {
        s.push_str(WORDS.choose(rng).unwrap());
        s.push('/');
    }
    s.push_str(SCRATCH.choose(rng).unwrap());
    s
}

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub ops: usize,
    pub syncs: usize,
    pub fds_checked: usize,
    pub escapes: Vec<String>,
    pub cwd_mismatches: Vec<String>,
    pub model_errors: Vec<String>,
    pub exit_code: i32,
}

impl FuzzReport {
    pub fn clean(&self) -> bool {
        self.escapes.is_empty() && self.cwd_mismatches.is_empty() && self.model_errors.is_empty() && self.exit_code == 0
    }
}

fn note(v: &mut Vec<String>, s: String) {
    if v.len() < 20 {
        v.push(s);
    }
}

fn pipe() -> (OwnedFd, OwnedFd) {
    let mut fds = [0; 2];
    assert_eq!(unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) }, 0);
    unsafe { (OwnedFd::from_raw_fd(fds[0]), OwnedFd::from_raw_fd(fds[1])) }
}

struct Prepared {
    _dir: tempfile::TempDir,
    ct: ContainerDirs,
    bind_host: PathBuf,
}

fn prepare() -> Option<Prepared> {
    let dir = tempfile::tempdir().unwrap();
    let ct = ContainerDirs::new(dir.path().join("ctr"));
    let root = &ct.rootfs;
    if !rootfs::build_base(root) || !cprog::compile(cprog::PATH_FUZZ, &root.join("bin/pathfuzz"), &[]) {
        return None;
    }
    let fz = root.join("tmp/fz");
    fs::create_dir_all(fz.join("a/b")).unwrap();
    fs::create_dir_all(fz.join("c")).unwrap();
    fs::create_dir_all(root.join("mnt/bind")).unwrap();
    fs::write(fz.join("f"), "f").unwrap();
    for (name, target) in [
        ("abs", "/etc"),
        ("esc", "../../../../../.."),
        ("loop", "loop"),
        ("tob", "/mnt/bind"),
        ("rel", "a/b"),
    ] {
        std::os::unix::fs::symlink(target, fz.join(name)).unwrap();
    }
    let bind_host = dir.path().join("bindhost");
    fs::create_dir_all(bind_host.join("d")).unwrap();
    fs::write(bind_host.join("f"), "bound").unwrap();
    Some(Prepared { _dir: dir, ct, bind_host })
}

fn spec(mode: ExecMode, bind_host: &Path) -> ExecSpec {
    let (uid, gid) = unsafe { (libc::geteuid(), libc::getegid()) };
    ExecSpec {
        argv: vec!["pathfuzz".into()],
        env: BTreeMap::from([("PATH".to_string(), DEFAULT_PATH.to_string())]),
        cwd: PathBuf::from("/tmp/fz"),
        binds: vec![Bind::new(bind_host, "/mnt/bind")],
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

fn field<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    line.split_whitespace().find_map(|t| t.strip_prefix(name))
}

/// Runs `ops` random operations. Returns None when the fixture cannot be
/// built on this host.
pub fn run(mode: ExecMode, ops: usize, seed: u64) -> Option<FuzzReport> {
    let p = prepare()?;
    let spec = spec(mode, &p.bind_host);
    let binds = engine::effective_binds(&spec).unwrap();
    let rootfs = fs::canonicalize(&p.ct.rootfs).unwrap();
    let mut allowed: Vec<PathBuf> = vec![rootfs.clone()];
    allowed.extend(binds.iter().map(|b| b.host.clone()));
    let mut model = Model::from_container(&rootfs, &binds);
    let mut cwd: CPath = vec!["tmp".into(), "fz".into()];

    let host_dirs = ["/", "/etc", "/tmp", "/mnt", "/root"];
    let stray = |name: &str| -> Vec<PathBuf> { host_dirs.iter().map(|d| Path::new(d).join(name)).collect() };
    let preexisting: Vec<PathBuf> = SCRATCH.iter().flat_map(|n| stray(n)).filter(|p| p.exists()).collect();

    let (in_r, in_w) = pipe();
    let (out_r, out_w) = pipe();
    let fds = StdFds {
        stdin: in_r.as_raw_fd(),
        stdout: out_w.as_raw_fd(),
        stderr: 2,
    };
    let ct = p.ct.clone();
    let spec_t = spec.clone();
    let worker = thread::spawn(move || {
        let opts = EngineOptions {
            fds,
            ..EngineOptions::default()
        };
        let r = engine::run(&ct, &spec_t, &opts);
        drop((in_r, out_w));
        r
    });
    let mut input = File::from(in_w);
    let mut output = BufReader::new(File::from(out_r));
    let mut report = FuzzReport::default();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut line = String::new();
    let mut exchange = move |cmd: &str, line: &mut String| -> bool {
        if writeln!(input, "{cmd}").is_err() {
            return false;
        }
        line.clear();
        output.read_line(line).map(|n| n > 0).unwrap_or(false)
    };

    let mut done = 0;
    while done < ops {
        let kind = rng.random_range(0..100);
        let (cmd, mutation): (String, Option<(&str, String, String)>) = match kind {
            0..=24 => {
                let a = if rng.random_bool(0.05) { "/tmp/fz".to_string() } else { random_path(&mut rng) };
                (format!("chdir {a}"), Some(("chdir", a, String::new())))
            }
            25..=39 => (format!("open {}", random_path(&mut rng)), None),
            40..=44 => (format!("openat {} {}", random_path(&mut rng), random_path(&mut rng).trim_start_matches('/')), None),
            45..=52 => (format!("stat {}", random_path(&mut rng)), None),
            53..=57 => (format!("lstat {}", random_path(&mut rng)), None),
            58..=62 => (format!("readlink {}", random_path(&mut rng)), None),
            63..=72 => {
                let a = scratch_path(&mut rng);
                (format!("mkdir {a}"), Some(("mkdir", a, String::new())))
            }
            73..=79 => {
                let a = scratch_path(&mut rng);
                (format!("creat {a}"), Some(("creat", a, String::new())))
            }
            80..=87 => {
                let t = TARGETS.choose(&mut rng).unwrap().to_string();
                let a = scratch_path(&mut rng);
                (format!("symlink {t} {a}"), Some(("symlink", a, t)))
            }
            88..=92 => {
                let a = scratch_path(&mut rng);
                (format!("unlink {a}"), Some(("unlink", a, String::new())))
            }
            93..=96 => {
                let a = scratch_path(&mut rng);
                (format!("rmdir {a}"), Some(("rmdir", a, String::new())))
            }
            _ => {
                let (a, b) = (scratch_path(&mut rng), scratch_path(&mut rng));
                (format!("rename {a} {b}"), Some(("rename", a, b)))
            }
        };
        // Never remove or replace the working directory or one above it.
        if let Some((op @ ("rmdir" | "rename" | "unlink"), a, b)) = &mutation {
            let mut victims = vec![a.as_str()];
            if *op == "rename" {
                victims.push(b);
            }
            let hits_cwd = victims.iter().any(|v| model.lookup(&cwd, v, false).is_ok_and(|r| cwd.starts_with(&r)));
            if hits_cwd {
                continue;
            }
        }
        if !exchange(&cmd, &mut line) {
            note(&mut report.model_errors, format!("program stopped answering at {cmd:?}"));
            break;
        }
        done += 1;
        let rc = field(&line, "rc=").and_then(|v| v.parse::<i32>().ok());
        let errno = field(&line, "errno=").unwrap_or("?");
        let Some(rc) = rc else {
            note(&mut report.model_errors, format!("{cmd:?}: unexpected reply {line:?}"));
            continue;
        };
        if let Some((op, a, b)) = &mutation {
            let want = model.lookup(&cwd, a, *op == "chdir" || *op == "creat");
            match (*op, rc, want) {
                ("chdir", 0, Ok(r)) if model.is_dir(&r) => cwd = r,
                ("chdir", 0, w) => note(&mut report.model_errors, format!("{cmd:?} succeeded, model says {w:?}")),
                ("chdir", _, Ok(r)) if model.is_dir(&r) => {
                    note(&mut report.model_errors, format!("{cmd:?} failed with errno {errno}, model says {}", key(&r)))
                }
                (_, 0, Ok(r)) => match *op {
                    "mkdir" => {
                        model.nodes.insert(key(&r), Node::Dir);
                    }
                    "creat" => {
                        model.nodes.entry(key(&r)).or_insert(Node::File);
                    }
                    "symlink" => {
                        model.nodes.insert(key(&r), Node::Link(b.clone()));
                    }
                    "unlink" | "rmdir" => model.remove(&r),
                    "rename" => match model.lookup(&cwd, b, false) {
                        Ok(to) => model.rename(&r, &to),
                        Err(e) => note(&mut report.model_errors, format!("{cmd:?} succeeded, model target fails with {e}")),
                    },
                    _ => unreachable!(),
                },
                (_, 0, Err(e)) => note(&mut report.model_errors, format!("{cmd:?} succeeded, model fails with {e}")),
                _ => {}
            }
        }
        let want_cwd = key(&cwd);
        let got_cwd = field(&line, "cwd=").unwrap_or("?");
        if got_cwd != want_cwd {
            note(&mut report.cwd_mismatches, format!("after {cmd:?}: getcwd {got_cwd}, model {want_cwd}"));
        }

        if done % 50 == 0 {
            if !exchange("sync", &mut line) {
                break;
            }
            report.syncs += 1;
            let pid: i32 = field(&line, "pid=").and_then(|v| v.parse().ok()).unwrap_or(0);
            let Ok(rd) = fs::read_dir(format!("/proc/{pid}/fd")) else {
                note(&mut report.model_errors, format!("cannot list descriptors of {pid}"));
                continue;
            };
            for e in rd.flatten() {
                let fd: i32 = e.file_name().to_string_lossy().parse().unwrap_or(-1);
                if fd < 3 {
                    continue;
                }
                let Ok(target) = fs::read_link(e.path()) else { continue };
                let t = target.to_string_lossy();
                if !t.starts_with('/') {
                    continue;
                }
                report.fds_checked += 1;
                let t = Path::new(t.trim_end_matches(" (deleted)"));
                if !allowed.iter().any(|a| t.starts_with(a)) {
                    note(&mut report.escapes, format!("fd {fd} -> {}", t.display()));
                }
            }
        }
        if done % 1000 == 0 {
            exchange("closeall", &mut line);
        }
    }
    report.ops = done;
    drop(exchange);
    match worker.join().unwrap() {
        Ok(o) => report.exit_code = o.exit_code,
        Err(e) => {
            note(&mut report.model_errors, format!("engine: {e}"));
            report.exit_code = -1;
        }
    }
    for p in SCRATCH.iter().flat_map(|n| stray(n)) {
        if p.exists() && !preexisting.contains(&p) {
            note(&mut report.escapes, format!("{} created on the host", p.display()));
        }
    }
    Some(report)
}

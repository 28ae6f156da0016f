// The command end to end, one process per invocation.

mod common;

use std::fs;

use common::{base_tarball, errtext, hash_multiset, text, Env};
use serde_json::json;
use udocker_testkit::layerstack::{layer_tar, Layer, Op};
use udocker_testkit::registry::{FixtureImage, FixtureRegistry};

#[test]
fn version_and_usage_errors() {
    let env = Env::new();
    assert_eq!(env.ok(&["version"]), format!("udocker {}\n", env!("CARGO_PKG_VERSION")));
    for bad in [&["frobnicate"][..], &["run"], &["run", "--bogus", "c"], &["setup", "--execmode=Q7", "c"], &[]] {
        let out = env.run(bad);
        assert_eq!(out.status.code(), Some(1), "{bad:?}");
        assert!(out.stdout.is_empty(), "{bad:?}");
    }
    assert!(!env.repo.exists(), "usage errors must not touch the repository");
    let help = env.run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(text(&help).contains("setup"));
}

#[test]
fn repository_location() {
    let env = Env::new();
    env.ok(&["images"]);
    let mut names: Vec<String> = fs::read_dir(&env.repo).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["bin", "containers", "layers", "lib", "repos"]);

    let home = env.path("home");
    fs::create_dir(&home).unwrap();
    let out = env.cmd(&["ps"]).env_remove("UDOCKER_DIR").env("HOME", &home).output().unwrap();
    assert!(out.status.success(), "{}", errtext(&out));
    assert!(home.join(".udocker/containers").is_dir());
    let other = env.path("elsewhere");
    env.ok(&["--repo", other.to_str().unwrap(), "ps"]);
    assert!(other.join("layers").is_dir());
}

fn file(path: &str, content: &str) -> Op {
    Op::File {
        path: path.into(),
        content: content.as_bytes().to_vec(),
        mode: 0o644,
    }
}

#[test]
fn pull_create_name_and_run() {
    let env = Env::new();
    let Some(base) = base_tarball(env.dir.path(), |_| true) else { return };
    let top = Layer {
        ops: vec![Op::Dir { path: "etc".into(), mode: 0o755 }, file("etc/msg", "pulled\n")],
    };
    let extra = Layer {
        ops: vec![Op::Dir { path: "srv".into(), mode: 0o755 }, file("srv/data", "x")],
    };
    let img = FixtureImage::new(
        serde_json::to_vec(&json!({"config": {"Cmd": ["cat", "/etc/msg"], "Env": ["GREETING=hi"]}})).unwrap(),
        vec![fs::read(&base).unwrap(), layer_tar(&top), layer_tar(&extra)],
    );
    let reg = FixtureRegistry::start();
    reg.add_image("team/app", "latest", &img);
    let image = format!("{}/team/app", reg.host());

    let pulled = env.ok(&["pull", "--insecure", &image]);
    assert!(pulled.starts_with(&format!("{image}:latest\tlayers=3\t")), "{pulled}");
    assert_eq!(env.ok(&["images"]), format!("{image}:latest\n"));

    let id = env.ok(&["create", &image]).trim().to_string();
    assert_eq!(id.len(), 36);
    env.ok(&["name", &id, "my_container"]);
    assert_eq!(env.ok(&["run", "my_container"]), "pulled\n");
    assert_eq!(env.ok(&["run", "my_container", "sh", "-c", "echo $GREETING; cat /srv/data"]), "hi\nx");
    let ps = env.ok(&["ps"]);
    assert!(ps.starts_with(&format!("{id}\tP1\t-\tmy_container\t{image}:latest")), "{ps}");

    // Running an image creates a container on the fly.
    assert_eq!(env.ok(&["run", "--name=second", &image, "cat", "/srv/data"]), "x");
    assert_eq!(env.ok(&["ps"]).lines().count(), 2);

    env.ok(&["rmname", "second"]);
    assert_eq!(env.run(&["run", "second"]).status.code(), Some(2));
    env.ok(&["protect", "my_container"]);
    assert_eq!(env.run(&["rm", "my_container"]).status.code(), Some(6));
    env.ok(&["unprotect", "my_container"]);
    assert_eq!(env.ok(&["rm", "my_container"]).trim(), id);
    env.ok(&["rmi", &image]);
    assert_eq!(env.ok(&["images"]), "");
}

#[test]
fn tampered_pull_exits_with_integrity_code() {
    let env = Env::new();
    let layers = [
        Layer { ops: vec![file("a", "1")] },
        Layer { ops: vec![file("b", "2")] },
        Layer { ops: vec![file("c", "3")] },
    ];
    let img = FixtureImage::from_layers(json!({"config": {}}), &layers);
    let reg = FixtureRegistry::start();
    reg.add_image("team/app", "latest", &img);
    reg.tamper(&img.layer_digests()[2]);
    let out = env.run(&["pull", "--insecure", &format!("{}/team/app", reg.host())]);
    assert_eq!(out.status.code(), Some(3), "{}", errtext(&out));
    assert_eq!(env.ok(&["images"]), "");
    let missing = env.run(&["pull", "--insecure", &format!("{}/team/none", reg.host())]);
    assert_eq!(missing.status.code(), Some(2), "{}", errtext(&missing));
}

#[test]
fn run_options_compose() {
    let env = Env::new();
    let Some(base) = base_tarball(env.dir.path(), |_| true) else { return };
    env.import(&base, "c");
    let shared = env.path("shared");
    fs::create_dir(&shared).unwrap();
    fs::write(shared.join("note"), "host file\n").unwrap();
    let bind = format!("{}:/mnt", shared.display());
    let out = env
        .cmd(&[
            "run", "-v", &bind, "-e", "FOO=bar", "--env=FROM_HOST", "--workdir=/tmp", "--user=root", "c", "sh", "-c",
            "pwd; echo $FOO $FROM_HOST $USER; cat /mnt/note; ls -a /mnt | sort; exit 4",
        ])
        .env("FROM_HOST", "copied")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", errtext(&out));
    assert_eq!(text(&out), "/tmp\nbar copied root\nhost file\n.\n..\nnote\n");

    // Options after the container belong to the command.
    assert_eq!(env.ok(&["run", "c", "ls", "-a", "/etc/msg"]), "/etc/msg\n");
    let missing = env.run(&["run", "c", "/usr/sbin/ifconfig"]);
    assert_eq!(missing.status.code(), Some(2));
    let nocmd = env.run(&["run", "c"]);
    assert_eq!(nocmd.status.code(), Some(1));
    let badbind = env.run(&["run", "-v", "/no/such/dir:/x", "c", "true"]);
    assert_eq!(badbind.status.code(), Some(2), "{}", errtext(&badbind));
}

#[test]
fn setup_persists_the_mode_and_reverts() {
    let env = Env::new();
    let Some(base) = base_tarball(env.dir.path(), |_| true) else { return };
    let (id, root) = env.import(&base, "c");
    let before = hash_multiset(&root);
    assert_eq!(env.ok(&["setup", "c"]), format!("{id}\tP1\t{}\n", udocker_core::ExecMode::P1.description()));
    let out = env.ok(&["setup", "--execmode=F3", "c"]);
    assert!(out.starts_with(&format!("{id}\tF3\trestored=0\tpatched=")), "{out}");
    assert_ne!(hash_multiset(&root), before);
    assert!(env.ok(&["ps"]).contains("\tF3\t"));
    assert_eq!(env.ok(&["run", "c", "cat", "/etc/msg"]), "inside\n");
    env.ok(&["setup", "--execmode=P1", "c"]);
    assert_eq!(hash_multiset(&root), before);
    // A run with --execmode changes the recorded mode too.
    assert_eq!(env.ok(&["run", "--execmode=F1", "c", "cat", "/etc/msg"]), "inside\n");
    assert!(env.ok(&["ps"]).contains("\tF1\t"));
}

#[test]
fn export_and_import_round_trip() {
    let env = Env::new();
    let Some(base) = base_tarball(env.dir.path(), |_| true) else { return };
    let (_, root) = env.import(&base, "c");
    env.ok(&["run", "c", "sh", "-c", "echo changed > /etc/msg"]);
    env.ok(&["setup", "--execmode=F3", "c"]);
    let out = env.path("out.tar");
    env.ok(&["export", "-o", out.to_str().unwrap(), "c"]);
    let (_, copy) = env.import(&out, "d");
    assert_eq!(hash_multiset(&copy), hash_multiset(&root));
    assert_eq!(fs::read_to_string(copy.join("etc/msg")).unwrap(), "changed\n");
}

#[test]
fn install_is_idempotent_and_checks_tarballs() {
    let env = Env::new();
    let first = env.ok(&["install"]);
    assert!(first.starts_with("installed\t"), "{first}");
    let lib = env.repo.join("lib/libudocker_interposer.so");
    assert!(lib.is_file());
    assert!(env.ok(&["install"]).starts_with("already-installed\t"));

    let tarball = env.path("tools.tar.gz");
    env.ok(&["install", "--pack", tarball.to_str().unwrap()]);
    let good = fs::read(&tarball).unwrap();
    let marker = fs::read(env.repo.join("lib/install.json")).unwrap();

    let mut bad = good.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x01;
    fs::write(&tarball, &bad).unwrap();
    let out = env.run(&["install", "--force", "--from", tarball.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", errtext(&out));
    assert_eq!(fs::read(env.repo.join("lib/install.json")).unwrap(), marker);

    fs::write(&tarball, &good).unwrap();
    let again = env.ok(&["install", "--force", "--from", tarball.to_str().unwrap()]);
    assert!(again.starts_with("installed\t"), "{again}");
    let nosum = env.path("copy.tar.gz");
    fs::copy(&tarball, &nosum).unwrap();
    assert_eq!(env.run(&["install", "--force", "--from", nosum.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn first_loader_run_installs_support_files() {
    let env = Env::new();
    let Some(base) = base_tarball(env.dir.path(), |_| true) else { return };
    env.import(&base, "c");
    assert!(!env.repo.join("lib/install.json").exists());
    assert_eq!(env.ok(&["run", "--execmode=F1", "c", "cat", "/etc/msg"]), "inside\n");
    assert!(env.repo.join("lib/install.json").is_file());
}

#[test]
fn bench_writes_csv_and_chart() {
    let env = Env::new();
    let Some(base) = base_tarball(env.dir.path(), |root| {
        udocker_testkit::cprog::compile(udocker_testkit::cprog::STAT_LOOP, &root.join("bin/statloop"), &[])
    }) else {
        return;
    };
    let (_, root) = env.import(&base, "c");
    let manifest = env.path("bench.toml");
    let text = format!(
        "name = \"stat\"\ncontainer = \"c\"\ncommand = [\"statloop\", \"/etc/msg\", \"200\"]\n\
         native_command = [{:?}, {:?}, \"200\"]\nmodes = [\"native\", \"P1\", \"P2\"]\nrepetitions = 5\n",
        root.join("bin/statloop"),
        root.join("etc/msg")
    );
    fs::write(&manifest, text).unwrap();
    let csv = env.path("out.csv");
    let svg = env.path("out.svg");
    env.ok(&["bench", manifest.to_str().unwrap(), "--csv", csv.to_str().unwrap(), "--svg", svg.to_str().unwrap()]);
    let table = fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(fs::read_to_string(&svg).unwrap().contains("data-mode=\"P2\""));
}

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use anyhow::Context;
use udocker_core::bench::{run_matrix, Manifest, Measurement, RowStatus};
use udocker_core::engine::{self, setup_mode, ContainerDirs, EngineOptions, StdFds};
use udocker_core::layers::export_tree;
use udocker_core::metadata::{build_exec_spec, parse_config, ExecSpec, HostContext, Overrides};
use udocker_core::registry::{ClientOptions, RegistryClient};
use udocker_core::repo::{default_root, ImageRef, Repo, RepoError};
use udocker_core::ExecMode;

use crate::args::{Globals, Operation};
use crate::install::{self, Installed};
use crate::CliError;

fn open_repo(g: &Globals) -> anyhow::Result<Repo> {
    let root = match &g.repo {
        Some(r) => r.clone(),
        None => default_root()?,
    };
    Ok(Repo::open(&root)?)
}

fn engine_options(repo: &Repo) -> EngineOptions {
    EngineOptions {
        interposer: install::ensure(repo.layout()),
        ..EngineOptions::default()
    }
}

/// A container id from an id or alias.
fn container_id(repo: &Repo, name: &str) -> anyhow::Result<String> {
    Ok(repo.resolve(name)?)
}

/// Resolves `target` to a container or, failing that, a local image.
enum Target {
    Container(String),
    Image(ImageRef),
}

fn target(repo: &Repo, name: &str) -> anyhow::Result<Target> {
    match repo.resolve(name) {
        Ok(id) => return Ok(Target::Container(id)),
        Err(RepoError::NotFound(_)) => {}
        Err(e) => return Err(e.into()),
    }
    let image: ImageRef = name
        .parse()
        .map_err(|_| CliError::NotFound(format!("no container or image named {name}")))?;
    repo.image(&image)
        .map_err(|_| CliError::NotFound(format!("no container or image named {name}")))?;
    Ok(Target::Image(image))
}

fn create(repo: &Repo, image: &ImageRef, name: Option<&str>) -> anyhow::Result<String> {
    let record = repo.create_container(image)?;
    if let Some(n) = name {
        if let Err(e) = repo.set_name(&record.id, n) {
            let _ = repo.remove_container(&record.id);
            return Err(e.into());
        }
    }
    Ok(record.id)
}

/// The launch description for a run of container `id`.
pub fn exec_spec(repo: &Repo, id: &str, ov: &Overrides) -> anyhow::Result<ExecSpec> {
    let record = repo.container(id)?;
    let cfg = parse_config(&repo.container_config(id)?)?;
    let passwd = fs::read_to_string(record.rootfs.join("etc/passwd")).ok();
    let mut ov = ov.clone();
    ov.mode = ov.mode.or(Some(record.exec_mode));
    Ok(build_exec_spec(&cfg, &ov, &HostContext::current(), passwd.as_deref())?)
}

fn run(repo: &Repo, container: &str, name: Option<&str>, ov: &Overrides) -> anyhow::Result<i32> {
    let id = match target(repo, container)? {
        Target::Container(id) => {
            if let Some(n) = name {
                repo.set_name(&id, n)?;
            }
            id
        }
        Target::Image(image) => {
            let id = create(repo, &image, name)?;
            log::info!("created container {id} from {image}");
            id
        }
    };
    let spec = exec_spec(repo, &id, ov)?;
    let ct = ContainerDirs::new(repo.container_path(&id));
    let opts = engine_options(repo);
    if ov.mode.is_some() {
        repo.set_exec_mode(&id, spec.mode)?;
    }
    let outcome = engine::run(&ct, &spec, &opts)?;
    if outcome.mode != spec.mode {
        log::warn!("ran with {} instead of {}", outcome.mode, spec.mode);
    }
    Ok(outcome.exit_code)
}

fn setup(repo: &Repo, container: &str, mode: Option<ExecMode>) -> anyhow::Result<()> {
    let id = container_id(repo, container)?;
    let record = repo.container(&id)?;
    let Some(mode) = mode else {
        println!("{id}\t{}\t{}", record.exec_mode, record.exec_mode.description());
        return Ok(());
    };
    let ct = ContainerDirs::new(repo.container_path(&id));
    let report = setup_mode(&ct, mode, &engine_options(repo))?;
    repo.set_exec_mode(&id, mode)?;
    println!("{id}\t{mode}\trestored={}\tpatched={}", report.restored, report.patched);
    Ok(())
}

fn remove_container(repo: &Repo, name: &str) -> anyhow::Result<()> {
    let id = container_id(repo, name)?;
    repo.remove_container(&id)?;
    println!("{id}");
    Ok(())
}

fn protect(repo: &Repo, target_name: &str, on: bool) -> anyhow::Result<()> {
    match target(repo, target_name)? {
        Target::Container(id) => repo.set_container_protected(&id, on)?,
        Target::Image(image) => repo.set_image_protected(&image, on)?,
    }
    Ok(())
}

fn export(repo: &Repo, container: &str, output: &Path) -> anyhow::Result<()> {
    let id = container_id(repo, container)?;
    let record = repo.container(&id)?;
    let ct = ContainerDirs::new(repo.container_path(&id));
    if record.exec_mode.is_loader() {
        // Patched files must not leak into the archive.
        setup_mode(&ct, ExecMode::P1, &EngineOptions::default())?;
        repo.set_exec_mode(&id, ExecMode::P1)?;
        log::warn!("{id}: switched to P1 to export unpatched files");
    }
    let mut out: Box<dyn Write> = if output == Path::new("-") {
        Box::new(io::stdout().lock())
    } else {
        Box::new(io::BufWriter::new(
            fs::File::create(output).with_context(|| output.display().to_string())?,
        ))
    };
    export_tree(&record.rootfs, &mut out)?;
    out.flush()?;
    Ok(())
}

fn import(repo: &Repo, tarball: &Path, name: Option<&str>) -> anyhow::Result<()> {
    let mut f = fs::File::open(tarball).map_err(|e| CliError::NotFound(format!("{}: {e}", tarball.display())))?;
    let record = repo.import_container(&mut f)?;
    if let Some(n) = name {
        repo.set_name(&record.id, n)?;
    }
    println!("{}", record.id);
    Ok(())
}

/// Runs the workload on the host: `host_argv` when given, else the
/// container's program with the container command line.
fn native(repo: &Repo, id: &str, spec: &ExecSpec, host_argv: Option<&[String]>) -> anyhow::Result<Measurement> {
    let (program, args): (PathBuf, &[String]) = match host_argv {
        Some(argv) => (PathBuf::from(&argv[0]), &argv[1..]),
        None => {
            let ct = ContainerDirs::new(repo.container_path(id));
            let map = engine::container_map(&ct, spec)?;
            (engine::locate_program(&map, spec)?, &spec.argv[1..])
        }
    };
    let start = Instant::now();
    let status = Command::new(&program)
        .args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .status()
        .with_context(|| program.display().to_string())?;
    Ok(Measurement {
        seconds: start.elapsed().as_secs_f64(),
        exit_code: status.code().unwrap_or(-1),
        stops: None,
    })
}

fn in_mode(repo: &Repo, id: &str, spec: &ExecSpec, opts: &EngineOptions) -> anyhow::Result<Measurement> {
    let ct = ContainerDirs::new(repo.container_path(id));
    let null = fs::OpenOptions::new().read(true).write(true).open("/dev/null")?;
    use std::os::fd::AsRawFd;
    let fd = null.as_raw_fd();
    let opts = EngineOptions {
        fds: StdFds {
            stdin: fd,
            stdout: fd,
            stderr: 2,
        },
        ..opts.clone()
    };
    let start = Instant::now();
    let out = engine::run(&ct, spec, &opts)?;
    Ok(Measurement {
        seconds: start.elapsed().as_secs_f64(),
        exit_code: out.exit_code,
        stops: out.stats.map(|s| s.stops),
    })
}

fn bench(repo: &Repo, manifest: &Path, csv: Option<&Path>, svg: Option<&Path>) -> anyhow::Result<i32> {
    let m = Manifest::load(manifest)?;
    let id = container_id(repo, &m.container)?;
    let ov = Overrides {
        argv: m.command.clone(),
        ..Overrides::default()
    };
    let base = exec_spec(repo, &id, &ov)?;
    let opts = engine_options(repo);
    let mut prepared: Option<String> = None;
    let mut runner = |tag: &str| -> Result<Measurement, String> {
        if tag == "native" {
            return native(repo, &id, &base, m.native_command.as_deref()).map_err(|e| format!("{e:#}"));
        }
        let mode: ExecMode = tag.parse().map_err(|e| format!("{e}"))?;
        let spec = ExecSpec { mode, ..base.clone() };
        if prepared.as_deref() != Some(tag) {
            // Preparation is not part of the timed run.
            setup_mode(&ContainerDirs::new(repo.container_path(&id)), mode, &opts).map_err(|e| e.to_string())?;
            prepared = Some(tag.to_string());
        }
        in_mode(repo, &id, &spec, &opts).map_err(|e| format!("{e:#}"))
    };
    let report = run_matrix(&m, &mut runner)?;
    let record = repo.container(&id)?;
    setup_mode(&ContainerDirs::new(repo.container_path(&id)), record.exec_mode, &opts)?;
    match csv {
        Some(p) => report.write_csv(&mut fs::File::create(p).with_context(|| p.display().to_string())?)?,
        None => report.write_csv(&mut io::stdout().lock())?,
    }
    if let Some(p) = svg {
        fs::write(p, report.svg()).with_context(|| p.display().to_string())?;
    }
    let failed = report.rows.iter().filter(|r| matches!(r.status, RowStatus::Failed(_))).count();
    for r in &report.rows {
        if let RowStatus::Failed(why) = &r.status {
            log::error!("{}: {why}", r.mode);
        }
    }
    Ok(if failed == 0 { 0 } else { crate::EXIT_OTHER })
}

fn print_install(i: &Installed) {
    match i {
        Installed::Fresh(m) => println!("installed\t{}\t{}", m.version, m.sha256),
        Installed::Already(m) => println!("already-installed\t{}\t{}", m.version, m.sha256),
    }
}

/// Carries out one operation. Returns the exit code on success.
pub fn dispatch(g: &Globals, op: Operation) -> anyhow::Result<i32> {
    if let Operation::Version = op {
        println!("udocker {}", install::VERSION);
        return Ok(0);
    }
    if let Operation::Install { pack: Some(out), .. } = &op {
        let sum = install::pack(out)?;
        println!("{}\t{sum}", out.display());
        return Ok(0);
    }
    let repo = open_repo(g)?;
    match op {
        Operation::Version | Operation::Install { pack: Some(_), .. } => unreachable!(),
        Operation::Install { from, sha256, force, .. } => {
            print_install(&install::install(repo.layout(), from.as_deref(), sha256.as_deref(), force)?);
        }
        Operation::Pull { image, insecure, credentials } => {
            let client = RegistryClient::new(ClientOptions {
                insecure,
                credentials,
                ..ClientOptions::default()
            });
            let report = client.pull(&repo, &image)?;
            println!(
                "{}\tlayers={}\tdownloaded={}\treused={}",
                report.image,
                report.layers.len(),
                report.downloaded,
                report.reused
            );
        }
        Operation::Images => {
            for image in repo.images()? {
                let protected = repo.image(&image).map(|e| e.protected).unwrap_or(false);
                println!("{image}{}", if protected { "\tprotected" } else { "" });
            }
        }
        Operation::Create { image, name } => println!("{}", create(&repo, &image, name.as_deref())?),
        Operation::Name { container, name } => {
            let id = container_id(&repo, &container)?;
            repo.set_name(&id, &name)?;
        }
        Operation::Rmname { name } => repo.remove_name(&name)?,
        Operation::Ps => {
            for c in repo.containers()? {
                let names: Vec<&str> = c.names.iter().map(String::as_str).collect();
                let image = c.image.as_ref().map(|i| i.to_string()).unwrap_or_else(|| "-".into());
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    c.id,
                    c.exec_mode,
                    if c.protected { "P" } else { "-" },
                    if names.is_empty() { "-".into() } else { names.join(",") },
                    image
                );
            }
        }
        Operation::Run { container, name, overrides } => return run(&repo, &container, name.as_deref(), &overrides),
        Operation::Setup { container, mode } => setup(&repo, &container, mode)?,
        Operation::Rm { containers } => {
            let mut first_err = None;
            for c in &containers {
                if let Err(e) = remove_container(&repo, c) {
                    eprintln!("udocker: error: {c}: {e:#}");
                    first_err.get_or_insert(e);
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Operation::Rmi { image } => repo.remove_image(&image)?,
        Operation::Export { container, output } => export(&repo, &container, &output)?,
        Operation::Import { tarball, name } => import(&repo, &tarball, name.as_deref())?,
        Operation::Protect { target, on } => protect(&repo, &target, on)?,
        Operation::Bench { manifest, csv, svg } => return bench(&repo, &manifest, csv.as_deref(), svg.as_deref()),
    }
    Ok(0)
}

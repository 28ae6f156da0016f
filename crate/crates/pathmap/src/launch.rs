//! Exec planning for the loader-based modes, shared by the engine that
//! starts the first process and the preloaded interposer that handles every
//! later exec.
//!
//! The configuration travels between processes in `UDOCKER_FC_*`
//! environment variables, which the interposer hides from the program.

use std::ffi::OsStr;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

use udocker_elf::tree::{patch_one, TreeSpec};
use udocker_elf::Journal;

use crate::{plan_exec, Bind, ExecPlan, HostFs, PathError, PathMap};

pub const ENV_MODE: &str = "UDOCKER_FC_MODE";
pub const ENV_ROOT: &str = "UDOCKER_FC_ROOT";
pub const ENV_BINDS: &str = "UDOCKER_FC_BINDS";
pub const ENV_LOADER: &str = "UDOCKER_FC_LOADER";
pub const ENV_LIBPATH: &str = "UDOCKER_FC_LIBPATH";
pub const ENV_PRELOAD: &str = "UDOCKER_FC_PRELOAD";
pub const ENV_JOURNAL: &str = "UDOCKER_FC_JOURNAL";
pub const ENV_LIBDIRS: &str = "UDOCKER_FC_LIBDIRS";
pub const ENV_USER_LDPATH: &str = "UDOCKER_FC_USER_LDPATH";
/// File name of the built interposer library.
pub const INTERPOSER_FILE: &str = "libudocker_interposer.so";
/// Prefix shared by every control variable.
pub const ENV_PREFIX: &str = "UDOCKER_FC_";

const LOADER_HEAD: usize = 4 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoaderMode {
    F1,
    F2,
    F3,
    F4,
}

impl LoaderMode {
    pub fn name(self) -> &'static str {
        match self {
            LoaderMode::F1 => "F1",
            LoaderMode::F2 => "F2",
            LoaderMode::F3 => "F3",
            LoaderMode::F4 => "F4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "F1" => LoaderMode::F1,
            "F2" => LoaderMode::F2,
            "F3" => LoaderMode::F3,
            "F4" => LoaderMode::F4,
            _ => return None,
        })
    }
}

/// Everything an exec inside a loader-mode container needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchConfig {
    pub mode: LoaderMode,
    pub root: PathBuf,
    pub binds: Vec<Bind>,
    /// Directory holding neutralized loader copies (F2).
    pub loader_dir: Option<PathBuf>,
    /// Host directories searched for libraries after the user's own.
    pub libpath: Vec<PathBuf>,
    /// The interposer library.
    pub preload: PathBuf,
    /// Patch journal, for patching on first exec (F4).
    pub journal: Option<PathBuf>,
    /// Container library directories written into patched search paths.
    pub lib_dirs: Vec<String>,
}

fn join_paths<'a>(it: impl IntoIterator<Item = &'a Path>) -> String {
    it.into_iter().map(|p| p.to_string_lossy().into_owned()).collect::<Vec<_>>().join(":")
}

impl LaunchConfig {
    pub fn map(&self) -> PathMap {
        PathMap::new(&self.root, self.binds.clone())
    }

    /// The control variables describing this configuration.
    pub fn to_env(&self) -> Vec<(String, String)> {
        let binds = self
            .binds
            .iter()
            .map(|b| format!("{}\t{}", b.host.display(), b.container.display()))
            .collect::<Vec<_>>()
            .join("\n");
        let mut env = vec![
            (ENV_MODE.to_string(), self.mode.name().to_string()),
            (ENV_ROOT.to_string(), self.root.to_string_lossy().into_owned()),
            (ENV_BINDS.to_string(), binds),
            (ENV_LIBPATH.to_string(), join_paths(self.libpath.iter().map(PathBuf::as_path))),
            (ENV_PRELOAD.to_string(), self.preload.to_string_lossy().into_owned()),
            (ENV_LIBDIRS.to_string(), self.lib_dirs.join(":")),
        ];
        if let Some(d) = &self.loader_dir {
            env.push((ENV_LOADER.to_string(), d.to_string_lossy().into_owned()));
        }
        if let Some(j) = &self.journal {
            env.push((ENV_JOURNAL.to_string(), j.to_string_lossy().into_owned()));
        }
        env
    }

    /// Reads the configuration back; `None` when the mode or root is unset.
    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> Option<Self> {
        let mode = LoaderMode::parse(&get(ENV_MODE)?)?;
        let root = PathBuf::from(get(ENV_ROOT)?);
        let binds = get(ENV_BINDS)
            .unwrap_or_default()
            .lines()
            .filter_map(|l| l.split_once('\t'))
            .map(|(h, c)| Bind::new(h, c))
            .collect();
        let split = |v: Option<String>| -> Vec<String> {
            v.unwrap_or_default().split(':').filter(|s| !s.is_empty()).map(str::to_string).collect()
        };
        Some(LaunchConfig {
            mode,
            root,
            binds,
            loader_dir: get(ENV_LOADER).map(PathBuf::from),
            libpath: split(get(ENV_LIBPATH)).into_iter().map(PathBuf::from).collect(),
            preload: PathBuf::from(get(ENV_PRELOAD).unwrap_or_default()),
            journal: get(ENV_JOURNAL).map(PathBuf::from),
            lib_dirs: split(get(ENV_LIBDIRS)),
        })
    }
}

/// The host-level exec that carries out a container exec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Launch {
    pub path: PathBuf,
    pub argv: Vec<Vec<u8>>,
    pub env: Vec<Vec<u8>>,
    pub plan: ExecPlan,
}

#[derive(Debug, thiserror::Error)]
pub enum LaunchError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("{0}: statically linked programs cannot run in loader modes, use P1 or P2")]
    Static(PathBuf),
}

impl LaunchError {
    pub fn errno(&self) -> i32 {
        match self {
            LaunchError::Path(e) => e.errno(),
            LaunchError::Static(_) => libc::ENOEXEC,
        }
    }
}

fn env_key(entry: &[u8]) -> &[u8] {
    entry.split(|&b| b == b'=').next().unwrap_or(entry)
}

/// Translates a colon separated container library path to host paths.
/// Relative entries and `$ORIGIN` forms are kept as they are.
pub fn translate_library_path(map: &PathMap, fs: &dyn HostFs, value: &[u8]) -> Vec<u8> {
    let mut out: Vec<Vec<u8>> = Vec::new();
    for entry in value.split(|&b| b == b':') {
        if entry.starts_with(b"/") {
            let host = map
                .resolve(fs, Path::new("/"), entry, true)
                .map(|r| r.host)
                .unwrap_or_else(|_| map.to_host_lexical(Path::new(OsStr::from_bytes(entry))));
            out.push(host.as_os_str().as_bytes().to_vec());
        } else {
            out.push(entry.to_vec());
        }
    }
    out.join(&b':')
}

/// Builds the environment of the new program: the caller's, minus any
/// loader or control variables, plus the current ones.
pub fn launch_env(cfg: &LaunchConfig, fs: &dyn HostFs, env: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let map = cfg.map();
    let mut user_ld: Option<Vec<u8>> = None;
    let mut out: Vec<Vec<u8>> = Vec::with_capacity(env.len() + 12);
    for e in env {
        let key = env_key(e);
        if key == b"LD_LIBRARY_PATH" {
            user_ld = Some(e.get(key.len() + 1..).unwrap_or_default().to_vec());
        } else if key != b"LD_PRELOAD" && !key.starts_with(ENV_PREFIX.as_bytes()) {
            out.push(e.clone());
        }
    }
    for (k, v) in cfg.to_env() {
        out.push(format!("{k}={v}").into_bytes());
    }
    out.push(format!("LD_PRELOAD={}", cfg.preload.display()).into_bytes());
    let mut ld = Vec::new();
    if let Some(u) = &user_ld {
        out.push([ENV_USER_LDPATH.as_bytes(), b"=", u].concat());
        if !u.is_empty() {
            ld = translate_library_path(&map, fs, u);
        }
    }
    for dir in &cfg.libpath {
        if !ld.is_empty() {
            ld.push(b':');
        }
        ld.extend_from_slice(dir.as_os_str().as_bytes());
    }
    out.push([b"LD_LIBRARY_PATH=".as_slice(), &ld].concat());
    out
}

/// True when the loader at `host` understands `--argv0` (glibc 2.33+).
fn supports_argv0(fs: &dyn HostFs, host: &Path) -> bool {
    fs.read_head(host, LOADER_HEAD)
        .map(|d| d.windows(7).any(|w| w == b"--argv0"))
        .unwrap_or(false)
}

fn explicit(fs: &dyn HostFs, loader_host: &Path, loader_container: &Path, plan: &ExecPlan) -> (PathBuf, Vec<Vec<u8>>) {
    let mut argv = vec![loader_container.as_os_str().as_bytes().to_vec()];
    if supports_argv0(fs, loader_host) {
        argv.push(b"--argv0".to_vec());
        argv.push(plan.argv.first().cloned().unwrap_or_default());
    }
    argv.push(plan.host_path.as_os_str().as_bytes().to_vec());
    argv.extend(plan.argv.iter().skip(1).cloned());
    (loader_host.to_path_buf(), argv)
}

/// Works out the host exec for `execve(path, argv, env)` issued inside a
/// loader-mode container with container working directory `cwd`.
pub fn plan_launch(
    cfg: &LaunchConfig,
    fs: &dyn HostFs,
    cwd: &Path,
    path: &[u8],
    argv: Vec<Vec<u8>>,
    env: &[Vec<u8>],
) -> Result<Launch, LaunchError> {
    let map = cfg.map();
    let plan = plan_exec(&map, fs, cwd, path, argv)?;
    let Some(loader) = plan.loader.clone() else {
        return Err(LaunchError::Static(plan.container_path));
    };
    let (exe, argv) = match cfg.mode {
        LoaderMode::F1 => explicit(fs, &loader.host, &loader.container, &plan),
        LoaderMode::F2 => {
            let copy = cfg
                .loader_dir
                .as_ref()
                .zip(loader.container.file_name())
                .map(|(d, n)| d.join(n))
                .filter(|p| fs.node(p).is_some())
                .unwrap_or_else(|| loader.host.clone());
            explicit(fs, &copy, &loader.container, &plan)
        }
        LoaderMode::F3 if loader.prefixed => (plan.host_path.clone(), plan.argv.clone()),
        LoaderMode::F3 => explicit(fs, &loader.host, &loader.container, &plan),
        LoaderMode::F4 => {
            let patched = match (&cfg.journal, plan.host_path.strip_prefix(&cfg.root)) {
                (_, _) if loader.prefixed => true,
                (Some(j), Ok(rel)) if map.to_container(&plan.host_path).as_deref() == Some(&plan.container_path) => {
                    let spec = TreeSpec::new(&cfg.root, cfg.lib_dirs.clone());
                    patch_one(&spec, &Journal::new(j), rel)
                        .map(|_| {
                            matches!(
                                udocker_elf::read_elf(&plan.host_path).map(|i| i.interpreter),
                                Ok(Some(i)) if Path::new(&i).starts_with(&cfg.root)
                            )
                        })
                        .unwrap_or(false)
                }
                _ => false,
            };
            if patched {
                (plan.host_path.clone(), plan.argv.clone())
            } else {
                explicit(fs, &loader.host, &loader.container, &plan)
            }
        }
    };
    Ok(Launch {
        path: exe,
        argv,
        env: launch_env(cfg, fs, env),
        plan,
    })
}

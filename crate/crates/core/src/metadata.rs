//! Image configuration, launch requests and OCI runtime documents.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use udocker_pathmap::{normalize, Bind};

use crate::engine::ExecMode;

pub const DEFAULT_PATH: &str = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";
/// Binds added by `--dri`.
pub const DRI_BINDS: [&str; 3] = ["/dev", "/sys", "/var/run"];
/// Binds added by `--hostauth`.
pub const HOSTAUTH_BINDS: [&str; 2] = ["/etc/passwd", "/etc/group"];
pub const OCI_VERSION: &str = "1.0.2";

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("malformed image configuration: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("image configuration field {field}: {msg}")]
    Type { field: &'static str, msg: String },
    #[error("no command to run: the image defines none and none was given")]
    NoCommand,
    #[error("bind {0:?}: host and container paths must be absolute")]
    RelativeBind(String),
    #[error("invalid --env {0:?}")]
    InvalidEnv(String),
    #[error("unknown user {0:?} in the container")]
    UnknownUser(String),
}

/// The subset of the image configuration that shapes a launch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContainerConfig {
    pub entrypoint: Vec<String>,
    pub cmd: Vec<String>,
    /// In image order, split at the first `=`.
    pub env: Vec<(String, String)>,
    pub working_dir: String,
    pub exposed_volumes: BTreeSet<String>,
    pub user: String,
}

fn string_list(v: Option<&Value>, field: &'static str) -> Result<Vec<String>, MetaError> {
    match v {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|i| {
                i.as_str().map(String::from).ok_or_else(|| MetaError::Type {
                    field,
                    msg: format!("expected a list of strings, found element {i}"),
                })
            })
            .collect(),
        Some(other) => Err(MetaError::Type {
            field,
            msg: format!("expected a list of strings, found {other}"),
        }),
    }
}

fn string_field(v: Option<&Value>, field: &'static str) -> Result<String, MetaError> {
    match v {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(MetaError::Type {
            field,
            msg: format!("expected a string, found {other}"),
        }),
    }
}

const HONORED: [&str; 6] = ["Entrypoint", "Cmd", "Env", "WorkingDir", "Volumes", "User"];

/// Reads the `config` section of an image configuration blob.
pub fn parse_config(config_json: &[u8]) -> Result<ContainerConfig, MetaError> {
    let doc: Value = serde_json::from_slice(config_json)?;
    let Some(section) = doc.get("config").filter(|c| !c.is_null()) else {
        return Ok(ContainerConfig::default());
    };
    let Some(obj) = section.as_object() else {
        return Err(MetaError::Type {
            field: "config",
            msg: "expected an object".into(),
        });
    };
    for key in obj.keys().filter(|k| !HONORED.contains(&k.as_str())) {
        log::debug!("image configuration: ignoring {key}");
    }
    let env = string_list(obj.get("Env"), "Env")?
        .into_iter()
        .map(|e| match e.split_once('=') {
            Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
            _ => Err(MetaError::Type {
                field: "Env",
                msg: format!("entry {e:?} is not KEY=VALUE"),
            }),
        })
        .collect::<Result<_, _>>()?;
    let exposed_volumes = match obj.get("Volumes") {
        Some(Value::Object(m)) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    };
    Ok(ContainerConfig {
        entrypoint: string_list(obj.get("Entrypoint"), "Entrypoint")?,
        cmd: string_list(obj.get("Cmd"), "Cmd")?,
        env,
        working_dir: string_field(obj.get("WorkingDir"), "WorkingDir")?,
        exposed_volumes,
        user: string_field(obj.get("User"), "User")?,
    })
}

/// Launch options given on the command line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    /// Replaces the image `Cmd` when non-empty.
    pub argv: Vec<String>,
    /// `KEY=VALUE`, or `KEY` to copy the host value.
    pub env: Vec<String>,
    /// `-v host[:container]`.
    pub volumes: Vec<String>,
    pub workdir: Option<String>,
    pub user: Option<String>,
    pub hostenv: bool,
    pub hostauth: bool,
    pub bindhome: bool,
    pub dri: bool,
    pub mode: Option<ExecMode>,
}

/// Facts about the invoking user and environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostContext {
    pub env: Vec<(String, String)>,
    pub home: Option<PathBuf>,
    pub uid: u32,
    pub gid: u32,
    pub username: String,
}

impl HostContext {
    pub fn current() -> Self {
        let uid = unsafe { libc::getuid() };
        let gid = unsafe { libc::getgid() };
        let mut username = std::env::var("USER").unwrap_or_default();
        let mut home = std::env::var_os("HOME").map(PathBuf::from);
        if let Ok(passwd) = std::fs::read_to_string("/etc/passwd") {
            if let Some(e) = passwd_entries(&passwd).find(|e| e.uid == uid) {
                username = e.name.to_string();
                home = home.or_else(|| Some(PathBuf::from(e.home)));
            }
        }
        HostContext {
            env: std::env::vars().collect(),
            home,
            uid,
            gid,
            username,
        }
    }

    fn var(&self, key: &str) -> Option<&str> {
        self.env.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// The identity shown to the contained program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub uid: u32,
    pub gid: u32,
    pub username: String,
}

struct PasswdEntry<'a> {
    name: &'a str,
    uid: u32,
    gid: u32,
    home: &'a str,
}

fn passwd_entries(text: &str) -> impl Iterator<Item = PasswdEntry<'_>> {
    text.lines().filter_map(|l| {
        let f: Vec<&str> = l.split(':').collect();
        if f.len() < 7 {
            return None;
        }
        Some(PasswdEntry {
            name: f[0],
            uid: f[2].parse().ok()?,
            gid: f[3].parse().ok()?,
            home: f[5],
        })
    })
}

impl Identity {
    /// Resolves `root`, `uid[:gid]` or a user name looked up in the
    /// container's passwd database.
    pub fn resolve(user: &str, container_passwd: Option<&str>) -> Result<Identity, MetaError> {
        let passwd = container_passwd.unwrap_or("");
        let (who, group) = match user.split_once(':') {
            Some((u, g)) => (u, Some(g)),
            None => (user, None),
        };
        let (uid, mut gid, username) = if who == "root" {
            (0, 0, "root".to_string())
        } else if let Ok(uid) = who.parse::<u32>() {
            let e = passwd_entries(passwd).find(|e| e.uid == uid);
            (uid, e.as_ref().map_or(uid, |e| e.gid), e.map_or_else(|| who.to_string(), |e| e.name.to_string()))
        } else {
            let e = passwd_entries(passwd)
                .find(|e| e.name == who)
                .ok_or_else(|| MetaError::UnknownUser(user.to_string()))?;
            (e.uid, e.gid, e.name.to_string())
        };
        if let Some(g) = group {
            gid = g.parse().map_err(|_| MetaError::UnknownUser(user.to_string()))?;
        }
        Ok(Identity { uid, gid, username })
    }

    pub fn home(&self, container_passwd: Option<&str>) -> Option<String> {
        passwd_entries(container_passwd.unwrap_or(""))
            .find(|e| e.uid == self.uid)
            .map(|e| e.home.to_string())
    }
}

/// A fully resolved launch request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecSpec {
    pub argv: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub cwd: PathBuf,
    pub binds: Vec<Bind>,
    pub identity: Identity,
    pub mode: ExecMode,
    pub host_env_passthrough: bool,
    pub bind_home: bool,
}

impl ExecSpec {
    /// `KEY=VALUE` strings in key order.
    pub fn env_list(&self) -> Vec<String> {
        self.env.iter().map(|(k, v)| format!("{k}={v}")).collect()
    }
}

fn parse_bind(spec: &str) -> Result<Bind, MetaError> {
    let (host, container) = spec.split_once(':').unwrap_or((spec, spec));
    if !host.starts_with('/') || !container.starts_with('/') {
        return Err(MetaError::RelativeBind(spec.to_string()));
    }
    Ok(Bind::new(host, container))
}

/// Merges image configuration and command line options.
///
/// Environment precedence, lowest first: image, host (with `--hostenv`),
/// `--env`.
pub fn build_exec_spec(
    cfg: &ContainerConfig,
    ov: &Overrides,
    host: &HostContext,
    container_passwd: Option<&str>,
) -> Result<ExecSpec, MetaError> {
    let mut argv = cfg.entrypoint.clone();
    if ov.argv.is_empty() {
        argv.extend(cfg.cmd.iter().cloned());
    } else {
        argv.extend(ov.argv.iter().cloned());
    }
    if argv.is_empty() {
        return Err(MetaError::NoCommand);
    }

    let mut env = BTreeMap::new();
    for (k, v) in &cfg.env {
        env.insert(k.clone(), v.clone());
    }
    if ov.hostenv {
        for (k, v) in &host.env {
            env.insert(k.clone(), v.clone());
        }
    }
    for e in &ov.env {
        match e.split_once('=') {
            Some((k, v)) if !k.is_empty() => {
                env.insert(k.to_string(), v.to_string());
            }
            Some(_) => return Err(MetaError::InvalidEnv(e.clone())),
            None if e.is_empty() => return Err(MetaError::InvalidEnv(e.clone())),
            None => {
                if let Some(v) = host.var(e) {
                    env.insert(e.clone(), v.to_string());
                }
            }
        }
    }
    env.entry("PATH".into()).or_insert_with(|| DEFAULT_PATH.to_string());

    let mut binds: Vec<Bind> = Vec::new();
    let mut push = |b: Bind| {
        if !binds.iter().any(|x| x.container == b.container) {
            binds.push(b);
        }
    };
    for v in &ov.volumes {
        push(parse_bind(v)?);
    }
    if ov.bindhome {
        if let Some(home) = &host.home {
            let h = home.to_string_lossy();
            push(parse_bind(&h)?);
        }
    }
    if ov.hostauth {
        for p in HOSTAUTH_BINDS {
            push(Bind::new(p, p));
        }
    }
    if ov.dri {
        for p in DRI_BINDS {
            push(Bind::new(p, p));
        }
    }

    let user = ov.user.as_deref().filter(|u| !u.is_empty()).or(Some(cfg.user.as_str()).filter(|u| !u.is_empty()));
    let identity = match user {
        Some(u) => Identity::resolve(u, container_passwd)?,
        None => Identity {
            uid: host.uid,
            gid: host.gid,
            username: host.username.clone(),
        },
    };
    if !env.contains_key("HOME") {
        let home = if ov.bindhome {
            host.home.as_ref().map(|h| h.to_string_lossy().into_owned())
        } else {
            None
        }
        .or_else(|| identity.home(container_passwd))
        .unwrap_or_else(|| if identity.uid == 0 { "/root".into() } else { "/".into() });
        env.insert("HOME".into(), home);
    }
    env.entry("USER".into()).or_insert_with(|| identity.username.clone());

    let cwd = ov
        .workdir
        .as_deref()
        .filter(|w| !w.is_empty())
        .unwrap_or(cfg.working_dir.as_str());
    let cwd = if cwd.is_empty() {
        PathBuf::from("/")
    } else {
        normalize(&Path::new("/").join(cwd))
    };

    Ok(ExecSpec {
        argv,
        env,
        cwd,
        binds,
        identity,
        mode: ov.mode.unwrap_or_default(),
        host_env_passthrough: ov.hostenv,
        bind_home: ov.bindhome,
    })
}

// OCI runtime configuration

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OciDocument {
    pub oci_version: String,
    pub process: OciProcess,
    pub root: OciRoot,
    pub hostname: String,
    pub mounts: Vec<OciMount>,
    pub linux: OciLinux,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OciProcess {
    pub terminal: bool,
    pub user: OciUser,
    pub args: Vec<String>,
    pub env: Vec<String>,
    pub cwd: String,
    pub no_new_privileges: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OciUser {
    pub uid: u32,
    pub gid: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OciRoot {
    pub path: String,
    pub readonly: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OciMount {
    pub destination: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OciLinux {
    pub namespaces: Vec<OciNamespace>,
    pub uid_mappings: Vec<OciIdMapping>,
    pub gid_mappings: Vec<OciIdMapping>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OciNamespace {
    #[serde(rename = "type")]
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OciIdMapping {
    #[serde(rename = "containerID")]
    pub container_id: u32,
    #[serde(rename = "hostID")]
    pub host_id: u32,
    pub size: u32,
}

fn mount(dest: &str, kind: &str, source: &str, options: &[&str]) -> OciMount {
    OciMount {
        destination: dest.into(),
        kind: kind.into(),
        source: source.into(),
        options: options.iter().map(|s| s.to_string()).collect(),
    }
}

/// Builds a rootless OCI configuration: the invoking user (`host_uid`,
/// `host_gid`) is the only id mapped, onto the identity of `spec`.
pub fn to_oci(spec: &ExecSpec, rootfs: &Path, host_uid: u32, host_gid: u32) -> OciDocument {
    let mut mounts = vec![
        mount("/proc", "proc", "proc", &[]),
        mount("/dev", "tmpfs", "tmpfs", &["nosuid", "strictatime", "mode=755", "size=65536k"]),
        mount("/dev/pts", "devpts", "devpts", &["nosuid", "noexec", "newinstance", "ptmxmode=0666", "mode=0620"]),
        mount("/dev/shm", "tmpfs", "shm", &["nosuid", "noexec", "nodev", "mode=1777", "size=65536k"]),
        mount("/sys", "bind", "/sys", &["rbind", "nosuid", "noexec", "nodev", "ro"]),
    ];
    for b in &spec.binds {
        let dest = b.container.to_string_lossy().into_owned();
        mounts.retain(|m| m.destination != dest);
        mounts.push(mount(&dest, "bind", &b.host.to_string_lossy(), &["rbind"]));
    }
    let ns = |k: &str| OciNamespace { kind: k.into() };
    OciDocument {
        oci_version: OCI_VERSION.into(),
        process: OciProcess {
            terminal: false,
            user: OciUser {
                uid: spec.identity.uid,
                gid: spec.identity.gid,
            },
            args: spec.argv.clone(),
            env: spec.env_list(),
            cwd: spec.cwd.to_string_lossy().into_owned(),
            no_new_privileges: true,
        },
        root: OciRoot {
            path: rootfs.to_string_lossy().into_owned(),
            readonly: false,
        },
        hostname: "udocker".into(),
        mounts,
        linux: OciLinux {
            namespaces: vec![ns("user"), ns("mount"), ns("pid")],
            uid_mappings: vec![OciIdMapping {
                container_id: spec.identity.uid,
                host_id: host_uid,
                size: 1,
            }],
            gid_mappings: vec![OciIdMapping {
                container_id: spec.identity.gid,
                host_id: host_gid,
                size: 1,
            }],
        },
    }
}

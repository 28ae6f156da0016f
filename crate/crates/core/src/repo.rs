//! The local repository: layer blobs, registered images and containers.
//!
//! ```text
//! <root>/layers/sha256:<hex>
//! <root>/repos/<registry>/<repository>/<tag>/{manifest.json,config.json,layers.list}
//! <root>/containers/<uuid>/{ROOT/,container.json,names}
//! <root>/bin, <root>/lib           engine support files
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::ExecMode;
use crate::layers::{self, ExtractionPolicy, LayerError};

pub const SUBDIRS: [&str; 5] = ["bin", "lib", "layers", "repos", "containers"];
pub const DEFAULT_REGISTRY: &str = "docker.io";
pub const DEFAULT_TAG: &str = "latest";

const MANIFEST_FILE: &str = "manifest.json";
const CONFIG_FILE: &str = "config.json";
const LAYERS_FILE: &str = "layers.list";
const RECORD_FILE: &str = "container.json";
const NAMES_FILE: &str = "names";
const PROTECT_FILE: &str = "protected";
pub const JOURNAL_FILE: &str = "patch.journal";

#[derive(Debug, thiserror::Error)]
pub enum RepoError {
    #[error("{0}: permission denied")]
    Permission(PathBuf),
    #[error("repository layout: {0}")]
    Layout(String),
    #[error("integrity: expected {expected}, content hashes to {actual}")]
    Integrity { expected: String, actual: String },
    #[error("malformed digest {0:?}")]
    InvalidDigest(String),
    #[error("malformed image reference {0:?}")]
    InvalidRef(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0} already in use")]
    Conflict(String),
    #[error("image {image} is incomplete: missing layer {digest}")]
    IncompleteImage { image: String, digest: String },
    #[error("{0} is protected")]
    Protected(String),
    #[error("invalid container name {0:?}")]
    InvalidName(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RepoError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::PermissionDenied {
            RepoError::Permission(path.to_path_buf())
        } else {
            RepoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Registry, repository and tag of an image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRef {
    pub registry: String,
    pub repository: String,
    pub tag: String,
}

impl ImageRef {
    /// Docker Hub repositories without a namespace get `library/`.
    pub fn new(registry: &str, repository: &str, tag: &str) -> Self {
        let repository = if registry == DEFAULT_REGISTRY && !repository.contains('/') {
            format!("library/{repository}")
        } else {
            repository.to_string()
        };
        ImageRef {
            registry: registry.to_string(),
            repository,
            tag: tag.to_string(),
        }
    }

    fn rel_dir(&self) -> PathBuf {
        Path::new(&self.registry).join(&self.repository).join(&self.tag)
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}:{}", self.registry, self.repository, self.tag)
    }
}

fn valid_component(c: &str) -> bool {
    !c.is_empty()
        && c != "."
        && c != ".."
        && c.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b"._-".contains(&b))
}

impl FromStr for ImageRef {
    type Err = RepoError;

    /// Accepts `[registry/]repository[:tag]`. The first component is a
    /// registry when it contains a dot or a port, or is `localhost`.
    /// Single-component Docker Hub names get the `library/` namespace.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RepoError::InvalidRef(s.to_string());
        if s.is_empty() || s.contains('@') || s.contains("//") {
            return Err(bad());
        }
        let (registry, rest) = match s.split_once('/') {
            Some((first, rest)) if first.contains('.') || first.contains(':') || first == "localhost" => {
                (first.to_string(), rest)
            }
            _ => (DEFAULT_REGISTRY.to_string(), s),
        };
        let (repository, tag) = match rest.rsplit_once(':') {
            Some((r, t)) if !t.contains('/') => (r, t),
            _ => (rest, DEFAULT_TAG),
        };
        if tag.is_empty()
            || tag.len() > 128
            || !tag.bytes().all(|b| b.is_ascii_alphanumeric() || b"._-".contains(&b))
            || !repository.split('/').all(valid_component)
        {
            return Err(bad());
        }
        let repository = if registry == DEFAULT_REGISTRY && !repository.contains('/') {
            format!("library/{repository}")
        } else {
            repository.to_string()
        };
        Ok(ImageRef {
            registry,
            repository,
            tag: tag.to_string(),
        })
    }
}

/// A content-addressed blob as listed in a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub digest: String,
    pub size: u64,
    #[serde(rename = "mediaType", default)]
    pub media_type: String,
}

/// Checks the `sha256:<64 lowercase hex>` form and returns the hex part.
pub fn digest_hex(digest: &str) -> Result<&str, RepoError> {
    match digest.strip_prefix("sha256:") {
        Some(hex) if hex.len() == 64 && hex.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) => Ok(hex),
        _ => Err(RepoError::InvalidDigest(digest.to_string())),
    }
}

pub fn sha256_digest(data: &[u8]) -> String {
    format!("sha256:{}", hex(&Sha256::digest(data)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A container as persisted in `container.json`, plus its aliases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerRecord {
    pub id: String,
    #[serde(skip)]
    pub names: BTreeSet<String>,
    pub image: Option<ImageRef>,
    #[serde(skip)]
    pub rootfs: PathBuf,
    pub exec_mode: ExecMode,
    #[serde(skip)]
    pub protected: bool,
}

/// Paths of an initialized repository.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepoLayout {
    pub root: PathBuf,
}

impl RepoLayout {
    pub fn bin(&self) -> PathBuf {
        self.root.join("bin")
    }
    pub fn lib(&self) -> PathBuf {
        self.root.join("lib")
    }
    pub fn layers(&self) -> PathBuf {
        self.root.join("layers")
    }
    pub fn repos(&self) -> PathBuf {
        self.root.join("repos")
    }
    pub fn containers(&self) -> PathBuf {
        self.root.join("containers")
    }
}

/// `$UDOCKER_DIR`, else `$HOME/.udocker`.
pub fn default_root() -> Result<PathBuf, RepoError> {
    if let Some(dir) = std::env::var_os("UDOCKER_DIR").filter(|d| !d.is_empty()) {
        return Ok(PathBuf::from(dir));
    }
    std::env::var_os("HOME")
        .filter(|h| !h.is_empty())
        .map(|h| PathBuf::from(h).join(".udocker"))
        .ok_or_else(|| RepoError::Layout("neither UDOCKER_DIR nor HOME is set".into()))
}

/// Creates the repository directories. Calling it again is harmless.
pub fn init_repo(root: &Path) -> Result<RepoLayout, RepoError> {
    match fs::metadata(root) {
        Ok(m) if !m.is_dir() => {
            return Err(RepoError::Layout(format!("{} exists and is not a directory", root.display())))
        }
        Ok(_) => {}
        Err(_) => fs::create_dir_all(root).map_err(io_err(root))?,
    }
    for sub in SUBDIRS {
        let p = root.join(sub);
        match fs::metadata(&p) {
            Ok(m) if m.is_dir() => {}
            Ok(_) => return Err(RepoError::Layout(format!("{} is not a directory", p.display()))),
            Err(_) => fs::create_dir(&p).map_err(io_err(&p))?,
        }
    }
    Ok(RepoLayout {
        root: root.to_path_buf(),
    })
}

/// Holds an exclusive `flock` for as long as it lives. Transient lock
/// files are unlinked while still locked.
struct LockGuard {
    _file: File,
    transient: Option<PathBuf>,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        if let Some(p) = &self.transient {
            let _ = fs::remove_file(p);
        }
    }
}

fn lock_file(path: &Path) -> Result<LockGuard, RepoError> {
    lock_inner(path, false)
}

fn lock_inner(path: &Path, transient: bool) -> Result<LockGuard, RepoError> {
    use std::os::unix::fs::MetadataExt;
    loop {
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        f.lock().map_err(io_err(path))?;
        // A previous holder may have unlinked the file we locked.
        let held = f.metadata().map_err(io_err(path))?;
        match fs::metadata(path) {
            Ok(m) if m.ino() == held.ino() && m.dev() == held.dev() => {
                return Ok(LockGuard {
                    _file: f,
                    transient: transient.then(|| path.to_path_buf()),
                })
            }
            _ => continue,
        }
    }
}

/// Outcome of [`Repo::store_layer`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredBlob {
    pub path: PathBuf,
    /// False when the blob was already present.
    pub fresh: bool,
}

/// A registered image as read back from `repos/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    pub reference: ImageRef,
    pub layers: Vec<String>,
    pub protected: bool,
}

#[derive(Debug, Clone)]
pub struct Repo {
    layout: RepoLayout,
}

impl Repo {
    pub fn open(root: &Path) -> Result<Self, RepoError> {
        Ok(Repo {
            layout: init_repo(root)?,
        })
    }

    pub fn layout(&self) -> &RepoLayout {
        &self.layout
    }

    pub fn layer_path(&self, digest: &str) -> Result<PathBuf, RepoError> {
        digest_hex(digest)?;
        Ok(self.layout.layers().join(digest))
    }

    pub fn has_layer(&self, digest: &str) -> bool {
        self.layer_path(digest).map(|p| p.is_file()).unwrap_or(false)
    }

    /// Stores a blob under its digest after verifying its content.
    ///
    /// Concurrent stores of one digest are serialized by a lock file; the
    /// blob becomes visible only once verified, through a rename.
    pub fn store_layer(&self, desc: &LayerDescriptor, blob: &mut dyn Read) -> Result<StoredBlob, RepoError> {
        let hex_part = digest_hex(&desc.digest)?.to_string();
        let dir = self.layout.layers();
        let path = dir.join(&desc.digest);
        let _lock = lock_inner(&dir.join(format!(".{}.lock", desc.digest)), true)?;
        if path.is_file() {
            return Ok(StoredBlob { path, fresh: false });
        }
        let tmp = dir.join(format!(".tmp-{hex_part}-{}", std::process::id()));
        let result = (|| {
            let mut out = File::create(&tmp).map_err(io_err(&tmp))?;
            let mut hasher = Sha256::new();
            let mut buf = vec![0u8; 1 << 16];
            loop {
                let n = blob.read(&mut buf).map_err(io_err(&tmp))?;
                if n == 0 {
                    break;
                }
                hasher.update(&buf[..n]);
                out.write_all(&buf[..n]).map_err(io_err(&tmp))?;
            }
            out.sync_all().map_err(io_err(&tmp))?;
            let actual = format!("sha256:{}", hex(hasher.finalize().as_slice()));
            if actual != desc.digest {
                return Err(RepoError::Integrity {
                    expected: desc.digest.clone(),
                    actual,
                });
            }
            fs::rename(&tmp, &path).map_err(io_err(&path))
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result.map(|()| StoredBlob { path, fresh: true })
    }

    /// Digests of all stored layer blobs.
    pub fn layers(&self) -> Result<Vec<String>, RepoError> {
        let dir = self.layout.layers();
        let mut out = Vec::new();
        for e in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let name = e.map_err(io_err(&dir))?.file_name().to_string_lossy().into_owned();
            if digest_hex(&name).is_ok() {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    fn image_dir(&self, image: &ImageRef) -> PathBuf {
        self.layout.repos().join(image.rel_dir())
    }

    /// Records an image whose layers are all stored. The tag directory is
    /// prepared aside and renamed into place, so listings never see a
    /// partially written image.
    pub fn register_image(&self, image: &ImageRef, manifest: &[u8], config: &[u8], layers: &[String]) -> Result<(), RepoError> {
        for d in layers {
            if !self.has_layer(d) {
                return Err(RepoError::IncompleteImage {
                    image: image.to_string(),
                    digest: d.clone(),
                });
            }
        }
        let dir = self.image_dir(image);
        let parent = dir.parent().expect("tag directory has a parent");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let staging = parent.join(format!(".{}.{}.new", image.tag, std::process::id()));
        let _ = fs::remove_dir_all(&staging);
        fs::create_dir(&staging).map_err(io_err(&staging))?;
        let write = |name: &str, data: &[u8]| fs::write(staging.join(name), data).map_err(io_err(&staging));
        write(MANIFEST_FILE, manifest)?;
        write(CONFIG_FILE, config)?;
        let mut list = layers.join("\n");
        list.push('\n');
        write(LAYERS_FILE, list.as_bytes())?;
        let protected = dir.join(PROTECT_FILE).exists();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        if protected {
            write(PROTECT_FILE, b"")?;
        }
        fs::rename(&staging, &dir).map_err(io_err(&dir))?;
        Ok(())
    }

    pub fn image(&self, image: &ImageRef) -> Result<ImageEntry, RepoError> {
        let dir = self.image_dir(image);
        if !dir.join(MANIFEST_FILE).is_file() || !dir.join(CONFIG_FILE).is_file() {
            return Err(RepoError::NotFound(format!("image {image}")));
        }
        let list = fs::read_to_string(dir.join(LAYERS_FILE)).map_err(|_| RepoError::NotFound(format!("image {image}")))?;
        Ok(ImageEntry {
            reference: image.clone(),
            layers: list.lines().filter(|l| !l.is_empty()).map(String::from).collect(),
            protected: dir.join(PROTECT_FILE).exists(),
        })
    }

    pub fn image_config(&self, image: &ImageRef) -> Result<Vec<u8>, RepoError> {
        let p = self.image_dir(image).join(CONFIG_FILE);
        fs::read(&p).map_err(|_| RepoError::NotFound(format!("image {image}")))
    }

    pub fn image_manifest(&self, image: &ImageRef) -> Result<Vec<u8>, RepoError> {
        let p = self.image_dir(image).join(MANIFEST_FILE);
        fs::read(&p).map_err(|_| RepoError::NotFound(format!("image {image}")))
    }

    /// All complete images, sorted.
    pub fn images(&self) -> Result<Vec<ImageRef>, RepoError> {
        let repos = self.layout.repos();
        let mut out = Vec::new();
        let mut stack = vec![repos.clone()];
        while let Some(dir) = stack.pop() {
            let Ok(rd) = fs::read_dir(&dir) else { continue };
            for e in rd.flatten() {
                let p = e.path();
                if !p.is_dir() || e.file_name().to_string_lossy().starts_with('.') {
                    continue;
                }
                if p.join(LAYERS_FILE).is_file() && p.join(MANIFEST_FILE).is_file() && p.join(CONFIG_FILE).is_file() {
                    let rel = p.strip_prefix(&repos).expect("under repos");
                    let parts: Vec<String> = rel.iter().map(|c| c.to_string_lossy().into_owned()).collect();
                    if parts.len() >= 3 {
                        out.push(ImageRef {
                            registry: parts[0].clone(),
                            repository: parts[1..parts.len() - 1].join("/"),
                            tag: parts[parts.len() - 1].clone(),
                        });
                    }
                } else {
                    stack.push(p);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Removes an image and every layer no other image references.
    pub fn remove_image(&self, image: &ImageRef) -> Result<(), RepoError> {
        let entry = self.image(image)?;
        if entry.protected {
            return Err(RepoError::Protected(format!("image {image}")));
        }
        let dir = self.image_dir(image);
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        let mut still_used = BTreeSet::new();
        for other in self.images()? {
            still_used.extend(self.image(&other)?.layers);
        }
        for d in entry.layers {
            if !still_used.contains(&d) {
                let p = self.layer_path(&d)?;
                let _ = fs::remove_file(p);
            }
        }
        // Prune empty repository directories up to repos/.
        let repos = self.layout.repos();
        let mut p = dir.parent().map(Path::to_path_buf);
        while let Some(d) = p {
            if d == repos || fs::remove_dir(&d).is_err() {
                break;
            }
            p = d.parent().map(Path::to_path_buf);
        }
        Ok(())
    }

    pub fn set_image_protected(&self, image: &ImageRef, on: bool) -> Result<(), RepoError> {
        self.image(image)?;
        set_marker(&self.image_dir(image).join(PROTECT_FILE), on)
    }

    // Containers

    fn container_dir(&self, id: &str) -> PathBuf {
        self.layout.containers().join(id)
    }

    pub fn container_path(&self, id: &str) -> PathBuf {
        self.container_dir(id)
    }

    pub fn journal_path(&self, id: &str) -> PathBuf {
        self.container_dir(id).join(JOURNAL_FILE)
    }

    /// Flattens an image into a new container.
    pub fn create_container(&self, image: &ImageRef) -> Result<ContainerRecord, RepoError> {
        let entry = self.image(image)?;
        let mut blobs = Vec::with_capacity(entry.layers.len());
        for d in &entry.layers {
            let p = self.layer_path(d)?;
            if !p.is_file() {
                return Err(RepoError::IncompleteImage {
                    image: image.to_string(),
                    digest: d.clone(),
                });
            }
            blobs.push(p);
        }
        let config = self.image_config(image)?;
        self.new_container(Some(image.clone()), &config, |root| {
            layers::flatten(&blobs, root, &ExtractionPolicy::default())?;
            Ok(())
        })
    }

    /// Creates a container from a tar stream of a root tree.
    pub fn import_container(&self, input: &mut dyn Read) -> Result<ContainerRecord, RepoError> {
        self.new_container(None, b"{}", |root| {
            layers::import_tree(input, root)?;
            Ok(())
        })
    }

    fn new_container(
        &self,
        image: Option<ImageRef>,
        config: &[u8],
        fill: impl FnOnce(&Path) -> Result<(), RepoError>,
    ) -> Result<ContainerRecord, RepoError> {
        let id = uuid::Uuid::new_v4().to_string();
        let dir = self.container_dir(&id);
        let root = dir.join("ROOT");
        let result = (|| {
            fs::create_dir(&dir).map_err(io_err(&dir))?;
            let _lock = lock_file(&dir.join(".lock"))?;
            fs::create_dir(&root).map_err(io_err(&root))?;
            fill(&root)?;
            layers::adjust_permissions(&root)?;
            fs::write(dir.join(CONFIG_FILE), config).map_err(io_err(&dir))?;
            fs::write(dir.join(NAMES_FILE), b"").map_err(io_err(&dir))?;
            let record = ContainerRecord {
                id: id.clone(),
                names: BTreeSet::new(),
                image,
                rootfs: root.clone(),
                exec_mode: ExecMode::default(),
                protected: false,
            };
            self.save_record(&record)?;
            Ok(record)
        })();
        if result.is_err() {
            let _ = remove_tree(&dir);
        }
        result
    }

    fn save_record(&self, record: &ContainerRecord) -> Result<(), RepoError> {
        let dir = self.container_dir(&record.id);
        let tmp = dir.join(".container.json.new");
        fs::write(&tmp, serde_json::to_vec_pretty(record)?).map_err(io_err(&tmp))?;
        fs::rename(&tmp, dir.join(RECORD_FILE)).map_err(io_err(&dir))
    }

    pub fn container(&self, id: &str) -> Result<ContainerRecord, RepoError> {
        let dir = self.container_dir(id);
        let data = fs::read(dir.join(RECORD_FILE)).map_err(|_| RepoError::NotFound(format!("container {id}")))?;
        let mut record: ContainerRecord = serde_json::from_slice(&data)?;
        record.names = read_names(&dir);
        record.rootfs = dir.join("ROOT");
        record.protected = dir.join(PROTECT_FILE).exists();
        Ok(record)
    }

    /// The image configuration saved with the container.
    pub fn container_config(&self, id: &str) -> Result<Vec<u8>, RepoError> {
        let p = self.container_dir(id).join(CONFIG_FILE);
        fs::read(&p).map_err(io_err(&p))
    }

    pub fn containers(&self) -> Result<Vec<ContainerRecord>, RepoError> {
        let dir = self.layout.containers();
        let mut out = Vec::new();
        for e in fs::read_dir(&dir).map_err(io_err(&dir))?.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if uuid::Uuid::parse_str(&name).is_ok() {
                if let Ok(r) = self.container(&name) {
                    out.push(r);
                }
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    /// Maps an id or alias to a container id.
    pub fn resolve(&self, name: &str) -> Result<String, RepoError> {
        if uuid::Uuid::parse_str(name).is_ok() && self.container_dir(name).join(RECORD_FILE).is_file() {
            return Ok(name.to_string());
        }
        let dir = self.layout.containers();
        for e in fs::read_dir(&dir).map_err(io_err(&dir))?.flatten() {
            if read_names(&e.path()).contains(name) {
                return Ok(e.file_name().to_string_lossy().into_owned());
            }
        }
        Err(RepoError::NotFound(format!("container {name}")))
    }

    pub fn set_name(&self, id: &str, alias: &str) -> Result<(), RepoError> {
        let valid = !alias.is_empty()
            && alias.len() <= 255
            && alias.bytes().all(|b| b.is_ascii_alphanumeric() || b"_.-".contains(&b))
            && !alias.starts_with(['.', '-']);
        if !valid || uuid::Uuid::parse_str(alias).is_ok() {
            return Err(RepoError::InvalidName(alias.to_string()));
        }
        let _lock = lock_file(&self.layout.containers().join(".names.lock"))?;
        let dir = self.container_dir(id);
        if !dir.join(RECORD_FILE).is_file() {
            return Err(RepoError::NotFound(format!("container {id}")));
        }
        if self.resolve(alias).is_ok() {
            return Err(RepoError::Conflict(format!("name {alias}")));
        }
        let mut names = read_names(&dir);
        names.insert(alias.to_string());
        write_names(&dir, &names)
    }

    pub fn remove_name(&self, alias: &str) -> Result<(), RepoError> {
        let _lock = lock_file(&self.layout.containers().join(".names.lock"))?;
        let id = self.resolve(alias)?;
        let dir = self.container_dir(&id);
        let mut names = read_names(&dir);
        if !names.remove(alias) {
            return Err(RepoError::NotFound(format!("name {alias}")));
        }
        write_names(&dir, &names)
    }

    pub fn set_exec_mode(&self, id: &str, mode: ExecMode) -> Result<(), RepoError> {
        let _lock = lock_file(&self.container_dir(id).join(".lock"))?;
        let mut record = self.container(id)?;
        record.exec_mode = mode;
        self.save_record(&record)
    }

    pub fn set_container_protected(&self, id: &str, on: bool) -> Result<(), RepoError> {
        self.container(id)?;
        set_marker(&self.container_dir(id).join(PROTECT_FILE), on)
    }

    pub fn remove_container(&self, id: &str) -> Result<(), RepoError> {
        let record = self.container(id)?;
        if record.protected {
            return Err(RepoError::Protected(format!("container {id}")));
        }
        let dir = self.container_dir(id);
        remove_tree(&dir).map_err(io_err(&dir))
    }
}

fn set_marker(path: &Path, on: bool) -> Result<(), RepoError> {
    if on {
        fs::write(path, b"").map_err(io_err(path))
    } else {
        match fs::remove_file(path) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(io_err(path)(e)),
            _ => Ok(()),
        }
    }
}

fn read_names(dir: &Path) -> BTreeSet<String> {
    fs::read_to_string(dir.join(NAMES_FILE))
        .unwrap_or_default()
        .lines()
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

fn write_names(dir: &Path, names: &BTreeSet<String>) -> Result<(), RepoError> {
    let mut text = String::new();
    for n in names {
        text.push_str(n);
        text.push('\n');
    }
    let tmp = dir.join(".names.new");
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, dir.join(NAMES_FILE)).map_err(io_err(dir))
}

/// `remove_dir_all` that first grants the owner access to directories the
/// container made unwritable.
pub fn remove_tree(path: &Path) -> io::Result<()> {
    match fs::remove_dir_all(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(_) => {
            make_dirs_writable(path);
            fs::remove_dir_all(path)
        }
    }
}

fn make_dirs_writable(path: &Path) {
    let Ok(meta) = fs::symlink_metadata(path) else { return };
    if !meta.is_dir() {
        return;
    }
    let _ = fs::set_permissions(path, fs::Permissions::from_mode(meta.permissions().mode() | 0o700));
    if let Ok(rd) = fs::read_dir(path) {
        for e in rd.flatten() {
            make_dirs_writable(&e.path());
        }
    }
}

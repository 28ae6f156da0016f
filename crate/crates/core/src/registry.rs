//! Docker Registry v2 client: token authentication, manifests and blobs.

use std::collections::HashMap;
use std::io::{self, Read};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use serde_json::Value;

use crate::repo::{sha256_digest, ImageRef, LayerDescriptor, Repo, RepoError};

pub const MEDIA_MANIFEST_V2: &str = "application/vnd.docker.distribution.manifest.v2+json";
pub const MEDIA_MANIFEST_LIST: &str = "application/vnd.docker.distribution.manifest.list.v2+json";
pub const MEDIA_OCI_MANIFEST: &str = "application/vnd.oci.image.manifest.v1+json";
pub const MEDIA_OCI_INDEX: &str = "application/vnd.oci.image.index.v1+json";
const MEDIA_SCHEMA1: [&str; 2] = [
    "application/vnd.docker.distribution.manifest.v1+json",
    "application/vnd.docker.distribution.manifest.v1+prettyjws",
];

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("registry protocol error: {0}")]
    Protocol(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("{0} not found in registry")]
    NotFound(String),
    #[error("unsupported manifest: {0}")]
    UnsupportedManifest(String),
    #[error("{url}: HTTP {status}: {message}")]
    Http { url: String, status: u16, message: String },
    #[error("{url}: {message}")]
    Transport { url: String, message: String },
    #[error(transparent)]
    Repo(#[from] RepoError),
}

impl RegistryError {
    fn retryable(&self) -> bool {
        match self {
            RegistryError::Transport { .. } => true,
            RegistryError::Http { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

/// A bearer token for one repository scope. An empty token means the
/// registry needs none.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuthToken {
    pub token: String,
    pub scope: String,
    /// Lifetime in seconds as announced by the token service.
    pub expiry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub schema_version: u32,
    pub media_type: String,
    pub config: LayerDescriptor,
    /// Base layer first.
    pub layers: Vec<LayerDescriptor>,
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// Plain HTTP instead of HTTPS, for local test registries.
    pub insecure: bool,
    pub credentials: Option<(String, String)>,
    pub parallelism: usize,
    pub attempts: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            insecure: false,
            credentials: None,
            parallelism: 4,
            attempts: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(600),
        }
    }
}

/// What a pull did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PullReport {
    pub image: ImageRef,
    pub layers: Vec<String>,
    pub downloaded: usize,
    pub reused: usize,
}

pub struct RegistryClient {
    agent: ureq::Agent,
    opts: ClientOptions,
    tokens: Mutex<HashMap<(String, String), AuthToken>>,
}

/// Host serving the registry API for a reference's registry name.
pub fn api_host(registry: &str) -> &str {
    match registry {
        "docker.io" | "index.docker.io" | "registry.hub.docker.com" => "registry-1.docker.io",
        other => other,
    }
}

/// Platform architecture name of the running host.
pub fn host_architecture() -> &'static str {
    match std::env::consts::ARCH {
        "x86_64" => "amd64",
        "aarch64" => "arm64",
        "x86" => "386",
        "powerpc64" => "ppc64le",
        "arm" => "arm",
        other => other,
    }
}

/// Parses `Bearer realm="...",service="...",scope="..."`.
pub fn parse_challenge(header: &str) -> Option<HashMap<String, String>> {
    let rest = header.trim().strip_prefix("Bearer ").or_else(|| header.trim().strip_prefix("bearer "))?;
    let mut out = HashMap::new();
    let mut s = rest.trim();
    while !s.is_empty() {
        let (key, after) = s.split_once('=')?;
        let key = key.trim().trim_start_matches(',').trim().to_ascii_lowercase();
        let after = after.trim_start();
        let (value, tail) = if let Some(q) = after.strip_prefix('"') {
            let end = q.find('"')?;
            (&q[..end], &q[end + 1..])
        } else {
            match after.find(',') {
                Some(i) => (&after[..i], &after[i..]),
                None => (after, ""),
            }
        };
        out.insert(key, value.to_string());
        s = tail.trim_start().trim_start_matches(',').trim_start();
    }
    out.contains_key("realm").then_some(out)
}

fn percent_encode(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-_.~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn base64(data: &[u8]) -> String {
    const T: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::new();
    for chunk in data.chunks(3) {
        let n = (u32::from(chunk[0]) << 16) | (u32::from(*chunk.get(1).unwrap_or(&0)) << 8) | u32::from(*chunk.get(2).unwrap_or(&0));
        for i in 0..4 {
            out.push(if i <= chunk.len() { T[(n >> (18 - 6 * i)) as usize & 63] as char } else { '=' });
        }
    }
    out
}

/// Best message from a registry error document, else the raw body.
fn error_message(body: &[u8]) -> String {
    if let Ok(v) = serde_json::from_slice::<Value>(body) {
        if let Some(m) = v["errors"][0]["message"].as_str() {
            return m.to_string();
        }
        if let Some(m) = v["details"].as_str().or(v["message"].as_str()) {
            return m.to_string();
        }
    }
    String::from_utf8_lossy(body).chars().take(200).collect()
}

struct Fetched {
    status: u16,
    content_type: Option<String>,
    challenge: Option<String>,
    body: ureq::Body,
}

#[derive(Deserialize)]
struct TokenReply {
    token: Option<String>,
    access_token: Option<String>,
    expires_in: Option<u64>,
}

impl RegistryClient {
    pub fn new(opts: ClientOptions) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(opts.timeout))
            .user_agent("udocker")
            .build();
        RegistryClient {
            agent: ureq::Agent::new_with_config(config),
            opts,
            tokens: Mutex::new(HashMap::new()),
        }
    }

    fn base(&self, registry: &str) -> String {
        let scheme = if self.opts.insecure { "http" } else { "https" };
        format!("{scheme}://{}/v2/", api_host(registry))
    }

    fn get(&self, url: &str, headers: &[(&str, &str)]) -> Result<Fetched, RegistryError> {
        let mut req = self.agent.get(url);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let resp = req.call().map_err(|e| RegistryError::Transport {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        let header = |name: &str| resp.headers().get(name).and_then(|v| v.to_str().ok()).map(String::from);
        let content_type = header("content-type");
        let challenge = header("www-authenticate");
        let status = resp.status().as_u16();
        Ok(Fetched {
            status,
            content_type,
            challenge,
            body: resp.into_body(),
        })
    }

    fn read_all(url: &str, body: ureq::Body) -> Result<Vec<u8>, RegistryError> {
        body.into_with_config()
            .limit(64 << 20)
            .read_to_vec()
            .map_err(|e| RegistryError::Transport {
                url: url.to_string(),
                message: e.to_string(),
            })
    }

    fn with_retries<T>(&self, mut f: impl FnMut() -> Result<T, RegistryError>) -> Result<T, RegistryError> {
        let mut delay = self.opts.backoff;
        let mut attempt = 1;
        loop {
            match f() {
                Err(e) if e.retryable() && attempt < self.opts.attempts => {
                    log::warn!("{e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Obtains a pull token for `repository`, or an empty token when the
    /// registry does not ask for one.
    pub fn authenticate(&self, registry: &str, repository: &str) -> Result<AuthToken, RegistryError> {
        let key = (registry.to_string(), repository.to_string());
        if let Some(t) = self.tokens.lock().unwrap().get(&key) {
            return Ok(t.clone());
        }
        let url = self.base(registry);
        let probe = self.with_retries(|| {
            let r = self.get(&url, &[])?;
            if r.status >= 500 || r.status == 429 {
                return Err(RegistryError::Http {
                    url: url.clone(),
                    status: r.status,
                    message: error_message(&Self::read_all(&url, r.body)?),
                });
            }
            Ok(r)
        })?;
        let scope = format!("repository:{repository}:pull");
        let token = match probe.status {
            401 => {
                let challenge = probe
                    .challenge
                    .as_deref()
                    .and_then(parse_challenge)
                    .ok_or_else(|| RegistryError::Protocol(format!("{url} answered 401 without a bearer challenge")))?;
                self.fetch_token(&challenge, &scope)?
            }
            s if (200..300).contains(&s) => AuthToken {
                scope,
                ..AuthToken::default()
            },
            s => {
                return Err(RegistryError::Http {
                    url: url.clone(),
                    status: s,
                    message: error_message(&Self::read_all(&url, probe.body)?),
                })
            }
        };
        self.tokens.lock().unwrap().insert(key, token.clone());
        Ok(token)
    }

    fn fetch_token(&self, challenge: &HashMap<String, String>, scope: &str) -> Result<AuthToken, RegistryError> {
        let realm = &challenge["realm"];
        let mut url = format!("{realm}{}scope={}", if realm.contains('?') { '&' } else { '?' }, percent_encode(scope));
        if let Some(service) = challenge.get("service") {
            url.push_str(&format!("&service={}", percent_encode(service)));
        }
        let basic = self
            .opts
            .credentials
            .as_ref()
            .map(|(u, p)| format!("Basic {}", base64(format!("{u}:{p}").as_bytes())));
        let headers: Vec<(&str, &str)> = basic.iter().map(|b| ("Authorization", b.as_str())).collect();
        let r = self.with_retries(|| self.get(&url, &headers))?;
        let status = r.status;
        let body = Self::read_all(&url, r.body)?;
        if status != 200 {
            return Err(RegistryError::Auth(format!("token service answered {status}: {}", error_message(&body))));
        }
        let reply: TokenReply =
            serde_json::from_slice(&body).map_err(|e| RegistryError::Auth(format!("malformed token reply: {e}")))?;
        let token = reply
            .token
            .or(reply.access_token)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| RegistryError::Auth("token service returned no token".into()))?;
        Ok(AuthToken {
            token,
            scope: scope.to_string(),
            expiry: reply.expires_in.unwrap_or(60),
        })
    }

    fn auth_header(token: &AuthToken, repository: &str) -> Option<String> {
        // Tokens only travel with requests inside their scope.
        (!token.token.is_empty() && token.scope == format!("repository:{repository}:pull")).then(|| format!("Bearer {}", token.token))
    }

    /// Fetches and parses the manifest of `image`, resolving manifest lists
    /// to the entry for this host's architecture.
    pub fn fetch_manifest(&self, image: &ImageRef, token: &AuthToken) -> Result<Manifest, RegistryError> {
        self.fetch_manifest_raw(image, token).map(|(m, _)| m)
    }

    /// Like [`Self::fetch_manifest`], also returning the manifest bytes.
    pub fn fetch_manifest_raw(&self, image: &ImageRef, token: &AuthToken) -> Result<(Manifest, Vec<u8>), RegistryError> {
        let (media, body) = self.get_manifest(image, &image.tag, token)?;
        if media == MEDIA_MANIFEST_LIST || media == MEDIA_OCI_INDEX {
            let digest = select_platform(&body, host_architecture())?;
            let (media, body) = self.get_manifest(image, &digest, token)?;
            if sha256_digest(&body) != digest {
                return Err(RepoError::Integrity {
                    expected: digest,
                    actual: sha256_digest(&body),
                }
                .into());
            }
            return Ok((parse_manifest(&media, &body)?, body));
        }
        Ok((parse_manifest(&media, &body)?, body))
    }

    fn get_manifest(&self, image: &ImageRef, reference: &str, token: &AuthToken) -> Result<(String, Vec<u8>), RegistryError> {
        let url = format!("{}{}/manifests/{reference}", self.base(&image.registry), image.repository);
        let accept = [MEDIA_MANIFEST_V2, MEDIA_MANIFEST_LIST, MEDIA_OCI_MANIFEST, MEDIA_OCI_INDEX].join(", ");
        let auth = Self::auth_header(token, &image.repository);
        let mut headers = vec![("Accept", accept.as_str())];
        if let Some(a) = &auth {
            headers.push(("Authorization", a.as_str()));
        }
        let (status, ct, body) = self.with_retries(|| {
            let r = self.get(&url, &headers)?;
            let status = r.status;
            let ct = r.content_type.clone();
            let body = Self::read_all(&url, r.body)?;
            if status >= 500 || status == 429 {
                return Err(RegistryError::Http {
                    url: url.clone(),
                    status,
                    message: error_message(&body),
                });
            }
            Ok((status, ct, body))
        })?;
        match status {
            200 => {}
            404 => return Err(RegistryError::NotFound(format!("{}:{reference}", image.repository))),
            401 | 403 => return Err(RegistryError::Auth(error_message(&body))),
            s => {
                return Err(RegistryError::Http {
                    url,
                    status: s,
                    message: error_message(&body),
                })
            }
        }
        let media = ct
            .map(|c| c.split(';').next().unwrap_or("").trim().to_string())
            .filter(|c| c.starts_with("application/vnd."))
            .or_else(|| {
                serde_json::from_slice::<Value>(&body)
                    .ok()
                    .and_then(|v| v["mediaType"].as_str().map(String::from))
            })
            .unwrap_or_default();
        Ok((media, body))
    }

    /// Downloads one blob into the repository, verifying its digest.
    pub fn fetch_blob(&self, repo: &Repo, image: &ImageRef, desc: &LayerDescriptor, token: &AuthToken) -> Result<(), RegistryError> {
        let url = format!("{}{}/blobs/{}", self.base(&image.registry), image.repository, desc.digest);
        let auth = Self::auth_header(token, &image.repository);
        let headers: Vec<(&str, &str)> = auth.iter().map(|a| ("Authorization", a.as_str())).collect();
        self.with_retries(|| {
            let r = self.get(&url, &headers)?;
            if r.status != 200 {
                let status = r.status;
                let body = Self::read_all(&url, r.body).unwrap_or_default();
                return Err(match status {
                    404 => RegistryError::NotFound(desc.digest.clone()),
                    401 | 403 => RegistryError::Auth(error_message(&body)),
                    _ => RegistryError::Http {
                        url: url.clone(),
                        status,
                        message: error_message(&body),
                    },
                });
            }
            let mut reader = TransportRead {
                inner: r.body.into_with_config().limit(u64::MAX).reader(),
                failed: false,
            };
            let stored = repo.store_layer(desc, &mut reader);
            match stored {
                Err(RepoError::Io { .. }) if reader.failed => Err(RegistryError::Transport {
                    url: url.clone(),
                    message: "connection lost while downloading".into(),
                }),
                other => other.map(|_| ()).map_err(RegistryError::from),
            }
        })
    }

    /// Downloads an image into `repo` and registers it once every blob has
    /// been verified. Blobs already present are not downloaded again.
    pub fn pull(&self, repo: &Repo, image: &ImageRef) -> Result<PullReport, RegistryError> {
        let token = self.authenticate(&image.registry, &image.repository)?;
        let (manifest, raw) = self.fetch_manifest_raw(image, &token)?;
        let mut blobs = vec![manifest.config.clone()];
        blobs.extend(manifest.layers.iter().cloned());

        let downloaded = AtomicUsize::new(0);
        let reused = AtomicUsize::new(0);
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let first_error: Mutex<Option<RegistryError>> = Mutex::new(None);
        let workers = self.opts.parallelism.clamp(1, blobs.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        return;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(desc) = blobs.get(i) else { return };
                    if repo.has_layer(&desc.digest) {
                        reused.fetch_add(1, Ordering::SeqCst);
                        continue;
                    }
                    match self.fetch_blob(repo, image, desc, &token) {
                        Ok(()) => {
                            downloaded.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(e) => {
                            abort.store(true, Ordering::SeqCst);
                            first_error.lock().unwrap().get_or_insert(e);
                            return;
                        }
                    }
                });
            }
        });
        if let Some(e) = first_error.into_inner().unwrap() {
            return Err(e);
        }
        let config = std::fs::read(repo.layer_path(&manifest.config.digest)?).map_err(|e| RepoError::Io {
            path: repo.layer_path(&manifest.config.digest).unwrap_or_default(),
            source: e,
        })?;
        let layers: Vec<String> = manifest.layers.iter().map(|l| l.digest.clone()).collect();
        repo.register_image(image, &raw, &config, &layers)?;
        Ok(PullReport {
            image: image.clone(),
            layers,
            downloaded: downloaded.into_inner(),
            reused: reused.into_inner(),
        })
    }
}

/// Remembers whether the network side failed, to tell transport errors
/// from local ones.
struct TransportRead<R> {
    inner: R,
    failed: bool,
}

impl<R: Read> Read for TransportRead<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.inner.read(buf).inspect_err(|_| self.failed = true)
    }
}

fn descriptor(v: &Value) -> Option<LayerDescriptor> {
    Some(LayerDescriptor {
        digest: v["digest"].as_str()?.to_string(),
        size: v["size"].as_u64()?,
        media_type: v["mediaType"].as_str().unwrap_or("").to_string(),
    })
}

/// Parses a schema-2 or OCI image manifest.
pub fn parse_manifest(media_type: &str, body: &[u8]) -> Result<Manifest, RegistryError> {
    if MEDIA_SCHEMA1.contains(&media_type) {
        return Err(RegistryError::UnsupportedManifest("schema 1 manifests are not supported".into()));
    }
    let v: Value = serde_json::from_slice(body).map_err(|e| RegistryError::Protocol(format!("malformed manifest: {e}")))?;
    let schema_version = v["schemaVersion"].as_u64().unwrap_or(0) as u32;
    if schema_version == 1 {
        return Err(RegistryError::UnsupportedManifest("schema 1 manifests are not supported".into()));
    }
    let media = if media_type.is_empty() {
        v["mediaType"].as_str().unwrap_or(MEDIA_OCI_MANIFEST)
    } else {
        media_type
    };
    if media != MEDIA_MANIFEST_V2 && media != MEDIA_OCI_MANIFEST {
        return Err(RegistryError::UnsupportedManifest(format!("media type {media:?}")));
    }
    if schema_version != 2 {
        return Err(RegistryError::UnsupportedManifest(format!("schema version {schema_version}")));
    }
    let config = descriptor(&v["config"]).ok_or_else(|| RegistryError::Protocol("manifest without a config descriptor".into()))?;
    let layers = v["layers"]
        .as_array()
        .ok_or_else(|| RegistryError::Protocol("manifest without layers".into()))?
        .iter()
        .map(|l| descriptor(l).ok_or_else(|| RegistryError::Protocol("malformed layer descriptor".into())))
        .collect::<Result<Vec<_>, _>>()?;
    for d in std::iter::once(&config).chain(&layers) {
        crate::repo::digest_hex(&d.digest)?;
    }
    Ok(Manifest {
        schema_version,
        media_type: media.to_string(),
        config,
        layers,
    })
}

/// Digest of the Linux entry for `arch` in a manifest list or OCI index.
pub fn select_platform(body: &[u8], arch: &str) -> Result<String, RegistryError> {
    let v: Value = serde_json::from_slice(body).map_err(|e| RegistryError::Protocol(format!("malformed manifest list: {e}")))?;
    let entries = v["manifests"]
        .as_array()
        .ok_or_else(|| RegistryError::Protocol("manifest list without entries".into()))?;
    entries
        .iter()
        .find(|m| m["platform"]["architecture"] == arch && m["platform"]["os"].as_str().is_none_or(|os| os == "linux"))
        .and_then(|m| m["digest"].as_str())
        .map(String::from)
        .ok_or_else(|| RegistryError::NotFound(format!("image for architecture {arch}")))
}

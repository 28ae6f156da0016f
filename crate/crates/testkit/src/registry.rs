//! A small Docker Registry v2 server on a loopback port.
//!
//! Supports the token flow (optionally demanding basic credentials),
//! schema-2 manifests, manifest lists and blobs. Blobs can be tampered with
//! on the way out and every request is logged.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::json;

use crate::digest;

pub const MANIFEST_V2: &str = "application/vnd.docker.distribution.manifest.v2+json";
pub const MANIFEST_LIST_V2: &str = "application/vnd.docker.distribution.manifest.list.v2+json";
pub const CONFIG_V1: &str = "application/vnd.docker.container.image.v1+json";
pub const LAYER_TAR_GZIP: &str = "application/vnd.docker.image.rootfs.diff.tar.gzip";

pub const TOKEN: &str = "fixture-token";

/// An image ready to be served: config blob, layer blobs and the manifest
/// describing them.
#[derive(Debug, Clone)]
pub struct FixtureImage {
    pub config: Vec<u8>,
    pub layers: Vec<Vec<u8>>,
    pub manifest: Vec<u8>,
}

impl FixtureImage {
    pub fn new(config: Vec<u8>, layers: Vec<Vec<u8>>) -> Self {
        let manifest = json!({
            "schemaVersion": 2,
            "mediaType": MANIFEST_V2,
            "config": {"mediaType": CONFIG_V1, "size": config.len(), "digest": digest(&config)},
            "layers": layers.iter().map(|l| json!({
                "mediaType": LAYER_TAR_GZIP, "size": l.len(), "digest": digest(l)
            })).collect::<Vec<_>>(),
        });
        FixtureImage {
            config,
            layers,
            manifest: serde_json::to_vec_pretty(&manifest).unwrap(),
        }
    }

    /// An image whose layers are the gzip-compressed tars of `layers`.
    pub fn from_layers(config: serde_json::Value, layers: &[crate::layerstack::Layer]) -> Self {
        let blobs = layers.iter().map(|l| gzip(&crate::layerstack::layer_tar(l))).collect();
        FixtureImage::new(serde_json::to_vec(&config).unwrap(), blobs)
    }

    pub fn layer_digests(&self) -> Vec<String> {
        self.layers.iter().map(|l| digest(l)).collect()
    }

    pub fn manifest_digest(&self) -> String {
        digest(&self.manifest)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AuthPolicy {
    /// When set, `/token` demands these basic credentials.
    pub credentials: Option<(String, String)>,
    /// Answer 401 without a challenge header.
    pub omit_challenge: bool,
}

#[derive(Default)]
struct State {
    /// (repository, reference) to (media type, body).
    manifests: BTreeMap<(String, String), (String, Vec<u8>)>,
    blobs: BTreeMap<String, Vec<u8>>,
    tampered: BTreeSet<String>,
    auth: Option<AuthPolicy>,
    log: Vec<Request>,
    /// Fail this many blob requests with 503 before serving.
    transient_failures: usize,
}

/// One logged request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub path: String,
    pub authorization: Option<String>,
    pub accept: Option<String>,
    pub status: u16,
}

pub struct FixtureRegistry {
    addr: String,
    state: Arc<Mutex<State>>,
}

impl FixtureRegistry {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let state = Arc::new(Mutex::new(State::default()));
        let st = state.clone();
        let base = addr.clone();
        thread::spawn(move || {
            for conn in listener.incoming() {
                let Ok(conn) = conn else { continue };
                let st = st.clone();
                let base = base.clone();
                thread::spawn(move || {
                    let _ = serve(conn, &st, &base);
                });
            }
        });
        FixtureRegistry { addr, state }
    }

    /// `127.0.0.1:<port>`, usable as the registry part of a reference.
    pub fn host(&self) -> &str {
        &self.addr
    }

    pub fn require_auth(&self, policy: AuthPolicy) {
        self.state.lock().unwrap().auth = Some(policy);
    }

    pub fn add_image(&self, repository: &str, tag: &str, image: &FixtureImage) {
        let mut st = self.state.lock().unwrap();
        st.blobs.insert(digest(&image.config), image.config.clone());
        for l in &image.layers {
            st.blobs.insert(digest(l), l.clone());
        }
        for reference in [tag.to_string(), image.manifest_digest()] {
            st.manifests
                .insert((repository.to_string(), reference), (MANIFEST_V2.to_string(), image.manifest.clone()));
        }
    }

    /// Serves a manifest list under `tag` with one entry per architecture.
    pub fn add_manifest_list(&self, repository: &str, tag: &str, entries: &[(&str, &FixtureImage)]) {
        for (arch, img) in entries {
            self.add_image(repository, &format!("{tag}-{arch}"), img);
        }
        let list = json!({
            "schemaVersion": 2,
            "mediaType": MANIFEST_LIST_V2,
            "manifests": entries.iter().map(|(arch, img)| json!({
                "mediaType": MANIFEST_V2,
                "size": img.manifest.len(),
                "digest": img.manifest_digest(),
                "platform": {"architecture": arch, "os": "linux"},
            })).collect::<Vec<_>>(),
        });
        let body = serde_json::to_vec(&list).unwrap();
        self.state
            .lock()
            .unwrap()
            .manifests
            .insert((repository.to_string(), tag.to_string()), (MANIFEST_LIST_V2.to_string(), body));
    }

    /// Serves an arbitrary manifest body with the given media type.
    pub fn add_raw_manifest(&self, repository: &str, tag: &str, media_type: &str, body: &[u8]) {
        self.state
            .lock()
            .unwrap()
            .manifests
            .insert((repository.to_string(), tag.to_string()), (media_type.to_string(), body.to_vec()));
    }

    /// Flips one byte of the blob whenever it is served.
    pub fn tamper(&self, digest: &str) {
        self.state.lock().unwrap().tampered.insert(digest.to_string());
    }

    pub fn fail_next_blobs(&self, n: usize) {
        self.state.lock().unwrap().transient_failures = n;
    }

    pub fn requests(&self) -> Vec<Request> {
        self.state.lock().unwrap().log.clone()
    }

    /// Number of successful blob downloads so far.
    pub fn blob_downloads(&self) -> usize {
        self.requests()
            .iter()
            .filter(|r| r.path.contains("/blobs/") && r.status == 200)
            .count()
    }

    pub fn clear_log(&self) {
        self.state.lock().unwrap().log.clear();
    }
}

struct Response {
    status: u16,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

fn reply(status: u16, body: impl Into<Vec<u8>>) -> Response {
    Response {
        status,
        headers: Vec::new(),
        body: body.into(),
    }
}

fn error_body(code: &str, msg: &str) -> Vec<u8> {
    serde_json::to_vec(&json!({"errors": [{"code": code, "message": msg}]})).unwrap()
}

fn serve(conn: TcpStream, state: &Mutex<State>, base: &str) -> std::io::Result<()> {
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or("").to_string();
    let target = parts.next().unwrap_or("").to_string();
    let mut authorization = None;
    let mut accept = None;
    let mut content_length = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h == "\r\n" || h == "\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let v = v.trim().to_string();
            match k.trim().to_ascii_lowercase().as_str() {
                "authorization" => authorization = Some(v),
                "accept" => accept = Some(accept.map_or(v.clone(), |a: String| format!("{a}, {v}"))),
                "content-length" => content_length = v.parse().unwrap_or(0),
                _ => {}
            }
        }
    }
    let mut sink = vec![0u8; content_length];
    reader.read_exact(&mut sink)?;

    let resp = if method == "GET" || method == "HEAD" {
        route(&target, authorization.as_deref(), state, base)
    } else {
        reply(405, error_body("UNSUPPORTED", "method not allowed"))
    };
    state.lock().unwrap().log.push(Request {
        path: target.clone(),
        authorization,
        accept,
        status: resp.status,
    });

    let mut out = conn;
    let reason = match resp.status {
        200 => "OK",
        401 => "Unauthorized",
        404 => "Not Found",
        503 => "Service Unavailable",
        _ => "Error",
    };
    let mut head = format!("HTTP/1.1 {} {reason}\r\nContent-Length: {}\r\nConnection: close\r\n", resp.status, resp.body.len());
    for (k, v) in &resp.headers {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    head.push_str("\r\n");
    out.write_all(head.as_bytes())?;
    if method != "HEAD" {
        out.write_all(&resp.body)?;
    }
    out.flush()
}

fn query_param<'a>(query: &'a str, key: &str) -> Option<&'a str> {
    query.split('&').find_map(|kv| kv.split_once('=').filter(|(k, _)| *k == key).map(|(_, v)| v))
}

fn percent_decode(s: &str) -> String {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let hex = (b[i] == b'%' && i + 2 < b.len())
            .then(|| std::str::from_utf8(&b[i + 1..i + 3]).ok().and_then(|h| u8::from_str_radix(h, 16).ok()))
            .flatten();
        match hex {
            Some(v) => {
                out.push(v);
                i += 3;
            }
            None => {
                out.push(if b[i] == b'+' { b' ' } else { b[i] });
                i += 1;
            }
        }
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn basic_ok(auth: Option<&str>, user: &str, pass: &str) -> bool {
    let expected = base64(format!("{user}:{pass}").as_bytes());
    auth.and_then(|a| a.strip_prefix("Basic ")) == Some(expected.as_str())
}

pub fn gzip(data: &[u8]) -> Vec<u8> {
    let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
    enc.write_all(data).unwrap();
    enc.finish().unwrap()
}

/// Standard base64, enough for basic credentials.
pub fn base64(data: &[u8]) -> String {
    const T: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::new();
    for chunk in data.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = (u32::from(b[0]) << 16) | (u32::from(b[1]) << 8) | u32::from(b[2]);
        for i in 0..4 {
            if i <= chunk.len() {
                out.push(T[(n >> (18 - 6 * i)) as usize & 63] as char);
            } else {
                out.push('=');
            }
        }
    }
    out
}

fn route(target: &str, authorization: Option<&str>, state: &Mutex<State>, base: &str) -> Response {
    let (path, query) = target.split_once('?').unwrap_or((target, ""));
    let mut st = state.lock().unwrap();

    if path == "/token" {
        let Some(policy) = st.auth.clone() else {
            return reply(404, error_body("NOT_FOUND", "no token service"));
        };
        if let Some((u, p)) = &policy.credentials {
            if !basic_ok(authorization, u, p) {
                return reply(401, error_body("UNAUTHORIZED", "incorrect username or password"));
            }
        }
        let scope = percent_decode(query_param(query, "scope").unwrap_or(""));
        let token = format!("{TOKEN}:{scope}");
        return reply(200, serde_json::to_vec(&json!({"token": token, "expires_in": 300})).unwrap());
    }

    let Some(rest) = path.strip_prefix("/v2/") else {
        return reply(404, error_body("NOT_FOUND", "unknown path"));
    };

    // Tokens are scoped to one repository.
    let repo_of = |rest: &str| -> Option<String> {
        ["/manifests/", "/blobs/"]
            .iter()
            .find_map(|m| rest.find(m).map(|i| rest[..i].to_string()))
    };
    if let Some(policy) = st.auth.clone() {
        let scope = repo_of(rest).map(|r| format!("repository:{r}:pull"));
        let expected = scope.as_ref().map(|s| format!("Bearer {TOKEN}:{s}"));
        let ok = match (&expected, authorization) {
            (Some(e), Some(a)) => a == e,
            (None, Some(a)) => a.starts_with(&format!("Bearer {TOKEN}")),
            _ => false,
        };
        if !ok {
            let mut r = reply(401, error_body("UNAUTHORIZED", "authentication required"));
            if !policy.omit_challenge {
                let mut challenge = format!("Bearer realm=\"http://{base}/token\",service=\"fixture\"");
                if let Some(s) = scope {
                    challenge.push_str(&format!(",scope=\"{s}\""));
                }
                r.headers.push(("WWW-Authenticate".into(), challenge));
            }
            return r;
        }
    }

    if rest.is_empty() {
        return reply(200, "{}");
    }
    if let Some(i) = rest.find("/manifests/") {
        let key = (rest[..i].to_string(), rest[i + "/manifests/".len()..].to_string());
        return match st.manifests.get(&key) {
            Some((mt, body)) => {
                let mut r = reply(200, body.clone());
                r.headers.push(("Content-Type".into(), mt.clone()));
                r.headers.push(("Docker-Content-Digest".into(), digest(body)));
                r
            }
            None => reply(404, error_body("MANIFEST_UNKNOWN", "manifest unknown")),
        };
    }
    if let Some(i) = rest.find("/blobs/") {
        let d = &rest[i + "/blobs/".len()..];
        if st.transient_failures > 0 {
            st.transient_failures -= 1;
            return reply(503, error_body("UNAVAILABLE", "try again"));
        }
        return match st.blobs.get(d) {
            Some(data) => {
                let mut data = data.clone();
                if st.tampered.contains(d) && !data.is_empty() {
                    let mid = data.len() / 2;
                    data[mid] ^= 0x01;
                }
                let mut r = reply(200, data);
                r.headers.push(("Content-Type".into(), "application/octet-stream".into()));
                r
            }
            None => reply(404, error_body("BLOB_UNKNOWN", "blob unknown")),
        };
    }
    reply(404, error_body("NOT_FOUND", "unknown path"))
}

#[cfg(test)]
mod tests {
    #[test]
    fn base64_matches_known_values() {
        assert_eq!(super::base64(b"user:pass"), "dXNlcjpwYXNz");
        assert_eq!(super::base64(b"a"), "YQ==");
        assert_eq!(super::base64(b"ab"), "YWI=");
    }
}

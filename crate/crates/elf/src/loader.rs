//! Neutralizing the host search locations compiled into a dynamic loader.
//!
//! A loader started outside a chroot still opens `/etc/ld.so.cache` and
//! searches `/lib`, `/usr/lib` and friends on the host. Every such string,
//! when it stands alone in the binary, is overwritten with a path of the same
//! length made of `#` characters that cannot exist, so only the explicit
//! library path supplied by the engine is searched.

/// Strings the loader uses to find host configuration.
const CONFIG_FILES: &[&str] = &["/etc/ld.so.cache", "/etc/ld.so.preload"];

fn is_lib_dir(s: &[u8]) -> bool {
    let s = s.strip_suffix(b"/").unwrap_or(s);
    let rest = if let Some(r) = s.strip_prefix(b"/usr/local") {
        r
    } else if let Some(r) = s.strip_prefix(b"/usr") {
        r
    } else {
        s
    };
    let Some(rest) = rest.strip_prefix(b"/lib") else {
        return false;
    };
    // "/lib", "/lib64", "/lib32", "/libx32", "/lib/<multiarch triplet>"
    match rest {
        b"" | b"64" | b"32" | b"x32" => true,
        _ => match rest.strip_prefix(b"/") {
            Some(triplet) => {
                triplet.contains(&b'-')
                    && triplet
                        .iter()
                        .all(|&c| c.is_ascii_alphanumeric() || c == b'-' || c == b'_')
            }
            None => false,
        },
    }
}

fn is_musl_path_file(s: &[u8]) -> bool {
    s.starts_with(b"/etc/ld-musl-") && s.ends_with(b".path")
}

/// True for a standalone string naming a host location the loader consults.
fn is_host_reference(s: &[u8]) -> bool {
    if CONFIG_FILES.iter().any(|c| c.as_bytes() == s) || is_musl_path_file(s) {
        return true;
    }
    if s.contains(&b':') {
        return s.split(|&c| c == b':').all(|p| !p.is_empty() && is_lib_dir(p));
    }
    is_lib_dir(s)
}

/// Iterates NUL-delimited strings that start right after a NUL byte.
fn standalone_strings(data: &[u8]) -> impl Iterator<Item = (usize, &[u8])> {
    let mut pos = 0;
    std::iter::from_fn(move || {
        while pos < data.len() {
            let start = pos;
            let end = data[start..].iter().position(|&b| b == 0).map(|n| start + n)?;
            pos = end + 1;
            if (start == 0 || data[start - 1] == 0) && end > start && data[start] == b'/' {
                return Some((start, &data[start..end]));
            }
        }
        None
    })
}

/// Host locations still referenced by a loader image.
pub fn host_references(data: &[u8]) -> Vec<String> {
    standalone_strings(data)
        .filter(|(_, s)| is_host_reference(s))
        .map(|(_, s)| String::from_utf8_lossy(s).into_owned())
        .collect()
}

/// Returns the loader image with every host reference overwritten, or
/// `None` when there is nothing left to change.
pub fn neutralize_loader(data: &[u8]) -> Option<Vec<u8>> {
    let hits: Vec<(usize, usize)> = standalone_strings(data)
        .filter(|(_, s)| is_host_reference(s))
        .map(|(off, s)| (off, s.len()))
        .collect();
    if hits.is_empty() {
        return None;
    }
    let mut out = data.to_vec();
    for (off, len) in hits {
        for (i, b) in out[off..off + len].iter_mut().enumerate() {
            // Keep separators so list lengths and component counts survive.
            if i > 0 && *b != b'/' && *b != b':' {
                *b = b'#';
            }
        }
    }
    Some(out)
}

/// True once no host reference remains.
pub fn is_neutralized(data: &[u8]) -> bool {
    host_references(data).is_empty()
}

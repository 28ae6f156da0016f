//! Random layer stacks and a naive model of what flattening them yields.
//!
//! The model is a map from relative path to node. Each layer first removes
//! what its whiteouts name, looking at the paths literally, then applies its
//! entries in order. Every entry is preceded by entries for its parent
//! directories, as real image layers are.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

use proptest::prelude::*;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Dir { path: String, mode: u32 },
    File { path: String, content: Vec<u8>, mode: u32 },
    Symlink { path: String, target: String },
    Hardlink { path: String, target: String },
    Whiteout { path: String },
    Opaque { dir: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layer {
    pub ops: Vec<Op>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Dir { mode: u32 },
    File { content: Vec<u8>, mode: u32 },
    Symlink(String),
}

pub type Tree = BTreeMap<String, Node>;

fn parent(path: &str) -> Option<&str> {
    path.rsplit_once('/').map(|(p, _)| p)
}

fn ancestors(path: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut p = path;
    while let Some(up) = parent(p) {
        out.push(up);
        p = up;
    }
    out.reverse();
    out
}

fn remove_subtree(tree: &mut Tree, path: &str) {
    let prefix = format!("{path}/");
    tree.retain(|k, _| k != path && !k.starts_with(&prefix));
}

fn clear_children(tree: &mut Tree, dir: &str) {
    if dir.is_empty() {
        tree.clear();
        return;
    }
    let prefix = format!("{dir}/");
    tree.retain(|k, _| !k.starts_with(&prefix));
}

fn put(tree: &mut Tree, path: &str, node: Node) {
    if let Node::Dir { mode } = node {
        if let Some(Node::Dir { mode: m }) = tree.get_mut(path) {
            *m = mode;
            return;
        }
    }
    remove_subtree(tree, path);
    tree.insert(path.to_string(), node);
}

/// Applies one layer to `tree` using the model semantics.
pub fn apply(tree: &mut Tree, layer: &Layer) {
    for op in &layer.ops {
        match op {
            Op::Whiteout { path } => remove_subtree(tree, path),
            Op::Opaque { dir } => {
                if dir.is_empty() || matches!(tree.get(dir.as_str()), Some(Node::Dir { .. })) {
                    clear_children(tree, dir);
                }
            }
            _ => {}
        }
    }
    for op in &layer.ops {
        match op {
            Op::Dir { path, mode } => put(tree, path, Node::Dir { mode: (mode & 0o1777) | 0o700 }),
            Op::File { path, content, mode } => put(
                tree,
                path,
                Node::File {
                    content: content.clone(),
                    mode: mode & 0o1777,
                },
            ),
            Op::Symlink { path, target } => put(tree, path, Node::Symlink(target.clone())),
            Op::Hardlink { path, target } => {
                let node = tree.get(target.as_str()).cloned().expect("hard link to a file of the same layer");
                put(tree, path, node);
            }
            Op::Whiteout { .. } | Op::Opaque { .. } => {}
        }
    }
}

/// The expected result of flattening `layers` onto an empty directory.
pub fn oracle(layers: &[Layer]) -> Tree {
    let mut tree = Tree::new();
    for l in layers {
        apply(&mut tree, l);
    }
    tree
}

fn header(kind: tar::EntryType, mode: u32, size: u64) -> tar::Header {
    let mut h = tar::Header::new_gnu();
    h.set_entry_type(kind);
    h.set_mode(mode);
    h.set_size(size);
    h.set_mtime(1_600_000_000);
    h.set_uid(0);
    h.set_gid(0);
    h
}

/// Serializes a layer as an uncompressed tar archive.
pub fn layer_tar(layer: &Layer) -> Vec<u8> {
    let mut b = tar::Builder::new(Vec::new());
    for op in &layer.ops {
        match op {
            Op::Dir { path, mode } => {
                let mut h = header(tar::EntryType::Directory, *mode, 0);
                b.append_data(&mut h, format!("{path}/"), std::io::empty()).unwrap();
            }
            Op::File { path, content, mode } => {
                let mut h = header(tar::EntryType::Regular, *mode, content.len() as u64);
                b.append_data(&mut h, path, content.as_slice()).unwrap();
            }
            Op::Symlink { path, target } => {
                let mut h = header(tar::EntryType::Symlink, 0o777, 0);
                // Verbatim: the builder would normalize the target.
                h.set_link_name_literal(target).unwrap();
                b.append_data(&mut h, path, std::io::empty()).unwrap();
            }
            Op::Hardlink { path, target } => {
                let mut h = header(tar::EntryType::Link, 0o644, 0);
                b.append_link(&mut h, path, target).unwrap();
            }
            Op::Whiteout { path } => {
                let name = match path.rsplit_once('/') {
                    Some((dir, leaf)) => format!("{dir}/.wh.{leaf}"),
                    None => format!(".wh.{path}"),
                };
                let mut h = header(tar::EntryType::Regular, 0o644, 0);
                b.append_data(&mut h, name, std::io::empty()).unwrap();
            }
            Op::Opaque { dir } => {
                let name = if dir.is_empty() {
                    ".wh..wh..opq".to_string()
                } else {
                    format!("{dir}/.wh..wh..opq")
                };
                let mut h = header(tar::EntryType::Regular, 0o644, 0);
                b.append_data(&mut h, name, std::io::empty()).unwrap();
            }
        }
    }
    b.into_inner().unwrap()
}

/// Reads a directory tree into the model representation.
pub fn walk(root: &Path) -> Tree {
    fn go(root: &Path, rel: &str, tree: &mut Tree) {
        let dir = if rel.is_empty() { root.to_path_buf() } else { root.join(rel) };
        for e in fs::read_dir(&dir).unwrap() {
            let e = e.unwrap();
            let name = e.file_name().to_string_lossy().into_owned();
            let rel = if rel.is_empty() { name } else { format!("{rel}/{name}") };
            let meta = fs::symlink_metadata(e.path()).unwrap();
            let mode = meta.permissions().mode() & 0o7777;
            if meta.file_type().is_symlink() {
                let t = fs::read_link(e.path()).unwrap();
                tree.insert(rel, Node::Symlink(t.to_string_lossy().into_owned()));
            } else if meta.is_dir() {
                tree.insert(rel.clone(), Node::Dir { mode });
                go(root, &rel, tree);
            } else {
                let content = fs::read(e.path()).unwrap();
                tree.insert(rel, Node::File { content, mode });
            }
        }
    }
    let mut tree = Tree::new();
    go(root, "", &mut tree);
    tree
}

const NAMES: [&str; 4] = ["a", "b", "c", "d"];

#[derive(Debug, Clone)]
enum Want {
    Dir(u32),
    File(Vec<u8>, u32),
    Symlink(String),
    Hardlink,
    Whiteout,
    Opaque,
}

fn rel_path() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&NAMES[..]), 1..4).prop_map(|v| v.join("/"))
}

fn want() -> impl Strategy<Value = Want> {
    let mode = prop::sample::select(&[0o755u32, 0o644, 0o600, 0o700, 0o500, 0o4755, 0o000][..]);
    let target = prop_oneof![
        rel_path(),
        rel_path().prop_map(|p| format!("/{p}")),
        Just("../a".to_string()),
        Just("/".to_string()),
        Just("nowhere".to_string()),
    ];
    prop_oneof![
        3 => mode.clone().prop_map(Want::Dir),
        4 => (prop::collection::vec(any::<u8>(), 0..40), mode).prop_map(|(c, m)| Want::File(c, m)),
        2 => target.prop_map(Want::Symlink),
        1 => Just(Want::Hardlink),
        2 => Just(Want::Whiteout),
        1 => Just(Want::Opaque),
    ]
}

/// Turns wishes into a consistent layer: parents are emitted as
/// directories, no path appears twice, and nothing is placed below a path
/// this layer made a non-directory.
fn build_layer(wishes: Vec<(String, Want)>) -> Layer {
    let mut ops = Vec::new();
    let mut dirs: BTreeSet<String> = BTreeSet::new();
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut files: Vec<String> = Vec::new();
    let blocked = |p: &str, used: &BTreeSet<String>, dirs: &BTreeSet<String>| {
        ancestors(p).iter().any(|a| used.contains(*a) && !dirs.contains(*a))
    };
    for (path, w) in wishes {
        if used.contains(&path) || blocked(&path, &used, &dirs) {
            continue;
        }
        if matches!(w, Want::Hardlink) && files.is_empty() {
            continue;
        }
        for a in ancestors(&path) {
            if dirs.insert(a.to_string()) {
                used.insert(a.to_string());
                ops.push(Op::Dir {
                    path: a.to_string(),
                    mode: 0o755,
                });
            }
        }
        match w {
            Want::Dir(mode) => {
                dirs.insert(path.clone());
                ops.push(Op::Dir { path: path.clone(), mode });
            }
            Want::File(content, mode) => {
                files.push(path.clone());
                ops.push(Op::File {
                    path: path.clone(),
                    content,
                    mode,
                });
            }
            Want::Symlink(target) => ops.push(Op::Symlink { path: path.clone(), target }),
            Want::Hardlink => {
                let target = files[path.len() % files.len()].clone();
                files.push(path.clone());
                ops.push(Op::Hardlink { path: path.clone(), target });
            }
            Want::Whiteout => {
                ops.push(Op::Whiteout { path: path.clone() });
                // A whiteout occupies the name in this layer.
            }
            Want::Opaque => {
                dirs.insert(path.clone());
                ops.push(Op::Dir {
                    path: path.clone(),
                    mode: 0o755,
                });
                ops.push(Op::Opaque { dir: path.clone() });
            }
        }
        used.insert(path);
    }
    Layer { ops }
}

pub fn layer() -> impl Strategy<Value = Layer> {
    prop::collection::vec((rel_path(), want()), 1..14).prop_map(build_layer)
}

/// Stacks of `min..=max` layers.
pub fn stack(min: usize, max: usize) -> impl Strategy<Value = Vec<Layer>> {
    prop::collection::vec(layer(), min..=max)
}

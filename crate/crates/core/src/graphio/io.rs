//! On-disk dataset directory:
//!
//! ```text
//! graph.json      {"n": u64, "d": u64, "classes": u64, "edges": u64}
//! edges.u32le     per undirected edge two LE u32 (u, v), u < v
//! features.f64le  n*d row-major LE f64
//! labels.u32le    n LE u32
//! splits.json     optional {"train": [..], "val": [..], "test": [..]}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Splits};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphHeader {
    pub n: u64,
    pub d: u64,
    pub classes: u64,
    pub edges: u64,
}

pub const HEADER_FILE: &str = "graph.json";
pub const EDGES_FILE: &str = "edges.u32le";
pub const FEATURES_FILE: &str = "features.f64le";
pub const LABELS_FILE: &str = "labels.u32le";
pub const SPLITS_FILE: &str = "splits.json";

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_graph(g: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = GraphHeader {
        n: g.n() as u64,
        d: g.feature_dim() as u64,
        classes: g.classes() as u64,
        edges: g.edges().len() as u64,
    };
    atomic_write(&dir.join(HEADER_FILE), &serde_json::to_vec(&header)?)?;

    let mut edges = Vec::with_capacity(g.edges().len() * 8);
    for &(u, v) in g.edges() {
        edges.extend_from_slice(&u.to_le_bytes());
        edges.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(&dir.join(EDGES_FILE), &edges)?;

    let mut feats = Vec::with_capacity(g.features().len() * 8);
    for v in g.features().data() {
        feats.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(&dir.join(FEATURES_FILE), &feats)?;

    let labels: Vec<u8> = g.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
    atomic_write(&dir.join(LABELS_FILE), &labels)?;

    let splits_path = dir.join(SPLITS_FILE);
    match g.splits() {
        Some(s) => atomic_write(&splits_path, &serde_json::to_vec(s)?)?,
        None => {
            if splits_path.exists() {
                fs::remove_file(&splits_path).map_err(|e| Error::io(&splits_path, e))?;
            }
        }
    }
    Ok(())
}

pub fn load_graph(dir: &Path) -> Result<Graph> {
    let header_path = dir.join(HEADER_FILE);
    let header: GraphHeader = serde_json::from_slice(&read(&header_path)?)
        .map_err(|e| Error::format(&header_path, e.to_string()))?;
    let n = header.n as usize;
    let d = header.d as usize;

    let edges_path = dir.join(EDGES_FILE);
    let raw = read(&edges_path)?;
    if raw.len() as u64 != header.edges * 8 {
        return Err(Error::format(
            &edges_path,
            format!("expected {} edges, found {} bytes", header.edges, raw.len()),
        ));
    }
    let mut edges = Vec::with_capacity(header.edges as usize);
    for pair in raw.chunks_exact(8) {
        let u = u32::from_le_bytes(pair[0..4].try_into().unwrap());
        let v = u32::from_le_bytes(pair[4..8].try_into().unwrap());
        if u as usize >= n || v as usize >= n {
            return Err(Error::format(&edges_path, format!("edge ({u}, {v}) out of range")));
        }
        if u == v {
            return Err(Error::format(&edges_path, format!("self-loop on node {u}")));
        }
        edges.push((u, v));
    }

    let feat_path = dir.join(FEATURES_FILE);
    let raw = read(&feat_path)?;
    if raw.len() != n * d * 8 {
        return Err(Error::format(
            &feat_path,
            format!("expected {n}x{d} f64 values, found {} bytes", raw.len()),
        ));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(&feat_path, "non-finite feature value"));
    }
    let features = Matrix::from_vec(n, d, data)?;

    let label_path = dir.join(LABELS_FILE);
    let raw = read(&label_path)?;
    if raw.len() != n * 4 {
        return Err(Error::format(
            &label_path,
            format!("expected {n} labels, found {} bytes", raw.len()),
        ));
    }
    let labels: Vec<u32> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(&bad) = labels.iter().find(|&&l| l as u64 >= header.classes) {
        return Err(Error::format(
            &label_path,
            format!("label {bad} outside [0, {})", header.classes),
        ));
    }

    let mut g = Graph::new(n, edges, features, labels, header.classes as usize)
        .map_err(|e| Error::format(dir, e.to_string()))?;

    let splits_path = dir.join(SPLITS_FILE);
    if splits_path.exists() {
        let s: Splits = serde_json::from_slice(&read(&splits_path)?)
            .map_err(|e| Error::format(&splits_path, e.to_string()))?;
        g.set_splits(Some(s))
            .map_err(|e| Error::format(&splits_path, e.to_string()))?;
    }
    Ok(g)
}

//! Canonical on-disk dataset format and synthetic fixtures.
//!
//! A dataset directory holds four files:
//!
//! * `meta.json`: `name`, `num_nodes`, `num_edges`, `num_features`, `num_classes`;
//! * `edges.bin`: little-endian `u32` pairs `(src, dst)`, every undirected
//!   edge once with `src < dst`, no self-loops;
//! * `features.bin`: little-endian `f64`, row-major `N x F`;
//! * `labels.bin`: little-endian `u32`, length `N`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
pub const EDGES_FILE: &str = "edges.bin";
pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.bin";

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub num_nodes: usize,
    /// Undirected edges, self-loops excluded.
    pub num_edges: usize,
    pub num_features: usize,
    pub num_classes: usize,
}

/// A node-classification graph held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graph: Arc<Graph>,
    /// `[N, F]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    /// Checks that shapes, labels and feature values are consistent.
    pub fn new(name: impl Into<String>, graph: Graph, features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            graph: Arc::new(graph),
            features,
            labels,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            name: self.name.clone(),
            num_nodes: self.num_nodes(),
            num_edges: self.graph.num_undirected_edges(),
            num_features: self.num_features(),
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.features.ndim() != 2 || self.features.shape()[0] != n {
            return Err(Error::Validation(format!(
                "features have shape {:?}, expected [{n}, F]",
                self.features.shape()
            )));
        }
        if self.labels.len() != n {
            return Err(Error::Validation(format!(
                "expected {n} labels, found {}",
                self.labels.len()
            )));
        }
        if let Some((v, &y)) = self.labels.iter().enumerate().find(|(_, &y)| y >= self.num_classes) {
            return Err(Error::Validation(format!(
                "node {v} has label {y}, expected a class in 0..{}",
                self.num_classes
            )));
        }
        if let Some(i) = self.features.data().iter().position(|x| !x.is_finite()) {
            let f = self.num_features().max(1);
            return Err(Error::Validation(format!(
                "non-finite feature at node {}, column {}",
                i / f,
                i % f
            )));
        }
        Ok(())
    }

    /// Scales every feature row to sum to one; rows summing to zero are kept.
    pub fn row_normalize(&mut self) {
        let f = self.num_features();
        if f == 0 {
            return;
        }
        for row in self.features.data_mut().chunks_mut(f) {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
    }
}

/// Published statistics of a benchmark dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferenceStats {
    pub name: &'static str,
    pub nodes: usize,
    pub edges: usize,
    pub features: usize,
    pub classes: usize,
}

pub const REFERENCE_STATS: [ReferenceStats; 8] = [
    ReferenceStats { name: "cora", nodes: 2708, edges: 5278, features: 1433, classes: 7 },
    ReferenceStats { name: "citeseer", nodes: 3327, edges: 4552, features: 3703, classes: 6 },
    ReferenceStats { name: "pubmed", nodes: 19717, edges: 44324, features: 500, classes: 3 },
    ReferenceStats { name: "cora-full", nodes: 19793, edges: 63421, features: 8710, classes: 70 },
    ReferenceStats { name: "coauthor-cs", nodes: 18333, edges: 81894, features: 6805, classes: 15 },
    ReferenceStats { name: "coauthor-physics", nodes: 34493, edges: 247962, features: 8415, classes: 5 },
    ReferenceStats { name: "amazon-computers", nodes: 13752, edges: 245861, features: 767, classes: 10 },
    ReferenceStats { name: "amazon-photo", nodes: 7650, edges: 119081, features: 745, classes: 8 },
];

/// Lower-cases and maps spaces and underscores to dashes.
pub fn canonical_name(name: &str) -> String {
    name.trim()
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c == ' ' || c == '_' { '-' } else { c })
        .collect()
}

pub fn reference_stats(name: &str) -> Option<ReferenceStats> {
    let key = canonical_name(name);
    REFERENCE_STATS.iter().copied().find(|s| s.name == key)
}

/// Compares a dataset with its published statistics, if it has any.
///
/// Node, feature and class counts must match exactly. Edge counts only log
/// a warning, since sources disagree on how edges are counted.
pub fn check_reference(meta: &DatasetMeta) -> Result<()> {
    let Some(stats) = reference_stats(&meta.name) else {
        return Ok(());
    };
    for (what, expected, actual) in [
        ("nodes", stats.nodes, meta.num_nodes),
        ("features", stats.features, meta.num_features),
        ("classes", stats.classes, meta.num_classes),
    ] {
        if expected != actual {
            return Err(Error::Validation(format!(
                "{}: expected {expected} {what}, found {actual}",
                stats.name
            )));
        }
    }
    if stats.edges != meta.num_edges {
        log::warn!(
            "{}: expected {} edges, found {} undirected ({} directed)",
            stats.name,
            stats.edges,
            meta.num_edges,
            2 * meta.num_edges
        );
    }
    Ok(())
}

/// Options applied while loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    pub row_normalize: bool,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    load_dataset_with(dir, LoadOptions::default())
}

pub fn load_dataset_with(dir: impl AsRef<Path>, opts: LoadOptions) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_bytes = read_file(&dir.join(META_FILE))?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Load {
        path: dir.join(META_FILE),
        reason: e.to_string(),
    })?;
    let (n, f) = (meta.num_nodes, meta.num_features);

    let edge_words = read_u32s(&dir.join(EDGES_FILE))?;
    if edge_words.len() != 2 * meta.num_edges {
        return Err(Error::Validation(format!(
            "{EDGES_FILE}: expected {} edges, found {} u32 values",
            meta.num_edges,
            edge_words.len()
        )));
    }
    let mut edges = Vec::with_capacity(meta.num_edges);
    let mut seen = HashSet::with_capacity(meta.num_edges);
    for (i, pair) in edge_words.chunks_exact(2).enumerate() {
        let (src, dst) = (pair[0] as usize, pair[1] as usize);
        if src >= dst {
            return Err(Error::Validation(format!(
                "{EDGES_FILE}: edge {i} ({src}, {dst}) must satisfy src < dst"
            )));
        }
        if !seen.insert((src, dst)) {
            return Err(Error::Validation(format!("{EDGES_FILE}: edge {i} ({src}, {dst}) is duplicated")));
        }
        edges.push((src, dst));
    }
    let graph = Graph::build(n, &edges)?;

    let features = read_f64s(&dir.join(FEATURES_FILE))?;
    if features.len() != n * f {
        return Err(Error::Validation(format!(
            "{FEATURES_FILE}: expected {n} x {f} = {} values, found {}",
            n * f,
            features.len()
        )));
    }
    let labels = read_u32s(&dir.join(LABELS_FILE))?;
    if labels.len() != n {
        return Err(Error::Validation(format!(
            "{LABELS_FILE}: expected {n} labels, found {}",
            labels.len()
        )));
    }
    let mut ds = Dataset::new(
        meta.name.clone(),
        graph,
        Tensor::new(vec![n, f], features)?,
        labels.into_iter().map(|y| y as usize).collect(),
        meta.num_classes,
    )?;
    check_reference(&meta)?;
    log::info!(
        "loaded {}: {n} nodes, {} undirected edges ({} directed), {f} features, {} classes",
        meta.name,
        meta.num_edges,
        2 * meta.num_edges,
        meta.num_classes
    );
    if opts.row_normalize {
        ds.row_normalize();
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    if ds.num_features() == 0 {
        return Err(Error::Validation("cannot save a dataset without features".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = ds.meta();
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(dir.join(META_FILE), json)?;

    let mut w = BufWriter::new(fs::File::create(dir.join(EDGES_FILE))?);
    for (src, dst) in ds.graph.undirected_edges() {
        w.write_all(&to_u32(src)?.to_le_bytes())?;
        w.write_all(&to_u32(dst)?.to_le_bytes())?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join(FEATURES_FILE))?);
    for x in ds.features.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join(LABELS_FILE))?);
    for &y in &ds.labels {
        w.write_all(&to_u32(y)?.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn to_u32(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Validation(format!("{x} does not fit in 32 bits")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn misaligned(path: &Path, len: usize, width: usize) -> Error {
    Error::Load {
        path: PathBuf::from(path),
        reason: format!("length {len} is not a multiple of {width} bytes"),
    }
}

fn read_u32s(path: &Path) -> Result<Vec<u32>> {
    let bytes = read_file(path)?;
    if bytes.len() % 4 != 0 {
        return Err(misaligned(path, bytes.len(), 4));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = read_file(path)?;
    if bytes.len() % 8 != 0 {
        return Err(misaligned(path, bytes.len(), 8));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Seeded Erdős–Rényi graph with uniform `[-1, 1]` features.
///
/// Labels are uniform at random. With `separable`, the first `c` feature
/// columns encode the label: column `y` is 1 and the other `c - 1` are
/// negative, so a linear classifier separates the classes exactly.
pub fn make_synthetic(n: usize, f: usize, c: usize, edge_prob: f64, seed: u64, separable: bool) -> Result<Dataset> {
    if n < 3 {
        return Err(config(format!("synthetic graphs need at least 3 nodes, got {n}")));
    }
    if c < 2 {
        return Err(config(format!("synthetic graphs need at least 2 classes, got {c}")));
    }
    if f == 0 || (separable && f < c) {
        return Err(config(format!(
            "{f} features are too few for {c} classes{}",
            if separable { " with planted labels" } else { "" }
        )));
    }
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(config(format!("edge probability {edge_prob} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let mut edges = Vec::new();
    for src in 0..n {
        for dst in src + 1..n {
            if rng.gen::<f64>() < edge_prob {
                edges.push((src, dst));
            }
        }
    }
    let mut features = Tensor::uniform(&[n, f], -1.0, 1.0, &mut rng);
    if separable {
        for (v, &y) in labels.iter().enumerate() {
            let row = features.row_mut(v);
            for (j, x) in row.iter_mut().take(c).enumerate() {
                *x = if j == y { 1.0 } else { rng.gen_range(-1.0..0.0) };
            }
        }
    }
    Dataset::new("synthetic", Graph::build(n, &edges)?, features, labels, c)
}
